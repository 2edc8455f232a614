use std::path::{Path, PathBuf};

use biasprobe::attribution::{heatmap, inference_vector, local_surrogate, write_heatmap};
use biasprobe::bench::{
    all_pairs_graph, run_experiment2, run_experiment3, synth_dataset, train_standard, ReferenceMode, SynthSpec,
};
use biasprobe::diagnosis::{diagnose, inference_patterns};
use biasprobe::groundtruth::{parse_relations, RelationGraph};
use biasprobe::io::write_atomic;
use biasprobe::net::{NetError, Network};
use biasprobe::relation::AnnotationTable;
use biasprobe::tensor::Tensor;
use serde::Serialize;

use crate::config::{apply_diagnosis, apply_train, timestamp, validate_diagnosis, validate_train, Echo, RunConfig};
use crate::dataset::{read_dataset, write_dataset, RELATIONS};
use crate::{failed, invalid, Cli, CliError, Command, LabelFlags};

pub(crate) fn dispatch(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Synth(a) => synth(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Diagnose(a) => diagnose_cmd(cfg, a),
        Command::Experiment2(a) => experiment2(cfg, a),
        Command::Experiment3(a) => experiment3(cfg, a),
        Command::Heatmap(a) => heatmap_cmd(cfg, a),
    }
}

fn require_dir(dir: &Path) -> Result<(), CliError> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(invalid(format!("output directory {} does not exist", dir.display())))
    }
}

fn require_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => require_dir(p),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| failed(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    timestamp: String,
    run_config: serde_json::Value,
    #[serde(flatten)]
    body: &'a T,
}

fn write_report<T: Serialize>(path: &Path, echo: &Echo, body: &T) -> Result<(), CliError> {
    let report = Report {
        timestamp: timestamp(),
        run_config: echo.value(),
        body,
    };
    let mut bytes = serde_json::to_vec_pretty(&report).map_err(failed)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn write_csv_with<E: std::fmt::Display>(
    path: &Path,
    f: impl FnOnce(&mut Vec<u8>) -> Result<(), E>,
) -> Result<(), CliError> {
    let mut bytes = Vec::new();
    f(&mut bytes).map_err(|e| failed(format!("{}: {e}", path.display())))?;
    write_file(path, &bytes)
}

fn apply_labels(cfg: &mut RunConfig, f: &LabelFlags) {
    if !f.flips.is_empty() {
        cfg.flips = f.flips.clone();
    }
    if let Some(t) = f.threshold {
        cfg.binarize_threshold = t;
    }
}

fn load_model(path: &Path) -> Result<Network, CliError> {
    Network::load(path).map_err(|e| invalid(format!("model {}: {e}", path.display())))
}

fn with_probe(net: Network, probe: Option<usize>) -> Result<Network, CliError> {
    match probe {
        Some(k) if k != net.probe_layer() => net.with_probe_layer(k).map_err(invalid),
        _ => Ok(net),
    }
}

fn check_model_fits(net: &Network, images: &[Tensor], table: &AnnotationTable) -> Result<(), CliError> {
    if net.attribute_count() != table.attribute_count() {
        return Err(invalid(format!(
            "model has {} outputs but the annotations name {} attributes",
            net.attribute_count(),
            table.attribute_count()
        )));
    }
    if let Some(im) = images.first() {
        if im.shape() != net.config().input_shape.as_slice() {
            return Err(invalid(format!(
                "model expects images of shape {:?}, dataset has {:?}",
                net.config().input_shape,
                im.shape()
            )));
        }
    }
    Ok(())
}

fn probe_chw(net: &Network) -> (usize, usize, usize) {
    match net.probe_shape() {
        [c, h, w] => (*c, *h, *w),
        s => (1, 1, s.iter().product()),
    }
}

fn synth(mut cfg: RunConfig, a: crate::SynthArgs) -> Result<(), CliError> {
    if let Some(n) = a.attributes {
        let noise = cfg.synth.noise;
        cfg.synth = SynthSpec {
            noise,
            ..SynthSpec::disjoint(n, cfg.synth.samples, cfg.seed)
        };
    }
    if let Some(n) = a.samples {
        cfg.synth.samples = n;
    }
    if let Some(v) = a.noise {
        cfg.synth.noise = v;
    }
    require_dir(&a.out)?;
    cfg.synth.validate().map_err(invalid)?;
    if cfg.synth.samples == 0 {
        return Err(invalid("need at least one sample"));
    }
    let (images, table) = synth_dataset(&cfg.synth).map_err(failed)?;
    write_dataset(&a.out, &images, &table)?;
    let graph = all_pairs_graph(&table.attribute_names);
    let mut rel = String::from("# every pair of disjoint-region attributes is unrelated\n");
    for e in &graph.edges {
        rel.push_str(&format!("{},{},{}\n", graph.attribute_names[e.i], graph.attribute_names[e.j], e.label));
    }
    write_file(&a.out.join(RELATIONS), rel.as_bytes())?;
    let echo = Echo::new("synth", &cfg, &[("out", &a.out)]);
    write_report(&a.out.join("synth.json"), &echo, &serde_json::json!({ "samples": table.len() }))
}

fn train(mut cfg: RunConfig, a: crate::TrainArgs) -> Result<(), CliError> {
    apply_train(&mut cfg.train, &a.train);
    apply_labels(&mut cfg, &a.labels);
    validate_train(&cfg.train)?;
    require_parent(&a.out)?;
    let (images, table) = read_dataset(&a.data, &cfg.flips, cfg.binarize_threshold)?;
    let (net, log) = train_standard(&images, &table, &cfg.train).map_err(|e| match e {
        biasprobe::bench::BenchError::Net(NetError::NonFiniteLoss { epoch }) => {
            failed(format!("training diverged: non-finite loss in epoch {epoch}"))
        }
        e => failed(e),
    })?;
    let net = with_probe(net, a.probe_layer)?;
    net.save(&a.out).map_err(|e| failed(format!("{}: {e}", a.out.display())))?;

    let loss_path = a.out.with_extension("loss.csv");
    let mut rows = String::from("epoch,mean_loss\n");
    rows.push_str(&format!("0,{:.12}\n", log.initial_loss));
    for (k, l) in log.epoch_losses.iter().enumerate() {
        rows.push_str(&format!("{},{:.12}\n", k + 1, l));
    }
    write_file(&loss_path, rows.as_bytes())?;
    let echo = Echo::new("train", &cfg, &[("data", &a.data), ("out", &a.out)]);
    write_report(&a.out.with_extension("train.json"), &echo, &serde_json::json!({ "log": log }))
}

fn diagnose_cmd(mut cfg: RunConfig, a: crate::DiagnoseArgs) -> Result<(), CliError> {
    apply_diagnosis(&mut cfg.diagnosis, &a.diagnosis);
    apply_labels(&mut cfg, &a.labels);
    if let Some(n) = a.heatmaps {
        cfg.heatmaps = n;
    }
    validate_diagnosis(&cfg.diagnosis)?;
    require_dir(&a.out)?;
    let (images, table) = read_dataset(&a.data, &cfg.flips, cfg.binarize_threshold)?;
    let graph = read_relations(&a.relations, &table)?;
    let net = with_probe(load_model(&a.model)?, cfg.diagnosis.probe_layer)?;
    check_model_fits(&net, &images, &table)?;

    let mut result = diagnose(&net, &images, &table, &graph, &cfg.diagnosis).map_err(failed)?;
    let echo = Echo::new(
        "diagnose",
        &cfg,
        &[("model", &a.model), ("data", &a.data), ("relations", &a.relations), ("out", &a.out)],
    );
    result.report.timestamp = Some(timestamp());
    result.report.run_config = Some(echo.value());
    write_file(&a.out.join("report.json"), &result.report.to_json())?;
    write_csv_with(&a.out.join("summary.csv"), |w| result.report.write_summary_csv(w))?;

    let hist_dir = a.out.join("histograms");
    std::fs::create_dir_all(&hist_dir).map_err(|e| failed(format!("{}: {e}", hist_dir.display())))?;
    for d in &result.distributions {
        let path = hist_dir.join(format!("pair_{:03}_{:03}.csv", d.pair.0, d.pair.1));
        write_csv_with(&path, |w| d.write_csv(w))?;
    }

    if cfg.heatmaps > 0 {
        let dir = a.out.join("heatmaps");
        std::fs::create_dir_all(&dir).map_err(|e| failed(format!("{}: {e}", dir.display())))?;
        for (k, image) in images.iter().enumerate().take(cfg.heatmaps) {
            let trace = net.forward(image).map_err(failed)?;
            let x = &trace.outputs[net.probe_layer()];
            for (attr, mask) in result.masks.iter().enumerate() {
                let Some(mask) = mask else { continue };
                let s = local_surrogate(&net, &trace, attr).map_err(failed)?;
                let v = inference_vector(mask, &s).map_err(failed)?;
                let map = heatmap(&v, x, probe_chw(&net)).map_err(failed)?;
                let stem = dir.join(format!("img{k:05}_{}", table.attribute_names[attr]));
                write_heatmap(&map, &stem).map_err(failed)?;
            }
        }
    }
    Ok(())
}

fn read_relations(path: &Path, table: &AnnotationTable) -> Result<RelationGraph, CliError> {
    let file = std::fs::File::open(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    parse_relations(file, &table.attribute_names).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn experiment2(mut cfg: RunConfig, a: crate::Experiment2Args) -> Result<(), CliError> {
    let e = &mut cfg.experiment2;
    if let Some(s) = &a.seeds {
        e.seeds = s.0.clone();
    }
    if let Some(t) = &a.taus {
        e.taus = t.clone();
    }
    if let Some(n) = a.samples {
        e.synth.samples = n;
    }
    if let Some(v) = a.noise {
        e.synth.noise = v;
    }
    if let (Some(mu), Some(sigma)) = (a.reference_mu, a.reference_sigma) {
        e.reference = ReferenceMode::Fixed { mu, sigma };
    }
    apply_train(&mut e.train, &a.train);
    apply_diagnosis(&mut e.diagnosis, &a.diagnosis);
    validate_train(&e.train)?;
    validate_diagnosis(&e.diagnosis)?;
    e.synth.validate().map_err(invalid)?;
    if e.taus.iter().any(|t| !(0.0..=1.0).contains(t)) || e.taus.is_empty() {
        return Err(invalid("bias levels must lie in [0, 1]"));
    }
    if let ReferenceMode::Fixed { sigma, .. } = e.reference {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid("reference sigma must be positive"));
        }
    }
    require_dir(&a.out)?;
    let result = run_experiment2(&cfg.experiment2).map_err(failed)?;
    write_csv_with(&a.out.join("experiment2.csv"), |w| result.write_csv(w))?;
    let echo = Echo::new("experiment2", &cfg, &[("out", &a.out)]);
    write_report(&a.out.join("experiment2.json"), &echo, &result)
}

fn experiment3(mut cfg: RunConfig, a: crate::Experiment3Args) -> Result<(), CliError> {
    let e = &mut cfg.experiment3;
    if let Some(s) = &a.seeds {
        e.seeds = s.0.clone();
    }
    if let Some(n) = a.top_n {
        e.top_n = n;
    }
    if let Some(n) = a.samples {
        e.synth.samples = n;
    }
    if let Some(n) = a.test_samples {
        e.test_samples = n;
    }
    if let Some(t) = a.tau {
        e.tau = t;
    }
    if let Some(v) = a.noise {
        e.synth.noise = v;
    }
    apply_train(&mut e.train, &a.train);
    apply_diagnosis(&mut e.diagnosis, &a.diagnosis);
    validate_train(&e.train)?;
    validate_diagnosis(&e.diagnosis)?;
    e.synth.validate().map_err(invalid)?;
    if !(0.0..=1.0).contains(&e.tau) {
        return Err(invalid("bias level must lie in [0, 1]"));
    }
    let n = e.synth.attribute_count();
    if e.biased_pair.0 == e.biased_pair.1 || e.biased_pair.0 >= n || e.biased_pair.1 >= n {
        return Err(invalid("biased pair must name two distinct attributes"));
    }
    require_dir(&a.out)?;
    let result = run_experiment3(&cfg.experiment3).map_err(failed)?;
    write_csv_with(&a.out.join("experiment3.csv"), |w| result.write_csv(w))?;
    let echo = Echo::new("experiment3", &cfg, &[("out", &a.out)]);
    write_report(&a.out.join("experiment3.json"), &echo, &result)
}

fn heatmap_cmd(mut cfg: RunConfig, a: crate::HeatmapArgs) -> Result<(), CliError> {
    apply_diagnosis(&mut cfg.diagnosis, &a.diagnosis);
    apply_labels(&mut cfg, &a.labels);
    validate_diagnosis(&cfg.diagnosis)?;
    require_parent(&a.out)?;
    let (images, table) = read_dataset(&a.data, &cfg.flips, cfg.binarize_threshold)?;
    let net = with_probe(load_model(&a.model)?, cfg.diagnosis.probe_layer)?;
    check_model_fits(&net, &images, &table)?;
    let attr = table
        .attribute_index(&a.attribute)
        .ok_or_else(|| invalid(format!("unknown attribute `{}`", a.attribute)))?;
    if a.image >= images.len() {
        return Err(invalid(format!("image index {} out of range ({} images)", a.image, images.len())));
    }
    let patterns = inference_patterns(&net, &images, &[attr], &cfg.diagnosis.mask).map_err(failed)?;
    let v = &patterns.vectors[attr].as_ref().expect("requested attribute")[a.image];
    let map = heatmap(v, &patterns.probes[a.image], probe_chw(&net)).map_err(failed)?;
    let stem = PathBuf::from(&a.out);
    write_heatmap(&map, &stem).map_err(failed)
}
