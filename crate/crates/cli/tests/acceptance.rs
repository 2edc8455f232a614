//! Acceptance gate. Prints one line per criterion and exits non-zero if any fails.
//!
//! Run with `cargo test -p biasprobe-cli --test acceptance`.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use biasprobe::attribution::{fidelity_loss, greedy_mask, local_surrogate, LocalSurrogate, MaskConfig, Penalty};
use biasprobe::bench::{
    inject_bias, run_experiment2, run_experiment3, synth_dataset, BiasSpec, Experiment2Config, Experiment3Config,
    SynthSpec,
};
use biasprobe::diagnosis::{classify_pair, kl_pair, Classification, Thresholds};
use biasprobe::groundtruth::{fit_label_gaussians, RelationGraph};
use biasprobe::net::{ActivationTrace, LayerSpec, Network, NetworkConfig};
use biasprobe::relation::{mine_pair, AnnotationTable, PairDistribution};
use biasprobe::rng::{self, StreamRng};
use biasprobe::tensor::Tensor;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("probe gradient matches finite differences", gradient_oracle),
        ("local linear surrogate reproduces the score", local_linearity),
        ("kl_pair agrees with a brute-force KL", kl_oracle),
        ("greedy mask limits", greedy_limits),
        ("classification rule table", classification_table),
        ("bias-level sweep trend", experiment2_trend),
        ("failure modes beat the entropy baseline", experiment3_direction),
        ("diagnose is deterministic", determinism),
        ("invariance properties", invariance_suite),
    ];
    let mut failures = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name} ({detail}; {secs:.1}s)", k + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {}: FAIL {name} ({detail}; {secs:.1}s)", k + 1);
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_tensor(shape: &[usize], r: &mut StreamRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn tiny_config(channels: usize, side: usize, mid: usize, hidden: usize, attrs: usize) -> NetworkConfig {
    let conv_side = side - 2;
    let flat_side = conv_side - 2;
    NetworkConfig {
        input_shape: vec![channels, side, side],
        layers: vec![
            LayerSpec::Conv { kernel: 3, in_channels: channels, out_channels: mid, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::Conv { kernel: 3, in_channels: mid, out_channels: 3, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::FullyConnected { inputs: 3 * flat_side * flat_side, outputs: hidden },
            LayerSpec::Relu,
            LayerSpec::FullyConnected { inputs: hidden, outputs: attrs },
        ],
        attribute_count: attrs,
        probe_layer: 0,
    }
}

/// Smallest pre-activation magnitude feeding any ReLU.
fn kink_distance(net: &Network, trace: &ActivationTrace) -> f64 {
    let layers = &net.config().layers;
    (1..layers.len())
        .filter(|&k| matches!(layers[k], LayerSpec::Relu))
        .flat_map(|k| trace.outputs[k - 1].data().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

fn relu_pattern(net: &Network, trace: &ActivationTrace) -> Vec<bool> {
    let layers = &net.config().layers;
    (1..layers.len())
        .filter(|&k| matches!(layers[k], LayerSpec::Relu))
        .flat_map(|k| trace.outputs[k - 1].data().iter().map(|&v| v > 0.0))
        .collect()
}

fn gradient_oracle() -> Outcome {
    let eps = 1e-5;
    let start = Instant::now();
    let mut checked = 0;
    let mut nonzero = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..24u64 {
        let mut r = rng::stream(seed, "acceptance-grad");
        let channels = r.random_range(1..=2);
        let side = r.random_range(5..=7);
        let cfg = tiny_config(channels, side, r.random_range(2..=4), r.random_range(3..=6), r.random_range(1..=3));
        let net = Network::random(cfg, &mut rng::stream(seed, rng::INIT), 1.5).map_err(|e| e.to_string())?;
        // draw images until no ReLU input sits near its kink
        let trace = loop {
            let t = net.forward(&random_tensor(&[channels, side, side], &mut r)).map_err(|e| e.to_string())?;
            if kink_distance(&net, &t) >= 1e-4 {
                break t;
            }
        };
        let probe = net.probe_layer();
        let x = &trace.outputs[probe];
        for attr in 0..net.attribute_count() {
            let analytic = net.grad_at_probe(&trace, attr).map_err(|e| e.to_string())?;
            for u in 0..x.len() {
                let shifted = |d: f64| {
                    let mut v = x.data().to_vec();
                    v[u] += d;
                    let t = Tensor::new(x.shape().to_vec(), v).unwrap();
                    net.scores_from(probe, &t).unwrap().data()[attr]
                };
                let numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
                let a = analytic.data()[u];
                let err = (a - numeric).abs();
                let tol = (1e-4 * a.abs().max(numeric.abs())).max(1e-7);
                ensure(err <= tol, || format!("net {seed} attr {attr} unit {u}: analytic {a} vs numeric {numeric}"))?;
                worst = worst.max(err / tol);
                checked += 1;
                nonzero += usize::from(a != 0.0);
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    ensure(nonzero * 4 >= checked, || format!("only {nonzero} of {checked} gradients are nonzero"))?;
    Ok(format!("24 nets, {checked} coordinates ({nonzero} nonzero), worst error {worst:.1e} of tolerance"))
}

fn local_linearity() -> Outcome {
    let spec = SynthSpec::disjoint(4, 100, 11);
    let (images, _) = synth_dataset(&spec).map_err(|e| e.to_string())?;
    let cfg = NetworkConfig::standard(spec.channels, spec.height, spec.width, 4);
    let net = Network::random(cfg, &mut rng::stream(11, rng::INIT), 1.0).map_err(|e| e.to_string())?;
    let mut r = rng::stream(11, "acceptance-linearity");
    let mut worst: f64 = 0.0;
    let mut perturbed = 0;
    for img in &images {
        let trace = net.forward(img).map_err(|e| e.to_string())?;
        let x = &trace.outputs[net.probe_layer()];
        let surrogates: Vec<LocalSurrogate> = (0..4)
            .map(|a| local_surrogate(&net, &trace, a))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        for (a, s) in surrogates.iter().enumerate() {
            let err = (s.reconstruct(x).unwrap() - trace.score(a)).abs();
            worst = worst.max(err);
            ensure(err <= 1e-10, || format!("attribute {a}: reconstruction off by {err:e}"))?;
        }
        // a nearby image in the same activation region obeys the same surrogate
        let delta = random_tensor(img.shape(), &mut r).scale(1e-7).unwrap();
        let moved: Vec<f64> = img.data().iter().zip(delta.data()).map(|(a, b)| a + b).collect();
        let moved = net.forward(&Tensor::new(img.shape().to_vec(), moved).unwrap()).map_err(|e| e.to_string())?;
        if relu_pattern(&net, &moved) == relu_pattern(&net, &trace) {
            perturbed += 1;
            let x2 = &moved.outputs[net.probe_layer()];
            for (a, s) in surrogates.iter().enumerate() {
                let err = (s.reconstruct(x2).unwrap() - moved.score(a)).abs();
                worst = worst.max(err);
                ensure(err <= 1e-10, || format!("perturbed attribute {a}: off by {err:e}"))?;
            }
        }
    }
    ensure(perturbed >= 50, || format!("only {perturbed} perturbations stayed in their region"))?;
    Ok(format!("100 images x 4 attributes, {perturbed} in-region perturbations, worst {worst:.1e}"))
}

fn distribution(counts: Vec<u64>) -> PairDistribution {
    PairDistribution {
        pair: (0, 1),
        sample_count: counts.iter().sum::<u64>() as usize,
        counts,
        mean_cosine: 0.0,
        skipped_count: 0,
        cosines: Vec::new(),
    }
}

/// Direct transcription of the discrete KL with additive smoothing.
fn brute_kl(p: &[f64], counts: &[u64], eps: f64) -> f64 {
    let total: f64 = counts.iter().map(|&c| c as f64).sum::<f64>() + eps * counts.len() as f64;
    let mut kl = 0.0;
    for (b, &pb) in p.iter().enumerate() {
        if pb > 0.0 {
            let qb = (counts[b] as f64 + eps) / total;
            kl += pb * (pb / qb).ln();
        }
    }
    kl.max(0.0)
}

fn kl_oracle() -> Outcome {
    let mut r = rng::stream(3, "acceptance-kl");
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let bins = r.random_range(2..=64);
        let mut p: Vec<f64> = (0..bins).map(|_| if r.random_bool(0.2) { 0.0 } else { r.random_range(0.0..1.0) }).collect();
        if p.iter().all(|&v| v == 0.0) {
            p[0] = 1.0;
        }
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        let mut counts: Vec<u64> = (0..bins).map(|_| if r.random_bool(0.3) { 0 } else { r.random_range(0..200) }).collect();
        counts[r.random_range(0..bins)] += 1;
        let eps = r.random_range(0.01..2.0);
        let got = kl_pair(&p, &distribution(counts.clone()), eps).map_err(|e| e.to_string())?;
        let want = brute_kl(&p, &counts, eps);
        let err = (got - want).abs();
        worst = worst.max(err);
        ensure(err <= 1e-12, || format!("case {case}: {got} vs {want}"))?;
    }
    // counts exactly proportional to P
    let counts: Vec<u64> = vec![10, 0, 30, 20, 40];
    let p: Vec<f64> = counts.iter().map(|&c| c as f64 / 100.0).collect();
    let self_kl = kl_pair(&p, &distribution(counts), 1e-12).map_err(|e| e.to_string())?;
    ensure(self_kl.abs() <= 1e-9, || format!("kl(P, P) = {self_kl:e}"))?;
    let uniform = vec![0.25; 4];
    let exact = kl_pair(&uniform, &distribution(vec![7; 4]), 0.5).map_err(|e| e.to_string())?;
    ensure(exact == 0.0, || format!("uniform kl(P, P) = {exact:e}"))?;
    Ok(format!("50 triples, worst {worst:.1e}; kl(P,P) = {self_kl:.1e}"))
}

fn greedy_limits() -> Outcome {
    // 1 x 4 x 4 images through a 2-channel 3x3 conv give 8 probe units
    let cfg = NetworkConfig {
        input_shape: vec![1, 4, 4],
        layers: vec![
            LayerSpec::Conv { kernel: 3, in_channels: 1, out_channels: 2, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::FullyConnected { inputs: 8, outputs: 5 },
            LayerSpec::Relu,
            LayerSpec::FullyConnected { inputs: 5, outputs: 2 },
        ],
        attribute_count: 2,
        probe_layer: 0,
    };
    let mut log = Vec::new();
    for seed in 0..5u64 {
        let net = Network::random(cfg.clone(), &mut rng::stream(seed, rng::INIT), 1.5).map_err(|e| e.to_string())?;
        let mut r = rng::stream(seed, "acceptance-greedy");
        let traces: Vec<ActivationTrace> = (0..30).map(|_| net.forward(&random_tensor(&[1, 4, 4], &mut r)).unwrap()).collect();
        let probes: Vec<Tensor> = traces.iter().map(|t| t.outputs[0].clone()).collect();
        let surrogates: Vec<LocalSurrogate> = traces.iter().map(|t| local_surrogate(&net, t, 0).unwrap()).collect();
        let units = probes[0].len();
        let objective = |rho: &[f64], lambda: f64| {
            let rho = Tensor::new(probes[0].shape().to_vec(), rho.to_vec()).unwrap();
            fidelity_loss(&rho, &surrogates, &probes).unwrap() + lambda * rho.data().iter().sum::<f64>()
        };
        let run = |penalty| greedy_mask(&surrogates, &probes, &MaskConfig { penalty, max_units: None }).map_err(|e| e.to_string());

        let full = run(Penalty::Absolute(0.0))?;
        ensure(full.fidelity <= 1e-20, || format!("seed {seed}: lambda 0 leaves fidelity {:e}", full.fidelity))?;

        let empty_fid = objective(&vec![0.0; units], 0.0);
        let best_single_gain = (0..units)
            .map(|u| {
                let mut rho = vec![0.0; units];
                rho[u] = 1.0;
                empty_fid - objective(&rho, 0.0)
            })
            .fold(0.0, f64::max);
        let none = run(Penalty::Absolute(best_single_gain * 1.01 + 1e-12))?;
        ensure(none.selected.is_empty(), || format!("seed {seed}: large lambda kept {:?}", none.selected))?;

        let mask = run(Penalty::Relative(0.5))?;
        ensure(mask.objective_trace.windows(2).all(|w| w[1] < w[0]), || {
            format!("seed {seed}: trace not strictly decreasing {:?}", mask.objective_trace)
        })?;
        let lambda = mask.lambda;
        let greedy = objective(mask.rho.data(), lambda);
        ensure(greedy <= empty_fid + 1e-12, || format!("seed {seed}: greedy {greedy} above empty {empty_fid}"))?;
        let mut best = f64::INFINITY;
        for bits in 0u32..(1 << units) {
            let rho: Vec<f64> = (0..units).map(|u| f64::from((bits >> u) & 1)).collect();
            let obj = objective(&rho, lambda);
            if bits.count_ones() == 1 {
                ensure(greedy <= obj + 1e-12, || format!("seed {seed}: greedy {greedy} above single-unit {obj}"))?;
            }
            best = best.min(obj);
        }
        log.push(format!("seed {seed} greedy {greedy:.4e} exhaustive {best:.4e} |rho| {}", mask.selected.len()));
    }
    for line in &log {
        eprintln!("  greedy vs exhaustive: {line}");
    }
    Ok("lambda 0 exact, large lambda empty, traces decreasing, exhaustive comparison logged for 5 masks of 8 units".into())
}

fn classification_table() -> Outcome {
    use Classification::*;
    let t = Thresholds::default();
    let gate = 1.0;
    let high = 2.0;
    ensure((0.5f64 - 0.3).abs() == t.deviation, || "0.5 - 0.3 must land exactly on the threshold".into())?;
    let grid: [(f64, f64, f64, Classification); 12] = [
        (0.05, 0.5, high, BlindSpot),
        (-0.1, 0.5, high, BlindSpot),
        (0.0, -0.25, high, BlindSpot),
        (0.6, 0.0, high, FailureMode),
        (-0.6, 0.3, high, FailureMode),
        (0.6, 0.0, gate, FailureMode),
        (0.5, 0.55, high, WellLearned),
        (0.05, 0.5, 0.5, WellLearned),
        (0.2, 0.6, high, WellLearned),
        (-0.2, 0.6, high, WellLearned),
        (0.0, 0.2, high, WellLearned),
        (0.5, 0.3, high, WellLearned),
    ];
    for (e, mu, kl, want) in grid {
        let got = classify_pair(e, mu, kl, gate, &t);
        ensure(got == want, || format!("e={e} mu={mu} kl={kl}: {got:?}, expected {want:?}"))?;
    }
    Ok("12 cases".into())
}

fn experiment2_trend() -> Outcome {
    let start = Instant::now();
    let cfg = Experiment2Config::default();
    ensure(cfg.seeds.len() >= 5 && cfg.synth.attribute_count() == 2, || "defaults below the required scale".into())?;
    let res = run_experiment2(&cfg).map_err(|e| e.to_string())?;
    let means: Vec<f64> = res.summary.iter().map(|s| s.mean_kl).collect();
    ensure(means.windows(2).all(|w| w[1] >= w[0]), || format!("mean KL not monotone: {means:?}"))?;
    ensure(res.spearman_mean > 0.0 && res.spearman_rows > 0.0, || {
        format!("spearman {} / {}", res.spearman_mean, res.spearman_rows)
    })?;
    let lo = res.summary_at(0.0).ok_or("tau 0 missing")?;
    let hi = res.summary_at(1.0).ok_or("tau 1 missing")?;
    let gap = hi.mean_kl - lo.mean_kl;
    ensure(gap >= 3.0 * lo.std_kl, || format!("gap {gap:.3} below 3 sd {:.3}", 3.0 * lo.std_kl))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(600), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "mean KL {means:.3?}, spearman {:.2}/{:.2}, gap {gap:.3} vs 3 sd {:.3}",
        res.spearman_mean,
        res.spearman_rows,
        3.0 * lo.std_kl
    ))
}

fn experiment3_direction() -> Outcome {
    let cfg = Experiment3Config::default();
    ensure(cfg.seeds.len() >= 5 && cfg.top_n == 3 && cfg.tau == 1.0, || "defaults below the required scale".into())?;
    let res = run_experiment3(&cfg).map_err(|e| e.to_string())?;
    ensure(res.mean_decrease_ours >= res.mean_decrease_entropy, || {
        format!("ours {:.4} < entropy {:.4}", res.mean_decrease_ours, res.mean_decrease_entropy)
    })?;
    Ok(format!("ours {:.4} vs entropy {:.4}", res.mean_decrease_ours, res.mean_decrease_entropy))
}

fn cli(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_biasprobe"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SOURCE_DATE_EPOCH")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

/// Every file under `dir` with report timestamps blanked.
fn snapshot(dir: &Path) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let mut bytes = std::fs::read(&path)?;
            if path.extension().is_some_and(|e| e == "json") {
                let text = String::from_utf8_lossy(&bytes).into_owned();
                bytes = text
                    .lines()
                    .filter(|l| !l.trim_start().starts_with("\"timestamp\":"))
                    .collect::<Vec<_>>()
                    .join("\n")
                    .into_bytes();
            }
            files.push((path.strip_prefix(dir).unwrap().display().to_string(), bytes));
        }
    }
    files.sort();
    Ok(files)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = tmp.path();
    std::fs::create_dir(p.join("data")).map_err(|e| e.to_string())?;
    std::fs::create_dir(p.join("out")).map_err(|e| e.to_string())?;
    cli(&["synth", "--out", "data", "--samples", "120", "--seed", "5"], p)?;
    cli(&["train", "--data", "data", "--out", "model.bltn", "--epochs", "3", "--seed", "5"], p)?;
    let diagnose = ["diagnose", "--model", "model.bltn", "--data", "data", "--relations", "data/relations.csv", "--out", "out", "--heatmaps", "2"];
    cli(&diagnose, p)?;
    let first = snapshot(&p.join("out")).map_err(|e| e.to_string())?;
    std::thread::sleep(Duration::from_millis(1100));
    cli(&diagnose, p)?;
    let second = snapshot(&p.join("out")).map_err(|e| e.to_string())?;
    ensure(first.len() == second.len(), || "file sets differ".into())?;
    for ((n1, b1), (n2, b2)) in first.iter().zip(&second) {
        ensure(n1 == n2 && b1 == b2, || format!("{n1} differs between runs"))?;
    }
    ensure(first.iter().any(|(n, _)| n == "report.json"), || "no report written".into())?;
    Ok(format!("{} files identical across runs", first.len()))
}

fn runner() -> TestRunner {
    TestRunner::new(Config { cases: 256, failure_persistence: None, ..Config::default() })
}

fn vectors(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, d), n)
}

fn tensors(rows: &[Vec<f64>]) -> Vec<Tensor> {
    rows.iter().map(|r| Tensor::vector(r.clone()).unwrap()).collect()
}

fn invariance_suite() -> Outcome {
    let mut report = Vec::new();

    let cases = (2usize..40, 1usize..12).prop_flat_map(|(n, d)| {
        (vectors(n, d), vectors(n, d), proptest::collection::vec((0.001f64..1000.0, -20i32..20), n))
    });
    runner()
        .run(&cases, |(a, b, scales)| {
            let subset: Vec<usize> = (0..a.len()).collect();
            let base = mine_pair((0, 1), &tensors(&a), &tensors(&b), &subset, 64).unwrap();
            let scaled = |pow2: bool| {
                let s: Vec<Vec<f64>> = a
                    .iter()
                    .zip(&scales)
                    .map(|(r, &(c, e))| r.iter().map(|v| v * if pow2 { 2f64.powi(e) } else { c }).collect())
                    .collect();
                mine_pair((0, 1), &tensors(&s), &tensors(&b), &subset, 64).unwrap()
            };
            let exact = scaled(true);
            prop_assert_eq!(&exact.counts, &base.counts);
            prop_assert_eq!(exact.mean_cosine.to_bits(), base.mean_cosine.to_bits());
            let any = scaled(false);
            prop_assert_eq!(&any.counts, &base.counts);
            prop_assert!((any.mean_cosine - base.mean_cosine).abs() <= 1e-12);
            Ok(())
        })
        .map_err(|e| format!("cosine scale invariance: {e}"))?;
    report.push("scale 256");

    let cases = (2usize..60, 1usize..8).prop_flat_map(|(n, d)| {
        (vectors(n, d), vectors(n, d), Just((0..n).collect::<Vec<usize>>()).prop_shuffle())
    });
    runner()
        .run(&cases, |(a, b, perm)| {
            let (va, vb) = (tensors(&a), tensors(&b));
            let ordered: Vec<usize> = (0..a.len()).collect();
            let x = mine_pair((0, 1), &va, &vb, &ordered, 64).unwrap();
            let y = mine_pair((0, 1), &va, &vb, &perm, 64).unwrap();
            prop_assert_eq!(&x.counts, &y.counts);
            prop_assert!((x.mean_cosine - y.mean_cosine).abs() <= 1e-12);
            Ok(())
        })
        .map_err(|e| format!("histogram order independence: {e}"))?;
    report.push("order 256");

    let labels = ["related", "not_related", "opposite"];
    let cases = (3usize..8)
        .prop_flat_map(|n| {
            let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
            let m = pairs.len();
            (Just(n), Just(pairs).prop_shuffle(), proptest::collection::vec((0usize..3, -1.0f64..1.0), m))
        });
    runner()
        .run(&cases, |(n, pairs, meta)| {
            let names: Vec<String> = (0..n).map(|k| format!("a{k}")).collect();
            let build = |order: &[usize]| {
                let mut g = RelationGraph::new(names.clone());
                let mut means = HashMap::new();
                for &k in order {
                    let (i, j) = pairs[k];
                    g.add_edge(i, j, labels[meta[k].0]).unwrap();
                    means.insert((i, j), meta[k].1);
                }
                fit_label_gaussians(&g, &means, 0.05).unwrap()
            };
            let forward: Vec<usize> = (0..pairs.len()).collect();
            let backward: Vec<usize> = forward.iter().rev().copied().collect();
            let (x, y) = (build(&forward), build(&backward));
            prop_assert_eq!(x.len(), y.len());
            for (g, h) in x.iter().zip(&y) {
                prop_assert_eq!(&g.label, &h.label);
                prop_assert_eq!(g.member_pair_count, h.member_pair_count);
                prop_assert!((g.mu - h.mu).abs() <= 1e-12 && (g.sigma - h.sigma).abs() <= 1e-12);
            }
            Ok(())
        })
        .map_err(|e| format!("fit permutation invariance: {e}"))?;
    report.push("fit 256");

    let sign = || prop_oneof![Just(1i8), Just(-1i8)];
    let cases = (proptest::collection::vec((sign(), sign()), 1..300), 0.0f64..=1.0, any::<u64>());
    runner()
        .run(&cases, |(rows, tau, seed)| {
            let images: Vec<Tensor> = (0..rows.len()).map(|k| Tensor::vector(vec![k as f64]).unwrap()).collect();
            let table = AnnotationTable::from_signs(
                (0..rows.len()).map(|k| format!("s{k}")).collect(),
                vec!["u".into(), "v".into()],
                rows.iter().map(|&(a, b)| vec![a, b]).collect(),
            )
            .unwrap();
            let out = inject_bias(&images, &table, &BiasSpec { pair: (0, 1), tau, seed }).unwrap();
            let opposite = rows.iter().filter(|(a, b)| a != b).count();
            let expected = (tau * opposite as f64 + 0.5).floor() as usize;
            prop_assert_eq!(out.removed.len(), expected);
            prop_assert_eq!(out.table.len(), rows.len() - expected);
            let kept: Vec<&String> = out.table.sample_ids.iter().collect();
            for (k, (a, b)) in rows.iter().enumerate() {
                let id = format!("s{k}");
                if a == b {
                    prop_assert!(kept.contains(&&id), "{} was removed", id);
                }
            }
            Ok(())
        })
        .map_err(|e| format!("inject_bias counts: {e}"))?;
    report.push("bias 256");

    Ok(format!("cases per property: {}", report.join(", ")))
}
