//! Bias-level sweep and failure-mode comparison grids.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    accuracy_decrease_from_predictions, entropy_baseline, inject_bias, predict_all, synth_dataset, synth_from_stream,
    BenchError, BiasSpec, SynthSpec,
};
use crate::diagnosis::{diagnose, failure_mode_candidate, inference_patterns, kl_pair, DiagnosisConfig, DiagnosisError};
use crate::groundtruth::{
    discretize_gaussian, fit_label_gaussians, fit_label_gaussians_pooled, FitMode, LabelGaussian, RelationGraph,
};
use crate::net::{LossSpec, Network, NetworkConfig, TrainConfig, TrainLog};
use crate::relation::{filter_pair_samples, mine_pair, AnnotationTable, PairDistribution};
use crate::rng;
use crate::tensor::Tensor;

/// Label every pair carries in the synthetic relation graphs.
pub const NOT_RELATED: &str = "not_related";

/// Builds and trains the standard network on a dataset.
pub fn train_standard(
    images: &[Tensor],
    table: &AnnotationTable,
    cfg: &TrainConfig,
) -> Result<(Network, TrainLog), BenchError> {
    let shape = images
        .first()
        .ok_or_else(|| BenchError::InvalidSpec("empty training set".into()))?
        .shape()
        .to_vec();
    let [c, h, w] = shape[..] else {
        return Err(BenchError::InvalidSpec("images must be CxHxW".into()));
    };
    let config = NetworkConfig::standard(c, h, w, table.attribute_count());
    let init = Network::random(config, &mut rng::stream(cfg.seed, rng::INIT), cfg.init_scale)?;
    Ok(init.train(images, &table.targets(), &LossSpec::logistic(table.attribute_count()), cfg)?)
}

/// Every unordered pair `(i, j)`, `i < j`, labeled not-related.
pub fn all_pairs_graph(names: &[String]) -> RelationGraph {
    let mut g = RelationGraph::new(names.to_vec());
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            g.add_edge(i, j, NOT_RELATED).expect("distinct new pairs");
        }
    }
    g
}

/// Where the ground-truth `P` of the bias sweep comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Fitted on the same seed's unbiased (`tau = 0`) network.
    Control,
    Fixed { mu: f64, sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Experiment2Config {
    /// Dataset template; `seed` is replaced per grid seed.
    pub synth: SynthSpec,
    pub pair: (usize, usize),
    pub taus: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Training settings; `seed` is replaced per grid seed.
    pub train: TrainConfig,
    pub diagnosis: DiagnosisConfig,
    pub reference: ReferenceMode,
}

impl Default for Experiment2Config {
    fn default() -> Self {
        Self {
            synth: SynthSpec::disjoint(2, 400, 0),
            pair: (0, 1),
            taus: vec![0.0, 0.5, 1.0],
            seeds: (1..=5).collect(),
            train: TrainConfig::default(),
            diagnosis: DiagnosisConfig::default(),
            reference: ReferenceMode::Control,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment2Row {
    pub pair: (usize, usize),
    pub tau: f64,
    pub seed: u64,
    pub kl: f64,
    pub mean_cosine: f64,
    pub train_samples: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauSummary {
    pub tau: f64,
    pub mean_kl: f64,
    /// Sample standard deviation across seeds.
    pub std_kl: f64,
    pub mean_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment2Result {
    pub config: Experiment2Config,
    pub references: Vec<(u64, LabelGaussian)>,
    /// Ordered by tau, then seed, as listed in the config.
    pub rows: Vec<Experiment2Row>,
    pub summary: Vec<TauSummary>,
    /// Spearman correlation between tau and mean KL over seeds.
    pub spearman_mean: f64,
    /// Spearman correlation over every (tau, KL) row.
    pub spearman_rows: f64,
}

impl Experiment2Result {
    pub fn summary_at(&self, tau: f64) -> Option<&TauSummary> {
        self.summary.iter().find(|s| s.tau == tau)
    }

    /// `pair,tau,seed,kl` plus diagnostics.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["pair", "tau", "seed", "kl", "mean_cosine", "train_samples", "final_loss"])?;
        for r in &self.rows {
            w.write_record([
                format!("{}-{}", r.pair.0, r.pair.1),
                r.tau.to_string(),
                r.seed.to_string(),
                format!("{:.9}", r.kl),
                format!("{:.9}", r.mean_cosine),
                r.train_samples.to_string(),
                format!("{:.9}", r.final_loss),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct CellOutcome {
    q: PairDistribution,
    train_samples: usize,
    final_loss: f64,
}

/// Bias, train and mine one grid cell.
fn sweep_cell(
    images: &[Tensor],
    table: &AnnotationTable,
    cfg: &Experiment2Config,
    tau: f64,
    seed: u64,
) -> Result<CellOutcome, BenchError> {
    let (i, j) = cfg.pair;
    let biased = inject_bias(images, table, &BiasSpec { pair: cfg.pair, tau, seed })?;
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let (net, log) = train_standard(&biased.images, &biased.table, &train)?;
    let net = match cfg.diagnosis.probe_layer {
        Some(k) => net.with_probe_layer(k)?,
        None => net,
    };
    let patterns = inference_patterns(&net, &biased.images, &[i, j], &cfg.diagnosis.mask)?;
    let subset = filter_pair_samples(&biased.table, i, j)?;
    let (vi, vj) = (patterns.vectors[i].as_ref(), patterns.vectors[j].as_ref());
    let q = mine_pair(cfg.pair, vi.expect("mined"), vj.expect("mined"), &subset, cfg.diagnosis.bins)?;
    Ok(CellOutcome {
        q,
        train_samples: biased.table.len(),
        final_loss: log.final_loss,
    })
}

fn fit_reference(q: &PairDistribution, cfg: &Experiment2Config) -> Result<LabelGaussian, BenchError> {
    let mut g = RelationGraph::new(cfg.synth.attribute_names.clone());
    g.add_edge(cfg.pair.0, cfg.pair.1, NOT_RELATED).map_err(DiagnosisError::from)?;
    let key = (cfg.pair.0.min(cfg.pair.1), cfg.pair.0.max(cfg.pair.1));
    let sigma_min = cfg.diagnosis.sigma_min;
    let fit = match cfg.diagnosis.fit_mode {
        FitMode::PairMeans => fit_label_gaussians(&g, &HashMap::from([(key, q.mean_cosine)]), sigma_min),
        FitMode::Pooled => fit_label_gaussians_pooled(&g, &HashMap::from([(key, q.cosines.clone())]), sigma_min),
    };
    Ok(fit.map_err(DiagnosisError::from)?.remove(0))
}

/// Average ranks, ties sharing the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut end = k;
        while end + 1 < idx.len() && v[idx[end + 1]] == v[idx[k]] {
            end += 1;
        }
        let avg = (k + end) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=end] {
            r[i] = avg;
        }
        k = end + 1;
    }
    r
}

/// Pearson correlation of ranks; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 {
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, s)
}

/// For every seed: synthesize, then for every tau bias, train, mine the pair
/// and measure its KL against the reference. Cells run in parallel.
pub fn run_experiment2(cfg: &Experiment2Config) -> Result<Experiment2Result, BenchError> {
    if cfg.taus.is_empty() || cfg.seeds.is_empty() {
        return Err(BenchError::InvalidSpec("need at least one tau and one seed".into()));
    }
    let datasets = cfg
        .seeds
        .par_iter()
        .map(|&seed| synth_dataset(&SynthSpec { seed, ..cfg.synth.clone() }))
        .collect::<Result<Vec<_>, _>>()?;
    let mut taus = cfg.taus.clone();
    if cfg.reference == ReferenceMode::Control && !taus.contains(&0.0) {
        taus.push(0.0);
    }
    let cells: Vec<(usize, f64)> = (0..cfg.seeds.len()).flat_map(|s| taus.iter().map(move |&t| (s, t))).collect();
    let outcomes = cells
        .par_iter()
        .map(|&(s, tau)| {
            let (images, table) = &datasets[s];
            sweep_cell(images, table, cfg, tau, cfg.seeds[s])
        })
        .collect::<Result<Vec<_>, _>>()?;
    let outcome = |s: usize, tau: f64| {
        let k = cells.iter().position(|&c| c == (s, tau)).expect("cell exists");
        &outcomes[k]
    };

    let mut references = Vec::new();
    for (s, &seed) in cfg.seeds.iter().enumerate() {
        let g = match cfg.reference {
            ReferenceMode::Control => fit_reference(&outcome(s, 0.0).q, cfg)?,
            ReferenceMode::Fixed { mu, sigma } => LabelGaussian {
                label: NOT_RELATED.into(),
                mu,
                sigma,
                member_pair_count: 0,
            },
        };
        references.push((seed, g));
    }

    let mut rows = Vec::new();
    for &tau in &cfg.taus {
        for (s, &seed) in cfg.seeds.iter().enumerate() {
            let o = outcome(s, tau);
            let p = discretize_gaussian(&references[s].1, cfg.diagnosis.bins).map_err(DiagnosisError::from)?;
            rows.push(Experiment2Row {
                pair: cfg.pair,
                tau,
                seed,
                kl: kl_pair(&p, &o.q, cfg.diagnosis.smoothing)?,
                mean_cosine: o.q.mean_cosine,
                train_samples: o.train_samples,
                final_loss: o.final_loss,
            });
        }
    }

    let summary: Vec<TauSummary> = cfg
        .taus
        .iter()
        .map(|&tau| {
            let at: Vec<&Experiment2Row> = rows.iter().filter(|r| r.tau == tau).collect();
            let (mean_kl, std_kl) = mean_std(&at.iter().map(|r| r.kl).collect::<Vec<_>>());
            let mean_cosine = at.iter().map(|r| r.mean_cosine).sum::<f64>() / at.len() as f64;
            TauSummary {
                tau,
                mean_kl,
                std_kl,
                mean_cosine,
            }
        })
        .collect();
    let spearman_mean = spearman(
        &summary.iter().map(|s| s.tau).collect::<Vec<_>>(),
        &summary.iter().map(|s| s.mean_kl).collect::<Vec<_>>(),
    );
    let spearman_rows = spearman(
        &rows.iter().map(|r| r.tau).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.kl).collect::<Vec<_>>(),
    );
    Ok(Experiment2Result {
        config: cfg.clone(),
        references,
        rows,
        summary,
        spearman_mean,
        spearman_rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Experiment3Config {
    /// Training-set template; `seed` is replaced per grid seed.
    pub synth: SynthSpec,
    /// Size of the unbiased held-out set drawn from the `test` stream.
    pub test_samples: usize,
    pub biased_pair: (usize, usize),
    pub tau: f64,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub diagnosis: DiagnosisConfig,
    pub top_n: usize,
}

impl Default for Experiment3Config {
    fn default() -> Self {
        Self {
            synth: SynthSpec::disjoint(4, 400, 0),
            test_samples: 800,
            biased_pair: (0, 1),
            tau: 1.0,
            seeds: (1..=5).collect(),
            train: TrainConfig::default(),
            diagnosis: DiagnosisConfig::default(),
            top_n: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ours,
    Entropy,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Entropy => "entropy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment3Row {
    pub method: Method,
    pub seed: u64,
    pub rank: usize,
    pub pair: (usize, usize),
    pub a: i8,
    pub b: i8,
    /// Training samples in the mode's cell; zero means the combination was
    /// never seen during training.
    pub support: usize,
    /// KL for ours, entropy for the baseline.
    pub score: f64,
    pub acc_ordinary: f64,
    pub acc_mode: f64,
    pub decrease: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment3Result {
    pub config: Experiment3Config,
    pub rows: Vec<Experiment3Row>,
    pub mean_decrease_ours: f64,
    pub mean_decrease_entropy: f64,
}

impl Experiment3Result {
    /// `method,rank,mode,acc_ordinary,acc_mode,decrease` plus seed and support.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["method", "seed", "rank", "mode", "support", "score", "acc_ordinary", "acc_mode", "decrease"])?;
        let names = &self.config.synth.attribute_names;
        for r in &self.rows {
            w.write_record([
                r.method.name().to_string(),
                r.seed.to_string(),
                r.rank.to_string(),
                format!("{}{:+} {}{:+}", names[r.pair.0], r.a, names[r.pair.1], r.b),
                r.support.to_string(),
                format!("{:.9}", r.score),
                format!("{:.9}", r.acc_ordinary),
                format!("{:.9}", r.acc_mode),
                format!("{:.9}", r.decrease),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn experiment3_seed(cfg: &Experiment3Config, seed: u64) -> Result<Vec<Experiment3Row>, BenchError> {
    let spec = SynthSpec { seed, ..cfg.synth.clone() };
    let (images, table) = synth_dataset(&spec)?;
    let (test_images, test_table) = synth_from_stream(
        &SynthSpec {
            samples: cfg.test_samples,
            ..spec.clone()
        },
        rng::TEST,
    )?;
    let biased = inject_bias(
        &images,
        &table,
        &BiasSpec {
            pair: cfg.biased_pair,
            tau: cfg.tau,
            seed,
        },
    )?;
    let (net, _) = train_standard(&biased.images, &biased.table, &TrainConfig { seed, ..cfg.train.clone() })?;
    let graph = all_pairs_graph(&spec.attribute_names);
    let report = diagnose(&net, &biased.images, &biased.table, &graph, &cfg.diagnosis)?.report;
    let preds = predict_all(&net, &test_images)?;

    let mut rows = Vec::new();
    for (rank, p) in report.pairs.iter().take(cfg.top_n).enumerate() {
        let (i, j) = p.pair;
        let sign = if p.mean_cosine >= 0.0 { 1 } else { -1 };
        let m = failure_mode_candidate(&biased.table, i, j, sign);
        let e = accuracy_decrease_from_predictions(&preds, &test_table, (i, m.a), (j, m.b))?;
        rows.push(Experiment3Row {
            method: Method::Ours,
            seed,
            rank: rank + 1,
            pair: p.pair,
            a: m.a,
            b: m.b,
            support: m.support,
            score: p.kl,
            acc_ordinary: e.acc_ordinary,
            acc_mode: e.acc_mode,
            decrease: e.decrease,
        });
    }
    let pairs: Vec<(usize, usize)> = graph.edges.iter().map(|e| (e.i, e.j)).collect();
    for (rank, m) in entropy_baseline(&biased.table, &pairs, cfg.top_n).iter().enumerate() {
        let (i, j) = m.pair;
        let e = accuracy_decrease_from_predictions(&preds, &test_table, (i, m.a), (j, m.b))?;
        rows.push(Experiment3Row {
            method: Method::Entropy,
            seed,
            rank: rank + 1,
            pair: m.pair,
            a: m.a,
            b: m.b,
            support: m.counts.get(m.a, m.b),
            score: m.entropy,
            acc_ordinary: e.acc_ordinary,
            acc_mode: e.acc_mode,
            decrease: e.decrease,
        });
    }
    Ok(rows)
}

/// Trains on a set where one pair always co-occurs, then compares the
/// accuracy drop on the top failure modes proposed by the KL diagnosis
/// against those proposed by the entropy baseline, on unbiased test data.
pub fn run_experiment3(cfg: &Experiment3Config) -> Result<Experiment3Result, BenchError> {
    if cfg.seeds.is_empty() {
        return Err(BenchError::InvalidSpec("need at least one seed".into()));
    }
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| experiment3_seed(cfg, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<Experiment3Row> = per_seed.into_iter().flatten().collect();
    let mean = |m: Method| {
        let d: Vec<f64> = rows.iter().filter(|r| r.method == m).map(|r| r.decrease).collect();
        if d.is_empty() {
            0.0
        } else {
            d.iter().sum::<f64>() / d.len() as f64
        }
    };
    Ok(Experiment3Result {
        config: cfg.clone(),
        mean_decrease_ours: mean(Method::Ours),
        mean_decrease_entropy: mean(Method::Entropy),
        rows,
    })
}
