//! KL divergence between ground truth `P` and mined `Q`, pair classification,
//! failure-mode extraction and the end-to-end diagnosis pipeline.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{greedy_mask, inference_vector, local_surrogate, AttributionError, MaskConfig, PatternMask};
use crate::groundtruth::{
    discretize_gaussian, fit_label_gaussians, fit_label_gaussians_pooled, FitMode, GroundTruthError, LabelGaussian,
    RelationGraph, DEFAULT_SIGMA_MIN,
};
use crate::net::{NetError, Network};
use crate::relation::{filter_pair_samples, mine_pair, AnnotationTable, PairDistribution, RelationError, DEFAULT_BINS};
use crate::tensor::Tensor;

pub const DEFAULT_SMOOTHING: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DiagnosisError {
    #[error("P has {p} bins but Q has {q}")]
    BinMismatch { p: usize, q: usize },

    #[error("Q for pair ({0}, {1}) holds no samples")]
    NoSamples(usize, usize),

    #[error("attribute {0} has no labeled relationship and cannot be diagnosed")]
    IsolatedAttribute(usize),

    #[error("failure mode ({a:+}, {b:+}) has no training samples")]
    EmptyMode { a: i8, b: i8 },

    #[error("smoothing must be positive and finite, got {0}")]
    InvalidSmoothing(f64),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("attribution: {0}")]
    Attribution(#[from] AttributionError),

    #[error("relation mining: {0}")]
    Relation(#[from] RelationError),

    #[error("ground truth: {0}")]
    GroundTruth(#[from] GroundTruthError),

    #[error("network: {0}")]
    Net(#[from] NetError),
}

/// `sum_b P_b ln(P_b / Q_b)` with `Q_b = (count_b + eps) / (total + B eps)`.
pub fn kl_pair(p: &[f64], q: &PairDistribution, smoothing: f64) -> Result<f64, DiagnosisError> {
    if p.len() != q.counts.len() {
        return Err(DiagnosisError::BinMismatch {
            p: p.len(),
            q: q.counts.len(),
        });
    }
    if !(smoothing > 0.0 && smoothing.is_finite()) {
        return Err(DiagnosisError::InvalidSmoothing(smoothing));
    }
    let total: u64 = q.counts.iter().sum();
    if total == 0 {
        return Err(DiagnosisError::NoSamples(q.pair.0, q.pair.1));
    }
    let denom = total as f64 + p.len() as f64 * smoothing;
    let kl: f64 = p
        .iter()
        .zip(&q.counts)
        .filter(|(&pb, _)| pb > 0.0)
        .map(|(&pb, &c)| pb * (pb / ((c as f64 + smoothing) / denom)).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// Mean KL over the labeled edges touching `attr`.
pub fn kl_attribute(
    attr: usize,
    pair_kls: &HashMap<(usize, usize), f64>,
    graph: &RelationGraph,
) -> Result<f64, DiagnosisError> {
    let mut kls: Vec<f64> = graph
        .edges
        .iter()
        .filter(|e| e.i == attr || e.j == attr)
        .filter_map(|e| pair_kls.get(&(e.i, e.j)).copied())
        .collect();
    if kls.is_empty() {
        return Err(DiagnosisError::IsolatedAttribute(attr));
    }
    kls.sort_by(f64::total_cmp);
    Ok(kls.iter().sum::<f64>() / kls.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    WellLearned,
    BlindSpot,
    FailureMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Bound on `|E[cos]|` separating weak from strong mined relationships.
    pub cosine: f64,
    /// Bound on `|E[cos] - mu|`.
    pub deviation: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            cosine: 0.2,
            deviation: 0.2,
        }
    }
}

/// Strict-inequality rules, applied only to pairs at or above the KL gate.
pub fn classify_pair(mean_cosine: f64, mu: f64, kl: f64, kl_gate: f64, t: &Thresholds) -> Classification {
    if kl < kl_gate || (mean_cosine - mu).abs() <= t.deviation {
        return Classification::WellLearned;
    }
    let e = mean_cosine.abs();
    if e < t.cosine {
        Classification::BlindSpot
    } else if e > t.cosine {
        Classification::FailureMode
    } else {
        Classification::WellLearned
    }
}

/// Annotation cell `(Y_i* = a, Y_j* = b)` expected to break the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureMode {
    pub a: i8,
    pub b: i8,
    /// Training samples in the cell.
    pub support: usize,
}

/// The rarer of the two cells that contradict the mined sign; ties go to
/// the candidate with `A_i` positive. May return a cell with zero support.
pub fn failure_mode_candidate(table: &AnnotationTable, i: usize, j: usize, mined_sign: i8) -> FailureMode {
    let counts = table.cell_counts(i, j);
    let candidates: [(i8, i8); 2] = if mined_sign > 0 { [(1, -1), (-1, 1)] } else { [(1, 1), (-1, -1)] };
    let (a, b) = if counts.get(candidates[1].0, candidates[1].1) < counts.get(candidates[0].0, candidates[0].1) {
        candidates[1]
    } else {
        candidates[0]
    };
    FailureMode {
        a,
        b,
        support: counts.get(a, b),
    }
}

/// Like [`failure_mode_candidate`] but rejects modes never seen in training.
pub fn extract_failure_mode(
    table: &AnnotationTable,
    i: usize,
    j: usize,
    mined_sign: i8,
) -> Result<FailureMode, DiagnosisError> {
    let m = failure_mode_candidate(table, i, j, mined_sign);
    if m.support == 0 {
        return Err(DiagnosisError::EmptyMode { a: m.a, b: m.b });
    }
    Ok(m)
}

/// Linear-interpolated percentile of `values` (`q` in `[0, 100]`).
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (q.clamp(0.0, 100.0) / 100.0) * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}

/// Which pairs count as having a high KL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum KlGate {
    /// Percentile of all labeled-pair KLs in the run.
    Percentile(f64),
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosisConfig {
    /// Overrides the network's own probe layer when set.
    pub probe_layer: Option<usize>,
    pub mask: MaskConfig,
    pub bins: usize,
    pub smoothing: f64,
    pub sigma_min: f64,
    pub fit_mode: FitMode,
    pub kl_gate: KlGate,
    pub thresholds: Thresholds,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        Self {
            probe_layer: None,
            mask: MaskConfig::default(),
            bins: DEFAULT_BINS,
            smoothing: DEFAULT_SMOOTHING,
            sigma_min: DEFAULT_SIGMA_MIN,
            fit_mode: FitMode::PairMeans,
            kl_gate: KlGate::Percentile(75.0),
            thresholds: Thresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDiagnosis {
    pub pair: (usize, usize),
    pub names: (String, String),
    pub label: String,
    pub mean_cosine: f64,
    pub mu_label: f64,
    pub sigma_label: f64,
    pub kl: f64,
    pub classification: Classification,
    pub failure_mode: Option<FailureMode>,
    pub sample_count: usize,
    pub skipped_count: usize,
}

impl PairDiagnosis {
    pub fn describe(&self) -> String {
        let (a, b) = (&self.names.0, &self.names.1);
        match (self.classification, self.failure_mode) {
            (Classification::FailureMode, Some(m)) => format!(
                "failure mode: {a}{} {b}{} ({} training samples); expected {}, mined mean cosine {:.3}",
                sign_char(m.a),
                sign_char(m.b),
                m.support,
                self.label,
                self.mean_cosine
            ),
            (Classification::BlindSpot, _) => format!(
                "blind spot: {a} / {b} expected {} (mu {:.3}), mined mean cosine {:.3}",
                self.label, self.mu_label, self.mean_cosine
            ),
            _ => format!("{a} / {b}: {} (mined mean cosine {:.3})", self.label, self.mean_cosine),
        }
    }
}

fn sign_char(s: i8) -> char {
    if s > 0 {
        '+'
    } else {
        '-'
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeKl {
    pub attribute: usize,
    pub name: String,
    pub kl: f64,
    pub degree: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    /// Set by callers that want wall-clock provenance; excluded from
    /// determinism comparisons.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timestamp: Option<String>,
    /// Caller-level configuration echo.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub run_config: Option<serde_json::Value>,
    pub config: DiagnosisConfig,
    pub kl_unit: String,
    pub probe_layer: usize,
    pub kl_gate: Option<f64>,
    pub label_gaussians: Vec<LabelGaussian>,
    /// Sorted by KL descending, then pair.
    pub pairs: Vec<PairDiagnosis>,
    /// Labeled pairs with no usable samples.
    pub undiagnosable_pairs: Vec<(usize, usize)>,
    /// Sorted by KL ascending (best learned first), then index.
    pub attribute_ranking: Vec<AttributeKl>,
    pub isolated_attributes: Vec<usize>,
    pub blind_spots: Vec<(usize, usize)>,
    pub failure_modes: Vec<(usize, usize)>,
    pub mask_sizes: Vec<Option<usize>>,
}

impl DiagnosisReport {
    pub fn pair(&self, i: usize, j: usize) -> Option<&PairDiagnosis> {
        let key = (i.min(j), i.max(j));
        self.pairs.iter().find(|p| p.pair == key)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }

    /// `rank,kl,description` rows over every diagnosed pair.
    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["rank", "kl", "classification", "description"])?;
        for (r, p) in self.pairs.iter().enumerate() {
            let class = match p.classification {
                Classification::WellLearned => "well_learned",
                Classification::BlindSpot => "blind_spot",
                Classification::FailureMode => "failure_mode",
            };
            w.write_record([(r + 1).to_string(), format!("{:.6}", p.kl), class.to_string(), p.describe()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Everything computed along the way, for callers that export more than the report.
#[derive(Debug, Clone)]
pub struct Diagnosis {
    pub report: DiagnosisReport,
    pub distributions: Vec<PairDistribution>,
    /// Per attribute; `None` for attributes outside every labeled pair.
    pub masks: Vec<Option<PatternMask>>,
}

/// Inference vectors `v = rho * nu` for the given attributes on every image,
/// along with the fitted masks. Index as `vectors[attr][image]`.
pub struct InferencePatterns {
    pub masks: Vec<Option<PatternMask>>,
    pub vectors: Vec<Option<Vec<Tensor>>>,
    pub probes: Vec<Tensor>,
}

pub fn inference_patterns(
    net: &Network,
    images: &[Tensor],
    attributes: &[usize],
    mask: &MaskConfig,
) -> Result<InferencePatterns, DiagnosisError> {
    let n = net.attribute_count();
    if images.is_empty() {
        return Err(AttributionError::EmptyInput.into());
    }
    let traces = images
        .par_iter()
        .map(|im| net.forward(im))
        .collect::<Result<Vec<_>, _>>()?;
    let mut masks: Vec<Option<PatternMask>> = vec![None; n];
    let mut vectors: Vec<Option<Vec<Tensor>>> = vec![None; n];
    for &a in attributes {
        let surrogates = traces
            .par_iter()
            .map(|t| local_surrogate(net, t, a))
            .collect::<Result<Vec<_>, _>>()?;
        let probes: Vec<Tensor> = traces.iter().map(|t| t.outputs[net.probe_layer()].clone()).collect();
        let m = greedy_mask(&surrogates, &probes, mask)?;
        let v = surrogates
            .par_iter()
            .map(|s| inference_vector(&m, s))
            .collect::<Result<Vec<_>, _>>()
            .map_err(AttributionError::from)?;
        masks[a] = Some(m);
        vectors[a] = Some(v);
    }
    let probes = traces.into_iter().map(|t| t.outputs[net.probe_layer()].clone()).collect();
    Ok(InferencePatterns { masks, vectors, probes })
}

/// Runs attribution, relation mining, ground-truth fitting and KL diagnosis
/// over a training set.
pub fn diagnose(
    net: &Network,
    images: &[Tensor],
    table: &AnnotationTable,
    graph: &RelationGraph,
    cfg: &DiagnosisConfig,
) -> Result<Diagnosis, DiagnosisError> {
    if images.len() != table.len() {
        return Err(DiagnosisError::InvalidInput(format!(
            "{} images but {} annotation rows",
            images.len(),
            table.len()
        )));
    }
    if table.attribute_count() != net.attribute_count() {
        return Err(DiagnosisError::InvalidInput(format!(
            "network has {} outputs but annotations name {} attributes",
            net.attribute_count(),
            table.attribute_count()
        )));
    }
    if graph.attribute_names != table.attribute_names {
        return Err(DiagnosisError::InvalidInput(
            "relation graph and annotations disagree on attribute names".into(),
        ));
    }
    if !(cfg.smoothing > 0.0 && cfg.smoothing.is_finite()) {
        return Err(DiagnosisError::InvalidSmoothing(cfg.smoothing));
    }
    let owned;
    let net = match cfg.probe_layer {
        Some(k) if k != net.probe_layer() => {
            owned = net.clone().with_probe_layer(k)?;
            &owned
        }
        _ => net,
    };

    let n = table.attribute_count();
    let attrs: Vec<usize> = (0..n).filter(|&a| graph.degree(a) > 0).collect();
    let patterns = inference_patterns(net, images, &attrs, &cfg.mask)?;

    let mut distributions = Vec::new();
    let mut undiagnosable = Vec::new();
    for e in &graph.edges {
        let (vi, vj) = match (&patterns.vectors[e.i], &patterns.vectors[e.j]) {
            (Some(a), Some(b)) => (a, b),
            _ => unreachable!("vectors exist for every attribute with an edge"),
        };
        let mined =
            filter_pair_samples(table, e.i, e.j).and_then(|subset| mine_pair((e.i, e.j), vi, vj, &subset, cfg.bins));
        match mined {
            Ok(d) => distributions.push(d),
            Err(RelationError::NoSamples(..)) => {
                log::warn!("pair ({}, {}) has no usable samples", e.i, e.j);
                undiagnosable.push((e.i, e.j));
            }
            Err(err) => return Err(err.into()),
        }
    }

    let gaussians = match cfg.fit_mode {
        FitMode::PairMeans => {
            let means: HashMap<_, _> = distributions.iter().map(|d| (d.pair, d.mean_cosine)).collect();
            fit_label_gaussians(graph, &means, cfg.sigma_min)?
        }
        FitMode::Pooled => {
            let cos: HashMap<_, _> = distributions.iter().map(|d| (d.pair, d.cosines.clone())).collect();
            fit_label_gaussians_pooled(graph, &cos, cfg.sigma_min)?
        }
    };
    let by_label: HashMap<&str, &LabelGaussian> = gaussians.iter().map(|g| (g.label.as_str(), g)).collect();
    let p_vectors: HashMap<&str, Vec<f64>> = gaussians
        .iter()
        .map(|g| Ok((g.label.as_str(), discretize_gaussian(g, cfg.bins)?)))
        .collect::<Result<_, GroundTruthError>>()?;

    let mut kls = HashMap::new();
    for d in &distributions {
        let label = graph.label_of(d.pair.0, d.pair.1).expect("mined pairs come from the graph");
        kls.insert(d.pair, kl_pair(&p_vectors[label], d, cfg.smoothing)?);
    }
    let all_kls: Vec<f64> = distributions.iter().map(|d| kls[&d.pair]).collect();
    let gate = match cfg.kl_gate {
        KlGate::Percentile(q) => percentile(&all_kls, q),
        KlGate::Fixed(g) => Some(g),
    };

    let mut pairs: Vec<PairDiagnosis> = distributions
        .iter()
        .map(|d| {
            let (i, j) = d.pair;
            let label = graph.label_of(i, j).expect("mined pairs come from the graph");
            let g = by_label[label];
            let kl = kls[&d.pair];
            let classification = classify_pair(d.mean_cosine, g.mu, kl, gate.unwrap_or(f64::INFINITY), &cfg.thresholds);
            let failure_mode = (classification == Classification::FailureMode)
                .then(|| failure_mode_candidate(table, i, j, if d.mean_cosine > 0.0 { 1 } else { -1 }));
            if let Some(m) = failure_mode.filter(|m| m.support == 0) {
                log::warn!("failure mode ({:+}, {:+}) of pair ({i}, {j}) never occurs in training", m.a, m.b);
            }
            PairDiagnosis {
                pair: d.pair,
                names: (table.attribute_names[i].clone(), table.attribute_names[j].clone()),
                label: label.to_string(),
                mean_cosine: d.mean_cosine,
                mu_label: g.mu,
                sigma_label: g.sigma,
                kl,
                classification,
                failure_mode,
                sample_count: d.sample_count,
                skipped_count: d.skipped_count,
            }
        })
        .collect();
    pairs.sort_by(|a, b| b.kl.total_cmp(&a.kl).then(a.pair.cmp(&b.pair)));

    let mut attribute_ranking = Vec::new();
    let mut isolated = Vec::new();
    for a in 0..n {
        match kl_attribute(a, &kls, graph) {
            Ok(kl) => attribute_ranking.push(AttributeKl {
                attribute: a,
                name: table.attribute_names[a].clone(),
                kl,
                degree: graph.degree(a),
            }),
            Err(DiagnosisError::IsolatedAttribute(_)) => isolated.push(a),
            Err(e) => return Err(e),
        }
    }
    attribute_ranking.sort_by(|x, y| x.kl.total_cmp(&y.kl).then(x.attribute.cmp(&y.attribute)));

    let listed = |c: Classification| pairs.iter().filter(|p| p.classification == c).map(|p| p.pair).collect();
    let report = DiagnosisReport {
        timestamp: None,
        run_config: None,
        config: cfg.clone(),
        kl_unit: "nats".into(),
        probe_layer: net.probe_layer(),
        kl_gate: gate,
        label_gaussians: gaussians.clone(),
        blind_spots: listed(Classification::BlindSpot),
        failure_modes: listed(Classification::FailureMode),
        pairs,
        undiagnosable_pairs: undiagnosable,
        attribute_ranking,
        isolated_attributes: isolated,
        mask_sizes: patterns.masks.iter().map(|m| m.as_ref().map(PatternMask::selected_count)).collect(),
    };
    Ok(Diagnosis {
        report,
        distributions,
        masks: patterns.masks,
    })
}
