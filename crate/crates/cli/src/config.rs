//! Run configuration: defaults, an optional JSON file, then flag overrides.

use std::collections::BTreeMap;
use std::path::Path;

use biasprobe::attribution::Penalty;
use biasprobe::bench::{Experiment2Config, Experiment3Config, SynthSpec};
use biasprobe::diagnosis::{DiagnosisConfig, KlGate};
use biasprobe::groundtruth::FitMode;
use biasprobe::net::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::{invalid, CliError, DiagnosisFlags, TrainFlags};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; copied into the synth and train settings.
    pub seed: u64,
    pub synth: SynthSpec,
    /// Attributes whose annotation sign is flipped on load.
    pub flips: Vec<String>,
    pub binarize_threshold: f64,
    pub train: TrainConfig,
    pub diagnosis: DiagnosisConfig,
    /// Number of leading images to export heat maps for in `diagnose`.
    pub heatmaps: usize,
    pub experiment2: Experiment2Config,
    pub experiment3: Experiment3Config,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthSpec::default(),
            flips: Vec::new(),
            binarize_threshold: 0.5,
            train: TrainConfig::default(),
            diagnosis: DiagnosisConfig::default(),
            heatmaps: 0,
            experiment2: Experiment2Config::default(),
            experiment3: Experiment3Config::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read(p).map_err(|e| invalid(format!("config {}: {e}", p.display())))?;
                serde_json::from_slice(&text).map_err(|e| invalid(format!("config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.synth.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }
}

/// The configuration echo embedded in every report.
#[derive(Debug, Clone, Serialize)]
pub struct Echo<'a> {
    pub command: &'a str,
    pub paths: BTreeMap<&'a str, String>,
    pub config: &'a RunConfig,
}

impl<'a> Echo<'a> {
    pub fn new(command: &'a str, config: &'a RunConfig, paths: &[(&'a str, &Path)]) -> Self {
        Self {
            command,
            paths: paths.iter().map(|(k, p)| (*k, p.display().to_string())).collect(),
            config,
        }
    }

    pub fn value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// RFC 3339 UTC time, or `SOURCE_DATE_EPOCH` when set.
pub fn timestamp() -> String {
    let now = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse::<i64>().ok())
        .and_then(|s| chrono::DateTime::from_timestamp(s, 0))
        .unwrap_or_else(chrono::Utc::now);
    now.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// `N` means seeds `1..=N`; anything with a comma is an explicit list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let parse = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("bad seed `{t}`: {e}"));
    let seeds = if s.contains(',') {
        s.split(',').map(parse).collect::<Result<Vec<_>, _>>()?
    } else {
        (1..=parse(s)?).collect()
    };
    if seeds.is_empty() {
        return Err("at least one seed required".into());
    }
    Ok(seeds)
}

pub fn apply_train(cfg: &mut TrainConfig, f: &TrainFlags) {
    if let Some(v) = f.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = f.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = f.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = f.init_scale {
        cfg.init_scale = v;
    }
}

pub fn apply_diagnosis(cfg: &mut DiagnosisConfig, f: &DiagnosisFlags) {
    if f.probe_layer.is_some() {
        cfg.probe_layer = f.probe_layer;
    }
    if let Some(v) = f.lambda {
        cfg.mask.penalty = Penalty::Absolute(v);
    }
    if let Some(v) = f.lambda_factor {
        cfg.mask.penalty = Penalty::Relative(v);
    }
    if f.max_units.is_some() {
        cfg.mask.max_units = f.max_units;
    }
    if let Some(v) = f.bins {
        cfg.bins = v;
    }
    if let Some(v) = f.smoothing {
        cfg.smoothing = v;
    }
    if let Some(v) = f.sigma_min {
        cfg.sigma_min = v;
    }
    if let Some(v) = f.gate_percentile {
        cfg.kl_gate = KlGate::Percentile(v);
    }
    if let Some(v) = f.gate {
        cfg.kl_gate = KlGate::Fixed(v);
    }
    if f.pooled {
        cfg.fit_mode = FitMode::Pooled;
    }
    if let Some(v) = f.cosine_threshold {
        cfg.thresholds.cosine = v;
    }
    if let Some(v) = f.deviation_threshold {
        cfg.thresholds.deviation = v;
    }
}

pub fn validate_diagnosis(cfg: &DiagnosisConfig) -> Result<(), CliError> {
    let positive = |v: f64| v > 0.0 && v.is_finite();
    if cfg.bins < 2 {
        return Err(invalid(format!("bins must be at least 2, got {}", cfg.bins)));
    }
    if !positive(cfg.smoothing) || !positive(cfg.sigma_min) {
        return Err(invalid("smoothing and sigma_min must be positive"));
    }
    match cfg.mask.penalty {
        Penalty::Absolute(v) | Penalty::Relative(v) if !(v >= 0.0 && v.is_finite()) => {
            return Err(invalid(format!("penalty must be non-negative, got {v}")))
        }
        _ => {}
    }
    if let KlGate::Percentile(p) = cfg.kl_gate {
        if !(0.0..=100.0).contains(&p) {
            return Err(invalid(format!("gate percentile must lie in [0, 100], got {p}")));
        }
    }
    Ok(())
}

pub fn validate_train(cfg: &TrainConfig) -> Result<(), CliError> {
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) || cfg.batch_size == 0 {
        return Err(invalid("learning rate and batch size must be positive"));
    }
    if !(cfg.init_scale > 0.0 && cfg.init_scale.is_finite()) {
        return Err(invalid("init scale must be positive"));
    }
    Ok(())
}
