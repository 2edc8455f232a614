//! Per-image linear surrogates of attribute scores and the sparse unit
//! masks that select each attribute's inference patterns.
//!
//! Within one ReLU activation region the score is exactly affine in the
//! probe-layer feature map `x`: `Y = nu . x + beta`. A single binary mask
//! `rho` per attribute, shared by every image, keeps the units whose
//! contributions `nu_u * x_u` carry the score; the inference vector of an
//! image is `rho * nu`.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{ActivationTrace, NetError, Network};
use crate::tensor::{dot, hadamard, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("no images to select patterns from")]
    EmptyInput,

    #[error("penalty must be finite and non-negative, got {0}")]
    InvalidPenalty(f64),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Net(#[from] NetError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Exact local linear form of one attribute score on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSurrogate {
    pub nu: Tensor,
    pub beta: f64,
    pub score: f64,
}

impl LocalSurrogate {
    /// `nu . x + beta`.
    pub fn reconstruct(&self, x: &Tensor) -> Result<f64, TensorError> {
        Ok(dot(&self.nu, x)? + self.beta)
    }
}

/// Gradient at the probe layer plus the bias that makes the linear form
/// reproduce the traced score.
pub fn local_surrogate(
    net: &Network,
    trace: &ActivationTrace,
    attr: usize,
) -> Result<LocalSurrogate, NetError> {
    let nu = net.grad_at_probe(trace, attr)?;
    let x = &trace.outputs[net.probe_layer()];
    let score = trace.score(attr);
    let beta = score - dot(&nu, x)?;
    Ok(LocalSurrogate { nu, beta, score })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Penalty {
    /// `lambda` used as given.
    Absolute(f64),
    /// `lambda = factor * E_I[(nu . x)^2] / N`.
    Relative(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub penalty: Penalty,
    pub max_units: Option<usize>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            penalty: Penalty::Relative(0.01),
            max_units: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternMask {
    /// Binary mask over probe-layer units.
    pub rho: Tensor,
    /// Selected units in acceptance order.
    pub selected: Vec<usize>,
    /// `E[r^2] + lambda * |rho|`, starting with the empty mask and then
    /// once per accepted step.
    pub objective_trace: Vec<f64>,
    /// Resolved penalty weight.
    pub lambda: f64,
    /// Fidelity term `E[r^2]` of the final mask.
    pub fidelity: f64,
}

impl PatternMask {
    pub fn selected_count(&self) -> usize {
        self.selected.len()
    }

    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace starts with the empty mask")
    }
}

/// Contributions `nu_u * x_u` stored unit-major: `c[u * images + i]`.
struct Contributions {
    images: usize,
    units: usize,
    values: Vec<f64>,
}

impl Contributions {
    fn build(surrogates: &[LocalSurrogate], probes: &[Tensor]) -> Result<Self, AttributionError> {
        let images = surrogates.len();
        if images == 0 {
            return Err(AttributionError::EmptyInput);
        }
        if probes.len() != images {
            return Err(TensorError::ShapeMismatch {
                left: vec![images],
                right: vec![probes.len()],
            }
            .into());
        }
        let shape = surrogates[0].nu.shape();
        let units = surrogates[0].nu.len();
        for (s, x) in surrogates.iter().zip(probes) {
            if s.nu.shape() != shape || x.shape() != shape {
                return Err(TensorError::ShapeMismatch {
                    left: shape.to_vec(),
                    right: if s.nu.shape() != shape { s.nu.shape() } else { x.shape() }.to_vec(),
                }
                .into());
            }
        }
        let mut values = vec![0.0; units * images];
        for (i, (s, x)) in surrogates.iter().zip(probes).enumerate() {
            for (u, (n, v)) in s.nu.data().iter().zip(x.data()).enumerate() {
                values[u * images + i] = n * v;
            }
        }
        Ok(Self {
            images,
            units,
            values,
        })
    }

    fn unit(&self, u: usize) -> &[f64] {
        &self.values[u * self.images..(u + 1) * self.images]
    }
}

fn mean_square(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64
}

/// Mean of `(r + c)^2`, the fidelity after adding a unit with contributions `c`.
fn fidelity_with(r: &[f64], c: &[f64]) -> f64 {
    r.iter().zip(c).map(|(a, b)| (a + b) * (a + b)).sum::<f64>() / r.len() as f64
}

/// Greedy forward selection of the global mask `rho` minimizing
/// `E_I[r(rho)^2] + lambda * |rho|` with per-image residual
/// `r = sum_u (rho_u - 1) * nu_u * x_u`.
///
/// Each step adds the unit with the largest fidelity decrease (lowest index
/// on ties) and is accepted while that decrease exceeds `lambda`. When the
/// search stops because no single remaining unit lowers the fidelity term at
/// all, the remaining active units are offered once as a group, accepted only
/// if that lowers the objective. Units whose contribution is zero on every
/// image are never selected.
pub fn greedy_mask(
    surrogates: &[LocalSurrogate],
    probes: &[Tensor],
    cfg: &MaskConfig,
) -> Result<PatternMask, AttributionError> {
    let contrib = Contributions::build(surrogates, probes)?;
    let shape = surrogates[0].nu.shape().to_vec();

    let mut residual: Vec<f64> = surrogates
        .iter()
        .zip(probes)
        .map(|(s, x)| dot(&s.nu, x).map(|d| -d))
        .collect::<Result<_, _>>()?;
    let mut fidelity = mean_square(&residual);

    let lambda = match cfg.penalty {
        Penalty::Absolute(l) => l,
        Penalty::Relative(f) => f * fidelity / contrib.units as f64,
    };
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(AttributionError::InvalidPenalty(lambda));
    }

    let mut candidates: Vec<usize> = (0..contrib.units)
        .filter(|&u| contrib.unit(u).iter().any(|&c| c != 0.0))
        .collect();
    let mut selected = Vec::new();
    let mut objective = fidelity;
    let mut objective_trace = vec![objective];
    let cap = cfg.max_units.unwrap_or(usize::MAX);
    let mut stalled = false;

    while selected.len() < cap && !candidates.is_empty() {
        let scored: Vec<f64> = candidates
            .par_iter()
            .map(|&u| fidelity_with(&residual, contrib.unit(u)))
            .collect();
        let (best_pos, best_fidelity) = scored
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(bp, bf), (p, &f)| if f < bf { (p, f) } else { (bp, bf) });
        let decrease = fidelity - best_fidelity;
        if decrease <= 0.0 {
            stalled = true;
        }
        let next_objective = best_fidelity + lambda * (selected.len() + 1) as f64;
        if !(decrease > lambda && next_objective < objective) {
            break;
        }
        let unit = candidates.remove(best_pos);
        for (r, c) in residual.iter_mut().zip(contrib.unit(unit)) {
            *r += c;
        }
        selected.push(unit);
        fidelity = best_fidelity;
        objective = next_objective;
        objective_trace.push(objective);
    }

    // Adding every remaining active unit recovers the full representation,
    // so the residual after the group move is exactly zero.
    let group = candidates.len();
    if stalled && group > 0 && selected.len() + group <= cap {
        let next_objective = lambda * (selected.len() + group) as f64;
        if fidelity > lambda * group as f64 && next_objective < objective {
            selected.append(&mut candidates);
            objective_trace.push(next_objective);
        }
    }

    let mut rho = vec![0.0; contrib.units];
    for &u in &selected {
        rho[u] = 1.0;
    }
    let rho = Tensor::new(shape, rho)?;
    let fidelity = fidelity_loss(&rho, surrogates, probes)?;
    Ok(PatternMask {
        rho,
        selected,
        objective_trace,
        lambda,
        fidelity,
    })
}

/// `E_I[((rho * nu) . x + beta - Y)^2]` evaluated directly from its definition.
pub fn fidelity_loss(
    rho: &Tensor,
    surrogates: &[LocalSurrogate],
    probes: &[Tensor],
) -> Result<f64, TensorError> {
    if surrogates.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (s, x) in surrogates.iter().zip(probes) {
        if rho.len() != s.nu.len() || x.len() != s.nu.len() {
            return Err(TensorError::ShapeMismatch {
                left: rho.shape().to_vec(),
                right: s.nu.shape().to_vec(),
            });
        }
        let mut r = 0.0;
        for ((&m, &n), &v) in rho.data().iter().zip(s.nu.data()).zip(x.data()) {
            if m == 0.0 {
                r -= n * v;
            }
        }
        total += r * r;
    }
    Ok(total / surrogates.len() as f64)
}

/// `v = rho * nu`.
pub fn inference_vector(mask: &PatternMask, surrogate: &LocalSurrogate) -> Result<Tensor, TensorError> {
    hadamard(&mask.rho, &surrogate.nu)
}

/// Signed contribution map: per spatial position, the sum over channels of
/// `v_u * x_u`. Positive values raise the score.
pub fn heatmap(v: &Tensor, x: &Tensor, chw: (usize, usize, usize)) -> Result<Tensor, TensorError> {
    let (c, h, w) = chw;
    if v.len() != c * h * w || x.len() != c * h * w {
        return Err(TensorError::ShapeMismatch {
            left: vec![c, h, w],
            right: v.shape().to_vec(),
        });
    }
    let mut map = vec![0.0; h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for (p, m) in map.iter_mut().enumerate() {
            *m += v.data()[base + p] * x.data()[base + p];
        }
    }
    Tensor::new(vec![h, w], map)
}

/// Scaling recorded next to an exported heat map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgmScaling {
    pub width: usize,
    pub height: usize,
    /// Largest absolute value in the map; maps to gray 0 or 255.
    pub max_abs: f64,
    /// Gray level of value zero.
    pub zero_level: f64,
    pub decode: String,
}

/// Encodes a 2-D map as an 8-bit binary PGM with symmetric signed scaling:
/// `gray = round(127.5 + 127.5 * value / max_abs)`.
pub fn encode_pgm(map: &Tensor) -> Result<(Vec<u8>, PgmScaling), TensorError> {
    let [height, width] = <[usize; 2]>::try_from(map.shape()).map_err(|_| TensorError::ShapeMismatch {
        left: vec![0, 0],
        right: map.shape().to_vec(),
    })?;
    let max_abs = map.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| {
        let level = if max_abs > 0.0 { 127.5 + 127.5 * v / max_abs } else { 127.5 };
        level.round().clamp(0.0, 255.0) as u8
    }));
    Ok((
        out,
        PgmScaling {
            width,
            height,
            max_abs,
            zero_level: 127.5,
            decode: "value = (gray - 127.5) / 127.5 * max_abs".into(),
        },
    ))
}

/// Writes `<stem>.pgm`, `<stem>.json` (scaling) and `<stem>.bltn` (raw map).
pub fn write_heatmap(map: &Tensor, stem: &Path) -> Result<(), AttributionError> {
    let (pgm, scaling) = encode_pgm(map)?;
    crate::io::write_atomic(&stem.with_extension("pgm"), &pgm)?;
    let mut json = serde_json::to_vec_pretty(&scaling).map_err(std::io::Error::other)?;
    json.write_all(b"\n")?;
    crate::io::write_atomic(&stem.with_extension("json"), &json)?;
    crate::io::write_atomic(&stem.with_extension("bltn"), &map.to_bytes())?;
    Ok(())
}
