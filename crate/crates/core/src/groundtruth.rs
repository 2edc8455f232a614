//! Annotated relationship graph and per-label Gaussian ground truth `P`.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::relation::bin_lower_edge;

/// Default floor on a fitted label deviation.
pub const DEFAULT_SIGMA_MIN: f64 = 0.05;

#[derive(Debug, Error)]
pub enum GroundTruthError {
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("pair ({0}, {1}) is listed more than once")]
    DuplicateEdge(String, String),

    #[error("attribute `{0}` is related to itself")]
    SelfEdge(String),

    #[error("label `{0}` has no member pairs with statistics")]
    EmptyLabel(String),

    #[error("relations file line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("need at least 2 bins, got {0}")]
    TooFewBins(usize),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    /// Always `i < j`.
    pub i: usize,
    pub j: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationGraph {
    pub attribute_names: Vec<String>,
    /// In file order.
    pub edges: Vec<Edge>,
}

impl RelationGraph {
    pub fn new(attribute_names: Vec<String>) -> Self {
        Self {
            attribute_names,
            edges: Vec::new(),
        }
    }

    /// Adds `(i, j, label)`, normalizing to `i < j`.
    pub fn add_edge(&mut self, i: usize, j: usize, label: &str) -> Result<(), GroundTruthError> {
        let n = self.attribute_names.len();
        for k in [i, j] {
            if k >= n {
                return Err(GroundTruthError::UnknownAttribute(format!("#{k}")));
            }
        }
        if i == j {
            return Err(GroundTruthError::SelfEdge(self.attribute_names[i].clone()));
        }
        let (i, j) = (i.min(j), i.max(j));
        if self.label_of(i, j).is_some() {
            return Err(GroundTruthError::DuplicateEdge(
                self.attribute_names[i].clone(),
                self.attribute_names[j].clone(),
            ));
        }
        self.edges.push(Edge {
            i,
            j,
            label: label.to_string(),
        });
        Ok(())
    }

    pub fn label_of(&self, i: usize, j: usize) -> Option<&str> {
        let (i, j) = (i.min(j), i.max(j));
        self.edges
            .iter()
            .find(|e| e.i == i && e.j == j)
            .map(|e| e.label.as_str())
    }

    pub fn degree(&self, attr: usize) -> usize {
        self.edges.iter().filter(|e| e.i == attr || e.j == attr).count()
    }

    /// Distinct labels, sorted.
    pub fn labels(&self) -> Vec<String> {
        let mut l: Vec<String> = self.edges.iter().map(|e| e.label.clone()).collect();
        l.sort();
        l.dedup();
        l
    }
}

/// Parses `attr_i,attr_j,label` lines. `#` starts a comment line; an optional
/// `attr_i,attr_j,label` header is skipped.
pub fn parse_relations<R: Read>(
    source: R,
    attribute_names: &[String],
) -> Result<RelationGraph, GroundTruthError> {
    let index: HashMap<&str, usize> = attribute_names
        .iter()
        .enumerate()
        .map(|(k, n)| (n.as_str(), k))
        .collect();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(source);
    let mut graph = RelationGraph::new(attribute_names.to_vec());
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if rec.len() != 3 {
            return Err(GroundTruthError::Syntax {
                line,
                message: format!("expected 3 fields, found {}", rec.len()),
            });
        }
        if graph.edges.is_empty() && &rec[0] == "attr_i" && &rec[1] == "attr_j" {
            continue;
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| GroundTruthError::UnknownAttribute(name.to_string()))
        };
        let (i, j) = (lookup(&rec[0])?, lookup(&rec[1])?);
        if rec[2].is_empty() {
            return Err(GroundTruthError::Syntax {
                line,
                message: "empty label".into(),
            });
        }
        graph.add_edge(i, j, &rec[2])?;
    }
    Ok(graph)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelGaussian {
    pub label: String,
    pub mu: f64,
    pub sigma: f64,
    pub member_pair_count: usize,
}

/// What the per-label statistics are computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// One value per member pair: its mean cosine.
    #[default]
    PairMeans,
    /// Every per-image cosine of every member pair.
    Pooled,
}

/// Mean and population deviation of `values`; order-independent.
fn moments(values: &mut [f64]) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = values.iter().map(|v| (v - mu) * (v - mu)).collect();
    dev.sort_by(f64::total_cmp);
    (mu, (dev.iter().sum::<f64>() / n).sqrt())
}

fn fit_with<F>(graph: &RelationGraph, sigma_min: f64, mut collect: F) -> Result<Vec<LabelGaussian>, GroundTruthError>
where
    F: FnMut(usize, usize, &mut Vec<f64>) -> bool,
{
    let mut by_label: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for e in &graph.edges {
        let slot = by_label.entry(e.label.as_str()).or_default();
        if collect(e.i, e.j, &mut slot.0) {
            slot.1 += 1;
        }
    }
    by_label
        .into_iter()
        .map(|(label, (mut values, members))| {
            if values.is_empty() {
                return Err(GroundTruthError::EmptyLabel(label.to_string()));
            }
            let (mu, sigma) = moments(&mut values);
            let sigma = if members < 2 || sigma < sigma_min { sigma_min } else { sigma };
            Ok(LabelGaussian {
                label: label.to_string(),
                mu,
                sigma,
                member_pair_count: members,
            })
        })
        .collect()
}

/// One Gaussian per label from the mean cosines of its member pairs.
/// Pairs missing from `pair_means` (e.g. with no usable samples) are left out.
pub fn fit_label_gaussians(
    graph: &RelationGraph,
    pair_means: &HashMap<(usize, usize), f64>,
    sigma_min: f64,
) -> Result<Vec<LabelGaussian>, GroundTruthError> {
    fit_with(graph, sigma_min, |i, j, out| match pair_means.get(&(i, j)) {
        Some(&m) => {
            out.push(m);
            true
        }
        None => false,
    })
}

/// Like [`fit_label_gaussians`] but over every per-image cosine of the members.
pub fn fit_label_gaussians_pooled(
    graph: &RelationGraph,
    pair_cosines: &HashMap<(usize, usize), Vec<f64>>,
    sigma_min: f64,
) -> Result<Vec<LabelGaussian>, GroundTruthError> {
    fit_with(graph, sigma_min, |i, j, out| match pair_cosines.get(&(i, j)) {
        Some(c) if !c.is_empty() => {
            out.extend_from_slice(c);
            true
        }
        _ => false,
    })
}

/// Standard normal mass in `[a, b]`, taken from whichever tail keeps precision.
fn normal_mass(a: f64, b: f64) -> f64 {
    let s = std::f64::consts::SQRT_2;
    if a >= 0.0 {
        0.5 * (libm::erfc(a / s) - libm::erfc(b / s))
    } else if b <= 0.0 {
        0.5 * (libm::erfc(-b / s) - libm::erfc(-a / s))
    } else {
        1.0 - 0.5 * libm::erfc(-a / s) - 0.5 * libm::erfc(b / s)
    }
}

/// Gaussian mass per bin of `[-1, 1]`, renormalized to sum to 1.
pub fn discretize_gaussian(g: &LabelGaussian, bins: usize) -> Result<Vec<f64>, GroundTruthError> {
    if bins < 2 {
        return Err(GroundTruthError::TooFewBins(bins));
    }
    let z = |e: f64| (e - g.mu) / g.sigma;
    let mut p: Vec<f64> = (0..bins)
        .map(|b| {
            let hi = if b + 1 == bins { 1.0 } else { bin_lower_edge(b + 1, bins) };
            normal_mass(z(bin_lower_edge(b, bins)), z(hi)).max(0.0)
        })
        .collect();
    let total: f64 = p.iter().sum();
    if total > 0.0 && total.is_finite() {
        p.iter_mut().for_each(|v| *v /= total);
    } else {
        // All mass underflowed: the whole Gaussian sits outside [-1, 1].
        p.iter_mut().for_each(|v| *v = 0.0);
        p[crate::relation::bin_index(g.mu.clamp(-1.0, 1.0), bins)] = 1.0;
    }
    Ok(p)
}
