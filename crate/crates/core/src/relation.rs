//! Ground-truth annotation tables and the per-pair cosine histograms `Q`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{cosine, Tensor, TensorError};

/// Default histogram resolution over `[-1, 1]`.
pub const DEFAULT_BINS: usize = 64;

#[derive(Debug, Error)]
pub enum RelationError {
    #[error("no usable samples for attribute pair ({0}, {1})")]
    NoSamples(usize, usize),

    #[error("attribute `{0}` has the same value on every sample and cannot be mined")]
    DegenerateAttribute(String),

    #[error("a pair needs two distinct attributes, got ({0}, {0})")]
    SameAttribute(usize),

    #[error("attribute index {0} out of range")]
    AttributeOutOfRange(usize),

    #[error("need at least 2 histogram bins, got {0}")]
    TooFewBins(usize),

    #[error("annotation table: {0}")]
    Table(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Annotation values as read, binary or continuous.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub sample_ids: Vec<String>,
    pub attribute_names: Vec<String>,
    /// Sample-major rows.
    pub values: Vec<Vec<f64>>,
}

impl RawTable {
    /// Parses `sample_id,attr_1,...,attr_n` CSV.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, RelationError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 2 || &headers[0] != "sample_id" {
            return Err(RelationError::Table(
                "header must be `sample_id,attr_1,...,attr_n`".into(),
            ));
        }
        let attribute_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut sample_ids = Vec::new();
        let mut values = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != headers.len() {
                return Err(RelationError::Table(format!(
                    "row {} has {} fields, expected {}",
                    line + 1,
                    rec.len(),
                    headers.len()
                )));
            }
            sample_ids.push(rec[0].to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|v| {
                    v.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| RelationError::Table(format!("row {}: bad value `{v}`", line + 1)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            values.push(row);
        }
        Ok(Self {
            sample_ids,
            attribute_names,
            values,
        })
    }
}

/// Binarized annotations where `+1` marks presence of every attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTable {
    pub sample_ids: Vec<String>,
    pub attribute_names: Vec<String>,
    /// Sample-major rows of `-1` / `+1`.
    pub values: Vec<Vec<i8>>,
    /// Attributes whose raw sign was flipped during normalization.
    pub flips: Vec<bool>,
}

/// Joint counts of `(Y_i*, Y_j*)` over a table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CellCounts {
    pub pos_pos: usize,
    pub pos_neg: usize,
    pub neg_pos: usize,
    pub neg_neg: usize,
}

impl CellCounts {
    pub fn get(&self, a: i8, b: i8) -> usize {
        match (a > 0, b > 0) {
            (true, true) => self.pos_pos,
            (true, false) => self.pos_neg,
            (false, true) => self.neg_pos,
            (false, false) => self.neg_neg,
        }
    }

    pub fn total(&self) -> usize {
        self.pos_pos + self.pos_neg + self.neg_pos + self.neg_neg
    }
}

impl AnnotationTable {
    /// Builds a table from `-1`/`+1` rows with no flips.
    pub fn from_signs(
        sample_ids: Vec<String>,
        attribute_names: Vec<String>,
        values: Vec<Vec<i8>>,
    ) -> Result<Self, RelationError> {
        if sample_ids.len() != values.len() {
            return Err(RelationError::Table("one id per row required".into()));
        }
        for (r, row) in values.iter().enumerate() {
            if row.len() != attribute_names.len() || row.iter().any(|&v| v != 1 && v != -1) {
                return Err(RelationError::Table(format!("row {r} must hold one ±1 per attribute")));
            }
        }
        let flips = vec![false; attribute_names.len()];
        Ok(Self {
            sample_ids,
            attribute_names,
            values,
            flips,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn attribute_count(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn value(&self, sample: usize, attr: usize) -> i8 {
        self.values[sample][attr]
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attribute_names.iter().position(|n| n == name)
    }

    /// Rows as `f64` training targets.
    pub fn targets(&self) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .map(|r| r.iter().map(|&v| f64::from(v)).collect())
            .collect()
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            sample_ids: indices.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            attribute_names: self.attribute_names.clone(),
            values: indices.iter().map(|&i| self.values[i].clone()).collect(),
            flips: self.flips.clone(),
        }
    }

    pub fn cell_counts(&self, i: usize, j: usize) -> CellCounts {
        let mut c = CellCounts::default();
        for row in &self.values {
            match (row[i] > 0, row[j] > 0) {
                (true, true) => c.pos_pos += 1,
                (true, false) => c.pos_neg += 1,
                (false, true) => c.neg_pos += 1,
                (false, false) => c.neg_neg += 1,
            }
        }
        c
    }

    /// Attributes with one value across every sample.
    pub fn degenerate_attributes(&self) -> Vec<usize> {
        (0..self.attribute_count())
            .filter(|&a| {
                self.values
                    .first()
                    .map_or(true, |first| self.values.iter().all(|r| r[a] == first[a]))
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), RelationError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["sample_id".to_string()];
        header.extend(self.attribute_names.iter().cloned());
        w.write_record(&header)?;
        for (id, row) in self.sample_ids.iter().zip(&self.values) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| format!("{v:+}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Binarizes with `sign(y - threshold)` (ties to `-1`) every column that is
/// not already `±1`, then flips the flagged attributes. Degenerate attributes
/// come back as warnings; they stay in the table but cannot be mined.
pub fn normalize_annotations(
    raw: &RawTable,
    flips: &[bool],
    threshold: f64,
) -> Result<(AnnotationTable, Vec<RelationError>), RelationError> {
    let n = raw.attribute_names.len();
    if flips.len() != n {
        return Err(RelationError::Table(format!(
            "{} flip flags for {n} attributes",
            flips.len()
        )));
    }
    if raw.values.iter().any(|r| r.len() != n) || raw.values.len() != raw.sample_ids.len() {
        return Err(RelationError::Table("ragged annotation rows".into()));
    }
    let binary: Vec<bool> = (0..n)
        .map(|a| raw.values.iter().all(|r| r[a] == 1.0 || r[a] == -1.0))
        .collect();
    let values = raw
        .values
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(a, &y)| {
                    let s: i8 = if binary[a] {
                        y as i8
                    } else if y - threshold > 0.0 {
                        1
                    } else {
                        -1
                    };
                    if flips[a] {
                        -s
                    } else {
                        s
                    }
                })
                .collect()
        })
        .collect();
    let table = AnnotationTable {
        sample_ids: raw.sample_ids.clone(),
        attribute_names: raw.attribute_names.clone(),
        values,
        flips: flips.to_vec(),
    };
    let warnings = table
        .degenerate_attributes()
        .into_iter()
        .map(|a| {
            let w = RelationError::DegenerateAttribute(table.attribute_names[a].clone());
            log::warn!("{w}");
            w
        })
        .collect();
    Ok((table, warnings))
}

/// Row indices where either attribute is present.
pub fn filter_pair_samples(table: &AnnotationTable, i: usize, j: usize) -> Result<Vec<usize>, RelationError> {
    if i == j {
        return Err(RelationError::SameAttribute(i));
    }
    let n = table.attribute_count();
    if i >= n || j >= n {
        return Err(RelationError::AttributeOutOfRange(i.max(j)));
    }
    let kept: Vec<usize> = (0..table.len())
        .filter(|&s| table.value(s, i) > 0 || table.value(s, j) > 0)
        .collect();
    if kept.is_empty() {
        return Err(RelationError::NoSamples(i, j));
    }
    Ok(kept)
}

/// Histogram of per-image cosines between two attributes' inference vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDistribution {
    pub pair: (usize, usize),
    /// Bin `b` covers `[-1 + 2b/B, -1 + 2(b+1)/B)`; the last bin is closed.
    pub counts: Vec<u64>,
    pub sample_count: usize,
    pub mean_cosine: f64,
    pub skipped_count: usize,
    /// Included cosines, ascending.
    #[serde(skip)]
    pub cosines: Vec<f64>,
}

pub fn bin_index(value: f64, bins: usize) -> usize {
    let b = ((value + 1.0) * bins as f64 / 2.0).floor();
    (b.max(0.0) as usize).min(bins - 1)
}

pub fn bin_lower_edge(b: usize, bins: usize) -> f64 {
    -1.0 + 2.0 * b as f64 / bins as f64
}

impl PairDistribution {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// `bin_lower,count` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), RelationError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["bin_lower", "count"])?;
        for (b, c) in self.counts.iter().enumerate() {
            w.write_record([format!("{:.6}", bin_lower_edge(b, self.bins())), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Cosines `v_i . v_j / (|v_i| |v_j|)` over `subset`, binned into `bins`
/// uniform bins. Images where either vector has zero norm are skipped.
pub fn mine_pair(
    pair: (usize, usize),
    v_i: &[Tensor],
    v_j: &[Tensor],
    subset: &[usize],
    bins: usize,
) -> Result<PairDistribution, RelationError> {
    if bins < 2 {
        return Err(RelationError::TooFewBins(bins));
    }
    let mut cosines = Vec::with_capacity(subset.len());
    let mut skipped_count = 0;
    for &s in subset {
        let (a, b) = match (v_i.get(s), v_j.get(s)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(RelationError::Table(format!("no inference vector for sample {s}"))),
        };
        match cosine(a, b) {
            Ok(c) => cosines.push(c),
            Err(TensorError::ZeroNorm) => skipped_count += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if cosines.is_empty() {
        return Err(RelationError::NoSamples(pair.0, pair.1));
    }
    // Sorting first makes the sum independent of subset order.
    cosines.sort_by(f64::total_cmp);
    let mut counts = vec![0u64; bins];
    for &c in &cosines {
        counts[bin_index(c, bins)] += 1;
    }
    let mean_cosine = (cosines.iter().sum::<f64>() / cosines.len() as f64).clamp(-1.0, 1.0);
    Ok(PairDistribution {
        pair,
        counts,
        sample_count: cosines.len(),
        mean_cosine,
        skipped_count,
        cosines,
    })
}
