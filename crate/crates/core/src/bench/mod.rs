//! Synthetic attribute images, bias injection, the entropy baseline and the
//! accuracy-decrease evaluation.

mod experiments;

pub use experiments::*;

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnosis::DiagnosisError;
use crate::net::{sign_of, NetError, Network};
use crate::relation::{AnnotationTable, CellCounts, RelationError};
use crate::rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("region of attribute {0} does not fit inside the image")]
    RegionOverflow(usize),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("no test samples in stratum {0}")]
    EmptyStratum(String),

    #[error(transparent)]
    Diagnosis(#[from] DiagnosisError),

    #[error(transparent)]
    Net(#[from] NetError),

    #[error(transparent)]
    Relation(#[from] RelationError),

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JointDistribution {
    /// Each attribute present independently with its own probability.
    Independent { p_positive: Vec<f64> },
    /// One probability per annotation cell; bit `k` of the cell index set
    /// means attribute `k` is present.
    Table { probabilities: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub attribute_names: Vec<String>,
    pub regions: Vec<Region>,
    /// Brightness added over the region when the attribute is present.
    pub intensities: Vec<f64>,
    pub joint: JointDistribution,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::disjoint(4, 400, 0)
    }
}

impl SynthSpec {
    /// `n` attributes on a grid of disjoint, inset rectangles of a 16x16
    /// single-channel image, each present with probability 1/2.
    pub fn disjoint(n: usize, samples: usize, seed: u64) -> Self {
        let (h, w) = (16, 16);
        let cols = (1..=n.max(1)).find(|c| c * c >= n).unwrap_or(1);
        let rows = n.max(1).div_ceil(cols);
        let (ch, cw) = (h / rows, w / cols);
        let regions = (0..n)
            .map(|k| Region {
                top: (k / cols) * ch + 1,
                left: (k % cols) * cw + 1,
                height: ch - 2,
                width: cw - 2,
            })
            .collect();
        Self {
            channels: 1,
            height: h,
            width: w,
            attribute_names: (0..n).map(|k| format!("attr_{k}")).collect(),
            regions,
            intensities: vec![1.0; n],
            joint: JointDistribution::Independent {
                p_positive: vec![0.5; n],
            },
            noise: 0.5,
            samples,
            seed,
        }
    }

    pub fn attribute_count(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let n = self.attribute_count();
        let bad = |m: String| Err(BenchError::InvalidSpec(m));
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("image dimensions must be positive".into());
        }
        if n == 0 || self.regions.len() != n || self.intensities.len() != n {
            return bad("need one region and one intensity per attribute".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || self.intensities.iter().any(|v| !v.is_finite()) {
            return bad("noise and intensities must be finite, noise non-negative".into());
        }
        for (k, r) in self.regions.iter().enumerate() {
            if r.height == 0 || r.width == 0 || r.top + r.height > self.height || r.left + r.width > self.width {
                return Err(BenchError::RegionOverflow(k));
            }
        }
        match &self.joint {
            JointDistribution::Independent { p_positive } => {
                if p_positive.len() != n || p_positive.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return bad("one probability in [0, 1] per attribute required".into());
                }
            }
            JointDistribution::Table { probabilities } => {
                if n >= usize::BITS as usize || probabilities.len() != 1 << n {
                    return bad(format!("joint table needs 2^{n} cells"));
                }
                if probabilities.iter().any(|p| p.is_nan() || *p < 0.0) || (probabilities.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return bad("joint probabilities must be non-negative and sum to 1".into());
                }
            }
        }
        Ok(())
    }

    fn draw_annotation(&self, rng: &mut impl Rng) -> Vec<i8> {
        let sign = |b: bool| if b { 1 } else { -1 };
        match &self.joint {
            JointDistribution::Independent { p_positive } => {
                p_positive.iter().map(|&p| sign(rng.random::<f64>() < p)).collect()
            }
            JointDistribution::Table { probabilities } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut cell = probabilities.len() - 1;
                for (c, p) in probabilities.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        cell = c;
                        break;
                    }
                }
                (0..self.attribute_count()).map(|k| sign(cell >> k & 1 == 1)).collect()
            }
        }
    }
}

/// Draws `spec.samples` annotated images from the `synth` stream of `spec.seed`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<(Vec<Tensor>, AnnotationTable), BenchError> {
    synth_from_stream(spec, rng::SYNTH)
}

/// Same generator on a different named stream, e.g. for held-out test sets.
pub fn synth_from_stream(spec: &SynthSpec, stream: &str) -> Result<(Vec<Tensor>, AnnotationTable), BenchError> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, stream);
    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("validated noise"));
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let mut images = Vec::with_capacity(spec.samples);
    let mut rows = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let row = spec.draw_annotation(&mut rng);
        let mut px: Vec<f64> = match &noise {
            Some(d) => (0..c * h * w).map(|_| d.sample(&mut rng)).collect(),
            None => vec![0.0; c * h * w],
        };
        for (k, _) in row.iter().enumerate().filter(|(_, &y)| y > 0) {
            let r = spec.regions[k];
            for ch in 0..c {
                for y in r.top..r.top + r.height {
                    for x in r.left..r.left + r.width {
                        px[(ch * h + y) * w + x] += spec.intensities[k];
                    }
                }
            }
        }
        images.push(Tensor::new(vec![c, h, w], px)?);
        rows.push(row);
    }
    let ids = (0..spec.samples).map(|k| format!("s{k:06}")).collect();
    let table = AnnotationTable::from_signs(ids, spec.attribute_names.clone(), rows)?;
    Ok((images, table))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub pair: (usize, usize),
    pub tau: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct BiasedSet {
    pub images: Vec<Tensor>,
    pub table: AnnotationTable,
    /// Original indices of the removed samples, ascending.
    pub removed: Vec<usize>,
}

/// Drops `round(tau * N_opp)` samples whose annotations on the pair disagree,
/// taken from the front of one permutation drawn from the `bias` stream, so a
/// larger `tau` removes a superset of a smaller one under the same seed.
pub fn inject_bias(images: &[Tensor], table: &AnnotationTable, spec: &BiasSpec) -> Result<BiasedSet, BenchError> {
    let (i, j) = spec.pair;
    let n = table.attribute_count();
    if i == j || i >= n || j >= n {
        return Err(BenchError::InvalidSpec(format!("bad attribute pair ({i}, {j})")));
    }
    if !(0.0..=1.0).contains(&spec.tau) {
        return Err(BenchError::InvalidSpec(format!("tau must lie in [0, 1], got {}", spec.tau)));
    }
    if images.len() != table.len() {
        return Err(BenchError::InvalidSpec("one image per annotation row required".into()));
    }
    let mut opposite: Vec<usize> = (0..table.len())
        .filter(|&s| table.value(s, i) * table.value(s, j) < 0)
        .collect();
    opposite.shuffle(&mut rng::stream(spec.seed, rng::BIAS));
    let k = (spec.tau * opposite.len() as f64 + 0.5).floor() as usize;
    let mut removed = opposite[..k.min(opposite.len())].to_vec();
    removed.sort_unstable();
    let mut drop = vec![false; table.len()];
    removed.iter().for_each(|&r| drop[r] = true);
    let kept: Vec<usize> = (0..table.len()).filter(|&s| !drop[s]).collect();
    Ok(BiasedSet {
        images: kept.iter().map(|&s| images[s].clone()).collect(),
        table: table.subset(&kept),
        removed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineMode {
    pub pair: (usize, usize),
    pub a: i8,
    pub b: i8,
    pub entropy: f64,
    pub counts: CellCounts,
}

/// Mode cells ordered `(+,+), (+,-), (-,+), (-,-)`.
const CELLS: [(i8, i8); 4] = [(1, 1), (1, -1), (-1, 1), (-1, -1)];

fn entropy_of(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -(p * p.ln())
        })
        .sum::<f64>()
        + 0.0 // a single occupied cell would otherwise give -0
}

/// Ranks pairs by the entropy of their annotation joint distribution over
/// every cell but `(-,-)`, most uncertain first, and proposes each pair's
/// rarest cell as its failure mode. Returns at most `top_n` entries.
pub fn entropy_baseline(table: &AnnotationTable, pairs: &[(usize, usize)], top_n: usize) -> Vec<BaselineMode> {
    let mut modes: Vec<BaselineMode> = pairs
        .iter()
        .map(|&(i, j)| {
            let counts = table.cell_counts(i, j);
            let (a, b) = CELLS
                .iter()
                .copied()
                .min_by_key(|&(a, b)| counts.get(a, b))
                .expect("four cells");
            let entropy = entropy_of(&[counts.pos_pos, counts.pos_neg, counts.neg_pos]);
            BaselineMode {
                pair: (i, j),
                a,
                b,
                entropy,
                counts,
            }
        })
        .collect();
    modes.sort_by(|x, y| y.entropy.total_cmp(&x.entropy));
    modes.truncate(top_n);
    modes
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureModeEval {
    pub u: usize,
    pub a: i8,
    pub v: usize,
    pub b: i8,
    pub acc_ordinary: f64,
    pub acc_mode: f64,
    pub decrease: f64,
}

/// `predict_sign` for every attribute of every image.
pub fn predict_all(net: &Network, images: &[Tensor]) -> Result<Vec<Vec<i8>>, NetError> {
    images
        .par_iter()
        .map(|im| {
            let t = net.forward(im)?;
            Ok(t.scores().data().iter().map(|&y| sign_of(y)).collect())
        })
        .collect()
}

fn accuracy(preds: &[Vec<i8>], samples: &[usize], attr: usize, truth: i8) -> f64 {
    let hits = samples.iter().filter(|&&s| preds[s][attr] == truth).count();
    hits as f64 / samples.len() as f64
}

/// Accuracy on ordinary images minus accuracy on images in mode `(u=a, v=b)`.
pub fn accuracy_decrease_from_predictions(
    preds: &[Vec<i8>],
    table: &AnnotationTable,
    (u, a): (usize, i8),
    (v, b): (usize, i8),
) -> Result<FailureModeEval, BenchError> {
    if preds.len() != table.len() {
        return Err(BenchError::InvalidSpec("one prediction row per sample required".into()));
    }
    let n = table.attribute_count();
    if u >= n || v >= n {
        return Err(BenchError::InvalidSpec(format!("attribute out of range in ({u}, {v})")));
    }
    let stratum = |f: &dyn Fn(usize) -> bool, name: String| -> Result<Vec<usize>, BenchError> {
        let s: Vec<usize> = (0..table.len()).filter(|&k| f(k)).collect();
        if s.is_empty() {
            Err(BenchError::EmptyStratum(name))
        } else {
            Ok(s)
        }
    };
    let names = &table.attribute_names;
    let su = stratum(&|k| table.value(k, u) == a, format!("{}={a:+}", names[u]))?;
    let sv = stratum(&|k| table.value(k, v) == b, format!("{}={b:+}", names[v]))?;
    let suv = stratum(
        &|k| table.value(k, u) == a && table.value(k, v) == b,
        format!("{}={a:+},{}={b:+}", names[u], names[v]),
    )?;
    let acc_ordinary = (accuracy(preds, &su, u, a) + accuracy(preds, &sv, v, b)) / 2.0;
    let acc_mode = (accuracy(preds, &suv, u, a) + accuracy(preds, &suv, v, b)) / 2.0;
    Ok(FailureModeEval {
        u,
        a,
        v,
        b,
        acc_ordinary,
        acc_mode,
        decrease: acc_ordinary - acc_mode,
    })
}

pub fn accuracy_decrease(
    net: &Network,
    images: &[Tensor],
    table: &AnnotationTable,
    ua: (usize, i8),
    vb: (usize, i8),
) -> Result<FailureModeEval, BenchError> {
    accuracy_decrease_from_predictions(&predict_all(net, images)?, table, ua, vb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_attr(samples: usize, noise: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            noise,
            ..SynthSpec::disjoint(2, samples, seed)
        }
    }

    #[test]
    fn independent_cells_are_near_a_quarter() {
        let (_, t) = synth_dataset(&two_attr(2000, 0.3, 11)).unwrap();
        let c = t.cell_counts(0, 1);
        // Binomial(2000, 1/4): sd = sqrt(2000 * 0.25 * 0.75).
        let sd = (2000.0f64 * 0.25 * 0.75).sqrt();
        for n in [c.pos_pos, c.pos_neg, c.neg_pos, c.neg_neg] {
            assert!((n as f64 - 500.0).abs() < 3.0 * sd, "{c:?}");
        }
    }

    #[test]
    fn noiseless_pattern_sits_exactly_in_its_region() {
        let mut spec = SynthSpec::disjoint(1, 40, 3);
        spec.noise = 0.0;
        let (imgs, t) = synth_dataset(&spec).unwrap();
        let r = spec.regions[0];
        let pos = (0..40).find(|&s| t.value(s, 0) > 0).unwrap();
        let neg = (0..40).find(|&s| t.value(s, 0) < 0).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let inside = (r.top..r.top + r.height).contains(&y) && (r.left..r.left + r.width).contains(&x);
                let d = imgs[pos].data()[y * 16 + x] - imgs[neg].data()[y * 16 + x];
                assert_eq!(d != 0.0, inside, "pixel ({y}, {x})");
            }
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let spec = two_attr(50, 0.3, 9);
        let (a, ta) = synth_dataset(&spec).unwrap();
        let (b, tb) = synth_dataset(&spec).unwrap();
        assert_eq!(ta, tb);
        let bytes = |v: &[Tensor]| v.iter().flat_map(|t| t.to_bytes()).collect::<Vec<u8>>();
        assert_eq!(bytes(&a), bytes(&b));
        let (c, _) = synth_from_stream(&spec, rng::TEST).unwrap();
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn spec_validation() {
        let mut spec = SynthSpec::disjoint(2, 10, 0);
        spec.regions[1].left = 14;
        assert!(matches!(synth_dataset(&spec), Err(BenchError::RegionOverflow(1))));
        let mut spec = SynthSpec::disjoint(2, 10, 0);
        spec.joint = JointDistribution::Table {
            probabilities: vec![0.5, 0.5, 0.5, 0.0],
        };
        assert!(matches!(synth_dataset(&spec), Err(BenchError::InvalidSpec(_))));
    }

    #[test]
    fn joint_table_controls_co_occurrence() {
        let mut spec = SynthSpec::disjoint(2, 300, 1);
        // Only (+,+) and (-,-).
        spec.joint = JointDistribution::Table {
            probabilities: vec![0.5, 0.0, 0.0, 0.5],
        };
        let (_, t) = synth_dataset(&spec).unwrap();
        let c = t.cell_counts(0, 1);
        assert_eq!(c.pos_neg + c.neg_pos, 0);
        assert!(c.pos_pos > 100 && c.neg_neg > 100);
    }

    fn labeled(rows: &[(i8, i8)]) -> (Vec<Tensor>, AnnotationTable) {
        let imgs = (0..rows.len()).map(|k| Tensor::vector(vec![k as f64]).unwrap()).collect();
        let t = AnnotationTable::from_signs(
            (0..rows.len()).map(|k| k.to_string()).collect(),
            vec!["u".into(), "v".into()],
            rows.iter().map(|&(a, b)| vec![a, b]).collect(),
        )
        .unwrap();
        (imgs, t)
    }

    #[test]
    fn bias_levels() {
        let mut rows = vec![(1, -1); 60];
        rows.extend(vec![(-1, 1); 40]);
        rows.extend(vec![(1, 1); 30]);
        rows.extend(vec![(-1, -1); 20]);
        let (imgs, t) = labeled(&rows);
        let run = |tau| inject_bias(&imgs, &t, &BiasSpec { pair: (0, 1), tau, seed: 5 }).unwrap();

        let none = run(0.0);
        assert_eq!(none.table, t);
        assert!(none.removed.is_empty());

        let half = run(0.5);
        assert_eq!(half.removed.len(), 50);
        let c = half.table.cell_counts(0, 1);
        assert_eq!((c.pos_pos, c.neg_neg, c.pos_neg + c.neg_pos), (30, 20, 50));

        let full = run(1.0);
        let c = full.table.cell_counts(0, 1);
        assert_eq!(c.pos_neg + c.neg_pos, 0);

        // Nested removals.
        assert!(half.removed.iter().all(|r| full.removed.contains(r)));
        // Kept images stay aligned with their rows.
        for (img, id) in half.images.iter().zip(&half.table.sample_ids) {
            assert_eq!(img.data()[0].to_string(), *id);
        }
        assert!(inject_bias(&imgs, &t, &BiasSpec { pair: (0, 1), tau: 1.5, seed: 0 }).is_err());
    }

    #[test]
    fn round_half_up() {
        let (imgs, t) = labeled(&[(1, -1), (-1, 1), (1, -1), (1, 1)]);
        // 0.5 * 3 = 1.5 -> 2.
        let b = inject_bias(&imgs, &t, &BiasSpec { pair: (0, 1), tau: 0.5, seed: 1 }).unwrap();
        assert_eq!(b.removed.len(), 2);
    }

    fn counts_table(pp: usize, pn: usize, np: usize, nn: usize) -> AnnotationTable {
        let mut rows = Vec::new();
        for (cell, n) in [((1, 1), pp), ((1, -1), pn), ((-1, 1), np), ((-1, -1), nn)] {
            rows.extend(std::iter::repeat(cell).take(n));
        }
        labeled(&rows).1
    }

    #[test]
    fn entropy_examples() {
        let t = counts_table(50, 25, 25, 900);
        let m = &entropy_baseline(&t, &[(0, 1)], 5)[0];
        let oracle = -(0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((m.entropy - oracle).abs() < 1e-15);
        assert_eq!((m.a, m.b), (1, -1));

        let t = counts_table(10, 10, 10, 3);
        let m = &entropy_baseline(&t, &[(0, 1)], 1)[0];
        assert!((m.entropy - 3f64.ln()).abs() < 1e-15);
        assert_eq!((m.a, m.b), (-1, -1));

        let t = counts_table(0, 40, 0, 7);
        let m = &entropy_baseline(&t, &[(0, 1)], 1)[0];
        assert_eq!(m.entropy, 0.0);
        assert_eq!((m.a, m.b), (1, 1));
    }

    #[test]
    fn entropy_ranking_and_truncation() {
        let t = AnnotationTable::from_signs(
            (0..4).map(|k| k.to_string()).collect(),
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![1, 1, 1], vec![1, -1, 1], vec![-1, 1, 1], vec![-1, -1, 1]],
        )
        .unwrap();
        let ranked = entropy_baseline(&t, &[(0, 2), (0, 1), (1, 2)], 10);
        assert_eq!(ranked.len(), 3);
        // (0,1) spreads over three cells; (0,2) and (1,2) over two, tied, in input order.
        assert_eq!(ranked.iter().map(|m| m.pair).collect::<Vec<_>>(), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(entropy_baseline(&t, &[(0, 1)], 0).len(), 0);
    }

    #[test]
    fn hand_counted_accuracy_decrease() {
        // 10 samples; columns u, v.
        let truth = [(1, -1), (1, -1), (1, -1), (1, 1), (1, 1), (-1, -1), (-1, -1), (-1, 1), (-1, 1), (1, -1)];
        let preds: Vec<Vec<i8>> = [(1, -1), (-1, 1), (1, 1), (1, 1), (1, -1), (-1, -1), (1, -1), (-1, 1), (-1, -1), (-1, -1)]
            .iter()
            .map(|&(a, b)| vec![a, b])
            .collect();
        let (_, t) = labeled(&truth);
        let e = accuracy_decrease_from_predictions(&preds, &t, (0, 1), (1, -1)).unwrap();
        // u=+1: samples 0,1,2,3,4,9 -> u correct on 0,2,3,4 = 4/6.
        // v=-1: samples 0,1,2,5,6,9 -> v correct on 0,5,6,9 = 4/6.
        // u=+1,v=-1: samples 0,1,2,9 -> u correct 0,2 = 2/4; v correct 0,9 = 2/4.
        assert_eq!(e.acc_ordinary, (4.0 / 6.0 + 4.0 / 6.0) / 2.0);
        assert_eq!(e.acc_mode, 0.5);
        assert_eq!(e.decrease, e.acc_ordinary - e.acc_mode);

        let perfect: Vec<Vec<i8>> = truth.iter().map(|&(a, b)| vec![a, b]).collect();
        let e = accuracy_decrease_from_predictions(&perfect, &t, (0, -1), (1, 1)).unwrap();
        assert_eq!(e.decrease, 0.0);
    }

    #[test]
    fn empty_stratum_is_named() {
        let (_, t) = labeled(&[(1, 1), (-1, -1)]);
        let preds = vec![vec![1, 1], vec![-1, -1]];
        match accuracy_decrease_from_predictions(&preds, &t, (0, 1), (1, -1)) {
            Err(BenchError::EmptyStratum(s)) => assert_eq!(s, "u=+1,v=-1"),
            other => panic!("{other:?}"),
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn rows() -> impl Strategy<Value = Vec<(i8, i8)>> {
            proptest::collection::vec((prop_oneof![Just(1i8), Just(-1i8)], prop_oneof![Just(1i8), Just(-1i8)]), 1..200)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(128))]

            #[test]
            fn bias_removes_exactly_the_rounded_count(rows in rows(), tau in 0.0f64..=1.0, seed in any::<u64>()) {
                let (imgs, t) = labeled(&rows);
                let b = inject_bias(&imgs, &t, &BiasSpec { pair: (0, 1), tau, seed }).unwrap();
                let before = t.cell_counts(0, 1);
                let after = b.table.cell_counts(0, 1);
                let n_opp = before.pos_neg + before.neg_pos;
                let expected = (tau * n_opp as f64 + 0.5).floor() as usize;
                prop_assert_eq!(b.removed.len(), expected);
                prop_assert_eq!(after.pos_pos, before.pos_pos);
                prop_assert_eq!(after.neg_neg, before.neg_neg);
                prop_assert_eq!(after.pos_neg + after.neg_pos, n_opp - expected);
                prop_assert_eq!(b.images.len(), b.table.len());
            }

            #[test]
            fn entropy_ranking_ignores_duplication(
                a in rows(), b in rows(), c in rows(),
            ) {
                let mut all = Vec::new();
                for k in 0..a.len().max(b.len()).max(c.len()) {
                    let pick = |v: &Vec<(i8, i8)>| v[k % v.len()];
                    all.push(vec![pick(&a).0, pick(&a).1, pick(&b).0, pick(&c).1]);
                }
                let names: Vec<String> = (0..4).map(|k| k.to_string()).collect();
                let t = AnnotationTable::from_signs((0..all.len()).map(|k| k.to_string()).collect(), names.clone(), all.clone()).unwrap();
                let doubled: Vec<Vec<i8>> = all.iter().chain(all.iter()).cloned().collect();
                let t2 = AnnotationTable::from_signs((0..doubled.len()).map(|k| k.to_string()).collect(), names, doubled).unwrap();
                let pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
                let r1: Vec<_> = entropy_baseline(&t, &pairs, 6).iter().map(|m| (m.pair, m.a, m.b)).collect();
                let r2: Vec<_> = entropy_baseline(&t2, &pairs, 6).iter().map(|m| (m.pair, m.a, m.b)).collect();
                prop_assert_eq!(r1, r2);
            }
        }
    }
}
