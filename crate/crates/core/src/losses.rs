//! Loss terms: voxel cross-entropy, InfoNCE, consistency MSE, the combined
//! objective and the ramp-up weight.

use secl_autodiff::{pairwise_cosine, Graph, NodeId, Scalar};
use thiserror::Error;

use crate::data::LabelMap;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("anchor {anchor} has an empty negative set")]
    EmptyNegatives { anchor: usize },
    #[error("{a} lists {b} as positive but not the reverse")]
    AsymmetricPositive { a: usize, b: usize },
    #[error("anchor {anchor}: index {index} is both excluded and listed as negative")]
    NegativeOverlap { anchor: usize, index: usize },
    #[error("index {index} out of range for {views} views")]
    IndexOutOfRange { index: usize, views: usize },
    #[error("batch has no anchor with a positive")]
    NoAnchors,
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("epoch {t} outside [0, {t_max}]")]
    RampOutOfRange { t: f64, t_max: f64 },
}

/// Positive and negative index sets over `n` views.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSets {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

impl PairSets {
    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    /// Checks symmetry of positives, exclusion of the anchor and its
    /// positives from its negatives, and non-empty negatives for every anchor.
    pub fn validate(&self) -> Result<(), LossError> {
        let n = self.positives.len();
        assert_eq!(n, self.negatives.len(), "positive and negative lists differ in length");
        let mut anchors = 0;
        for a in 0..n {
            for &p in &self.positives[a] {
                if p >= n {
                    return Err(LossError::IndexOutOfRange { index: p, views: n });
                }
                if p == a || !self.positives[p].contains(&a) {
                    return Err(LossError::AsymmetricPositive { a, b: p });
                }
            }
            for &l in &self.negatives[a] {
                if l >= n {
                    return Err(LossError::IndexOutOfRange { index: l, views: n });
                }
                if l == a || self.positives[a].contains(&l) {
                    return Err(LossError::NegativeOverlap { anchor: a, index: l });
                }
            }
            if !self.positives[a].is_empty() {
                anchors += 1;
                if self.negatives[a].is_empty() {
                    return Err(LossError::EmptyNegatives { anchor: a });
                }
            }
        }
        if anchors == 0 {
            return Err(LossError::NoAnchors);
        }
        Ok(())
    }

    /// `(anchor, positive)` rows; a multi-positive anchor contributes one row per positive.
    pub fn rows(&self) -> Vec<(usize, usize)> {
        (0..self.len())
            .flat_map(|a| self.positives[a].iter().map(move |&p| (a, p)))
            .collect()
    }
}

/// Mean voxel cross-entropy of `logits: [C, D, H, W]` against `labels`.
/// Panics if shapes disagree or a label is not below `C`.
pub fn supervised_loss<T: Scalar>(g: &mut Graph<T>, logits: NodeId, labels: &LabelMap) -> NodeId {
    let s = g.shape(logits).to_vec();
    assert!(
        s.len() == 4 && s[1..] == labels.extents,
        "supervised_loss: logits {s:?} vs labels {:?}",
        labels.extents
    );
    let (c, n) = (s[0], labels.data.len());
    let index = labels
        .data
        .iter()
        .enumerate()
        .map(|(v, &l)| {
            assert!((l as usize) < c, "supervised_loss: label {l} not below {c} classes");
            l as usize * n + v
        })
        .collect();
    let logp = g.log_softmax(logits, 0);
    let picked = g.gather(logp, index);
    let m = g.mean(picked);
    g.scale(m, T::of(-1.0))
}

/// InfoNCE over the rows of `z: [n, d]`, averaged over all
/// `(anchor, positive)` rows of `pairs`.
pub fn info_nce<T: Scalar>(g: &mut Graph<T>, z: NodeId, pairs: &PairSets, tau: f64) -> Result<NodeId, LossError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(LossError::InvalidTemperature(tau));
    }
    let n = g.shape(z)[0];
    assert_eq!(n, pairs.len(), "info_nce: {n} embeddings for {} views", pairs.len());
    pairs.validate()?;
    let sim = pairwise_cosine(g, z);
    let logits = g.scale(sim, T::of(1.0 / tau));

    // Rows are grouped by width so each group is one [r, width] log-softmax.
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    let rows = pairs.rows();
    for (a, p) in &rows {
        let idx = groups.entry(1 + pairs.negatives[*a].len()).or_default();
        idx.push(a * n + p);
        idx.extend(pairs.negatives[*a].iter().map(|&l| a * n + l));
    }
    let mut total: Option<NodeId> = None;
    for (width, idx) in groups {
        let r = idx.len() / width;
        let picked = g.gather(logits, idx);
        let mat = g.reshape(picked, &[r, width]);
        let logp = g.log_softmax(mat, 1);
        let pos = g.gather(logp, (0..r).map(|i| i * width).collect());
        let s = g.sum(pos);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    let total = total.expect("validated batch has rows");
    Ok(g.scale(total, T::of(-1.0 / rows.len() as f64)))
}

/// Softmax along `axis`, as `exp(log_softmax)`.
pub fn softmax<T: Scalar>(g: &mut Graph<T>, x: NodeId, axis: usize) -> NodeId {
    let l = g.log_softmax(x, axis);
    g.exp(l)
}

/// Mean squared difference of two probability tensors.
pub fn consistency_mse<T: Scalar>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> NodeId {
    let d = g.sub(a, b);
    let sq = g.mul(d, d);
    g.mean(sq)
}

/// `(1/N')·ΣL_s + λ·(1/M')·ΣL_c`; an empty contrastive list contributes nothing.
pub fn combined_objective<T: Scalar>(g: &mut Graph<T>, sup: &[NodeId], con: &[NodeId], lambda: f64) -> NodeId {
    assert!(!sup.is_empty(), "combined_objective: no supervised terms");
    let mean_of = |g: &mut Graph<T>, xs: &[NodeId]| {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = g.add(acc, x);
        }
        g.scale(acc, T::of(1.0 / xs.len() as f64))
    };
    let s = mean_of(g, sup);
    if con.is_empty() {
        return s;
    }
    let c = mean_of(g, con);
    let c = g.scale(c, T::of(lambda));
    g.add(s, c)
}

/// `λ(t) = peak · exp(−5 (1 − t/t_max)²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RampUpSchedule {
    pub t_max: f64,
    pub peak: f64,
}

impl RampUpSchedule {
    pub const PEAK: f64 = 0.1;

    pub fn new(t_max: f64) -> Self {
        Self { t_max, peak: Self::PEAK }
    }
}

pub fn rampup_lambda(t: f64, schedule: &RampUpSchedule) -> Result<f64, LossError> {
    let t_max = schedule.t_max;
    if !(t_max > 0.0) || !(0.0..=t_max).contains(&t) {
        return Err(LossError::RampOutOfRange { t, t_max });
    }
    let r = 1.0 - t / t_max;
    Ok(schedule.peak * (-5.0 * r * r).exp())
}
