//! Importance scores and unit ranking.
//!
//! The importance of a weight is the first-order estimate of the loss change
//! caused by zeroing it, `|dL/dw * w|`. Groups of weights ("units") are
//! scored by the mean of their members and ranked ascending with ties broken
//! by ascending unit index, which makes every selection deterministic.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::matrix::{DenseMatrix, Layout};

/// Nonnegative per-element importance scores, shaped like their weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap(DenseMatrix);

impl ScoreMap {
    pub fn new(m: DenseMatrix) -> Result<Self> {
        if let Some(v) = m.data().iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidMatrix(format!("importance scores must be >= 0, found {v}")));
        }
        Ok(ScoreMap(m))
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.0.get(i, j)
    }

    /// Copy with every element outside `keep` set to zero.
    pub fn masked(&self, keep: &crate::mask::KeepMask) -> Result<ScoreMap> {
        Ok(ScoreMap(keep.apply(&self.0)?))
    }
}

/// `score[i][j] = |grad[i][j] * w[i][j]|`.
pub fn importance_scores(w: &DenseMatrix, grad: &DenseMatrix) -> Result<ScoreMap> {
    if w.shape() != grad.shape() {
        return Err(Error::dim(
            "importance_scores",
            format!("weights {:?}, gradient {:?}", w.shape(), grad.shape()),
        ));
    }
    Ok(ScoreMap(DenseMatrix::from_fn(w.rows(), w.cols(), Layout::RowMajor, |i, j| {
        (grad.get(i, j) * w.get(i, j)).abs()
    })))
}

/// Magnitude-only fallback: `score = |w|`.
pub fn magnitude_scores(w: &DenseMatrix) -> ScoreMap {
    ScoreMap(DenseMatrix::from_fn(w.rows(), w.cols(), Layout::RowMajor, |i, j| {
        w.get(i, j).abs()
    }))
}

/// Mean member score of each unit. Units are lists of `(row, col)`.
pub fn tile_scores(scores: &ScoreMap, units: &[Vec<(usize, usize)>]) -> Result<Vec<f64>> {
    units
        .iter()
        .enumerate()
        .map(|(u, members)| {
            if members.is_empty() {
                return Err(Error::Config(format!("unit {u} is empty")));
            }
            let sum: f64 = members.iter().map(|&(i, j)| scores.get(i, j) as f64).sum();
            Ok(sum / members.len() as f64)
        })
        .collect()
}

/// `floor(fraction * len)`, treating products within 1e-9 of an integer as
/// that integer so that e.g. `0.3 * 10` counts 3.
pub fn floor_count(fraction: f64, len: usize) -> usize {
    let x = fraction * len as f64;
    let r = x.round();
    let n = if (x - r).abs() < 1e-9 { r } else { x.floor() };
    (n.max(0.0) as usize).min(len)
}

/// `ceil(fraction * len)` with the same near-integer snapping.
pub fn ceil_count(fraction: f64, len: usize) -> usize {
    let x = fraction * len as f64;
    let r = x.round();
    let n = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (n.max(0.0) as usize).min(len)
}

/// Ascending order of `(score, index)`.
pub(crate) fn cmp_unit(a: (f64, usize), b: (f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Unit indices sorted ascending by score, ties by index.
pub fn rank_ascending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| cmp_unit((scores[a], a), (scores[b], b)));
    order
}

/// A rank cut-off: units ordered strictly before `(score, index)` are pruned.
#[derive(Clone, Debug, PartialEq)]
pub struct Percentile {
    /// Score of the first surviving unit (`+inf` when every unit is pruned).
    pub threshold: f64,
    /// Index of the first surviving unit, used to break score ties.
    pub threshold_index: usize,
    /// Pruned units in rank order; exactly `floor(fraction * len)` of them.
    pub pruned: Vec<usize>,
}

impl Percentile {
    /// Whether a unit with this score and index falls below the cut-off.
    pub fn is_below(&self, score: f64, index: usize) -> bool {
        cmp_unit((score, index), (self.threshold, self.threshold_index)) == Ordering::Less
    }
}

/// Cut-off that prunes exactly `floor(fraction * len)` units.
pub fn percentile_threshold(unit_scores: &[f64], fraction: f64) -> Result<Percentile> {
    if unit_scores.is_empty() {
        return Err(Error::Config("percentile of an empty score list".into()));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("percentile fraction {fraction} outside [0, 1)")));
    }
    let order = rank_ascending(unit_scores);
    let count = floor_count(fraction, unit_scores.len());
    let first_kept = order[count];
    Ok(Percentile {
        threshold: unit_scores[first_kept],
        threshold_index: first_kept,
        pruned: order[..count].to_vec(),
    })
}
