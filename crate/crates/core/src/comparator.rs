//! Element-, vector- and block-wise comparator masks, and zero-capture
//! statistics that show how many pruned elements each unit shape absorbs.

use crate::error::{Error, Result};
use crate::mask::KeepMask;
use crate::score::{floor_count, rank_ascending, ScoreMap};

/// Default vector length for vector-wise masks.
pub const DEFAULT_VECTOR_LEN: usize = 16;
/// Default block edge for block-wise masks.
pub const DEFAULT_BLOCK_EDGE: usize = 32;

/// Comparator sparsity pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Globally lowest-scored elements.
    ElementWise,
    /// Each column is cut into vectors of `len` rows; every vector loses
    /// its `floor(s * len)` lowest elements.
    VectorWise { len: usize },
    /// `edge x edge` blocks ranked globally by mean score.
    BlockWise { edge: usize },
}

impl MaskKind {
    pub fn vector_wise() -> Self {
        MaskKind::VectorWise {
            len: DEFAULT_VECTOR_LEN,
        }
    }

    pub fn block_wise() -> Self {
        MaskKind::BlockWise {
            edge: DEFAULT_BLOCK_EDGE,
        }
    }
}

pub fn generate_comparator_mask(kind: MaskKind, scores: &ScoreMap, sparsity: f64) -> Result<KeepMask> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Config(format!("sparsity {sparsity} outside [0, 1)")));
    }
    let (rows, cols) = (scores.rows(), scores.cols());
    match kind {
        MaskKind::ElementWise => {
            let flat: Vec<f64> = (0..rows * cols)
                .map(|idx| scores.get(idx / cols, idx % cols) as f64)
                .collect();
            let mut mask = KeepMask::all(rows, cols, true);
            for &idx in rank_ascending(&flat).iter().take(floor_count(sparsity, flat.len())) {
                mask.set(idx / cols, idx % cols, false);
            }
            Ok(mask)
        }
        MaskKind::VectorWise { len } => {
            if len == 0 || rows % len != 0 {
                return Err(Error::Config(format!("vector length {len} must divide {rows} rows")));
            }
            let prune = floor_count(sparsity, len);
            let mut mask = KeepMask::all(rows, cols, true);
            for j in 0..cols {
                for v in (0..rows).step_by(len) {
                    let vec: Vec<f64> = (v..v + len).map(|i| scores.get(i, j) as f64).collect();
                    for &r in rank_ascending(&vec).iter().take(prune) {
                        mask.set(v + r, j, false);
                    }
                }
            }
            Ok(mask)
        }
        MaskKind::BlockWise { edge } => {
            if edge == 0 || rows % edge != 0 || cols % edge != 0 {
                return Err(Error::Config(format!("block edge {edge} must divide {rows}x{cols}")));
            }
            let (br, bc) = (rows / edge, cols / edge);
            let means: Vec<f64> = (0..br * bc)
                .map(|b| {
                    let (r0, c0) = (b / bc * edge, b % bc * edge);
                    let mut sum = 0.0f64;
                    for i in r0..r0 + edge {
                        for j in c0..c0 + edge {
                            sum += scores.get(i, j) as f64;
                        }
                    }
                    sum / (edge * edge) as f64
                })
                .collect();
            let mut mask = KeepMask::all(rows, cols, true);
            for &b in rank_ascending(&means).iter().take(floor_count(sparsity, means.len())) {
                let (r0, c0) = (b / bc * edge, b % bc * edge);
                for i in r0..r0 + edge {
                    for j in c0..c0 + edge {
                        mask.set(i, j, false);
                    }
                }
            }
            Ok(mask)
        }
    }
}

/// Distribution of pruned-element counts over all units of one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroCapture {
    /// Unit `(height, width)`.
    pub shape: (usize, usize),
    pub units: usize,
    /// `histogram[z]` = units containing exactly `z` pruned elements.
    pub histogram: Vec<usize>,
    /// `cdf[z]` = fraction of units containing at most `z` pruned elements.
    pub cdf: Vec<f64>,
}

impl ZeroCapture {
    pub fn unit_size(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn mean_zeros(&self) -> f64 {
        if self.units == 0 {
            return 0.0;
        }
        let total: usize = self.histogram.iter().enumerate().map(|(z, c)| z * c).sum();
        total as f64 / self.units as f64
    }

    pub fn fully_zero_fraction(&self) -> f64 {
        if self.units == 0 {
            return 0.0;
        }
        self.histogram[self.unit_size()] as f64 / self.units as f64
    }

    /// Largest `cdf_self[z] - cdf_other[z]` over the shared range. Zero or
    /// less means `self` captures at least as many zeros as `other` at every
    /// point of the distribution.
    pub fn max_excess_over(&self, other: &ZeroCapture) -> f64 {
        self.cdf
            .iter()
            .zip(&other.cdf)
            .map(|(a, b)| a - b)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Count pruned elements in every full `h x w` unit tiling the mask from the
/// top-left corner; ragged edge units are skipped.
pub fn zero_capture_analysis(mask: &KeepMask, shapes: &[(usize, usize)]) -> Result<Vec<ZeroCapture>> {
    shapes
        .iter()
        .map(|&(h, w)| {
            if h == 0 || w == 0 {
                return Err(Error::Config(format!("unit shape {h}x{w} is empty")));
            }
            let size = h * w;
            let mut histogram = vec![0usize; size + 1];
            let (ur, uc) = (mask.rows() / h, mask.cols() / w);
            for u in 0..ur * uc {
                let (r0, c0) = (u / uc * h, u % uc * w);
                let mut zeros = 0;
                for i in r0..r0 + h {
                    for j in c0..c0 + w {
                        zeros += usize::from(!mask.get(i, j));
                    }
                }
                histogram[zeros] += 1;
            }
            let units = ur * uc;
            let mut acc = 0usize;
            let cdf = histogram
                .iter()
                .map(|&c| {
                    acc += c;
                    if units == 0 {
                        0.0
                    } else {
                        acc as f64 / units as f64
                    }
                })
                .collect();
            Ok(ZeroCapture {
                shape: (h, w),
                units,
                histogram,
                cdf,
            })
        })
        .collect()
}
