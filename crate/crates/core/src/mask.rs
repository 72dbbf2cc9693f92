//! Bit-packed row masks and element keep-masks.

use crate::error::{Error, Result};
use crate::matrix::{DenseMatrix, Layout};

/// A keep/prune bit per row, packed into little-endian `u32` words.
///
/// Row `r` lives in word `r / 32`, bit `r % 32`; a set bit means keep.
/// Bits past `len` in the final word are always zero.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RowMask {
    len: usize,
    words: Vec<u32>,
}

impl RowMask {
    pub fn words_for(len: usize) -> usize {
        len.div_ceil(32)
    }

    pub fn full(len: usize) -> Self {
        let mut words = vec![u32::MAX; Self::words_for(len)];
        if !len.is_multiple_of(32) {
            if let Some(last) = words.last_mut() {
                *last = (1u32 << (len % 32)) - 1;
            }
        }
        RowMask { len, words }
    }

    pub fn empty(len: usize) -> Self {
        RowMask {
            len,
            words: vec![0; Self::words_for(len)],
        }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut m = Self::empty(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            m.set(i, b);
        }
        m
    }

    /// Mask keeping exactly the listed rows.
    pub fn from_kept(len: usize, kept: &[usize]) -> Result<Self> {
        let mut m = Self::empty(len);
        for &r in kept {
            if r >= len {
                return Err(Error::InvalidPattern(format!("row {r} out of range {len}")));
            }
            m.set(r, true);
        }
        Ok(m)
    }

    pub fn from_words(len: usize, words: Vec<u32>) -> Result<Self> {
        if words.len() != Self::words_for(len) {
            return Err(Error::InvalidPattern(format!(
                "{} mask words for {len} rows, expected {}",
                words.len(),
                Self::words_for(len)
            )));
        }
        if !len.is_multiple_of(32) {
            let last = *words.last().unwrap();
            if last >> (len % 32) != 0 {
                return Err(Error::InvalidPattern("mask bits set past the row count".into()));
            }
        }
        Ok(RowMask { len, words })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    #[inline]
    pub fn get(&self, r: usize) -> bool {
        self.words[r / 32] >> (r % 32) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, r: usize, keep: bool) {
        assert!(r < self.len, "row {r} out of range {}", self.len);
        if keep {
            self.words[r / 32] |= 1 << (r % 32);
        } else {
            self.words[r / 32] &= !(1 << (r % 32));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_full(&self) -> bool {
        self.count_ones() == self.len
    }

    /// Indices of kept rows in ascending order.
    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(w, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(w * 32 + b)
            })
        })
    }
}

/// Element-level keep mask over a `rows x cols` matrix (row-major).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeepMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl KeepMask {
    pub fn all(rows: usize, cols: usize, keep: bool) -> Self {
        KeepMask {
            rows,
            cols,
            keep: vec![keep; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut keep = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                keep.push(f(i, j));
            }
        }
        KeepMask { rows, cols, keep }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, keep: bool) {
        self.keep[i * self.cols + j] = keep;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    pub fn pruned(&self) -> usize {
        self.keep.len() - self.kept()
    }

    /// Fraction of pruned elements; zero for an empty mask.
    pub fn sparsity(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        self.pruned() as f64 / self.keep.len() as f64
    }

    /// Elements kept by both masks.
    pub fn intersect(&self, other: &KeepMask) -> Result<KeepMask> {
        self.check_shape(other.rows, other.cols)?;
        Ok(KeepMask {
            rows: self.rows,
            cols: self.cols,
            keep: self.keep.iter().zip(&other.keep).map(|(a, b)| *a && *b).collect(),
        })
    }

    /// True when every element kept by `self` is also kept by `other`.
    pub fn is_subset_of(&self, other: &KeepMask) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.keep.iter().zip(&other.keep).all(|(a, b)| !*a || *b)
    }

    /// Copy of `m` with pruned entries set to zero.
    pub fn apply(&self, m: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_shape(m.rows(), m.cols())?;
        Ok(DenseMatrix::from_fn(m.rows(), m.cols(), Layout::RowMajor, |i, j| {
            if self.get(i, j) {
                m.get(i, j)
            } else {
                0.0
            }
        }))
    }

    /// Zero pruned entries of `m` in place.
    pub fn apply_in_place(&self, m: &mut DenseMatrix) -> Result<()> {
        self.check_shape(m.rows(), m.cols())?;
        for i in 0..self.rows {
            for j in 0..self.cols {
                if !self.get(i, j) {
                    m.set(i, j, 0.0);
                }
            }
        }
        Ok(())
    }

    fn check_shape(&self, rows: usize, cols: usize) -> Result<()> {
        if (rows, cols) != (self.rows, self.cols) {
            return Err(Error::dim(
                "KeepMask",
                format!("mask is {}x{}, operand is {rows}x{cols}", self.rows, self.cols),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_mask_bits_are_little_endian_words() {
        let m = RowMask::from_kept(40, &[0, 2, 31, 32, 39]).unwrap();
        assert_eq!(m.words(), &[0x8000_0005, 0x81]);
        assert_eq!(m.iter_ones().collect::<Vec<_>>(), vec![0, 2, 31, 32, 39]);
        assert_eq!(m.count_ones(), 5);
        assert_eq!(RowMask::full(33).words(), &[u32::MAX, 1]);
        assert_eq!(RowMask::full(64).words(), &[u32::MAX, u32::MAX]);
        assert!(RowMask::from_words(33, vec![0, 2]).is_err());
        assert!(RowMask::from_words(33, vec![0]).is_err());
    }

    #[test]
    fn keep_mask_set_ops() {
        let a = KeepMask::from_fn(2, 3, |i, j| (i + j) % 2 == 0);
        let b = KeepMask::all(2, 3, true);
        assert!(a.is_subset_of(&b));
        assert!(!b.is_subset_of(&a));
        assert_eq!(a.intersect(&b).unwrap(), a);
        assert_eq!(a.pruned(), 3);
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert_eq!(a.apply(&m).unwrap().data(), &[1.0, 0.0, 3.0, 0.0, 5.0, 0.0]);
    }
}
