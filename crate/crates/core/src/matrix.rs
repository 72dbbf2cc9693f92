//! Dense and compressed-sparse-column matrices and the dense reference GEMM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::{self, Strided};

/// Storage order of a [`DenseMatrix`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layout {
    RowMajor,
    ColMajor,
}

/// A `rows x cols` float32 matrix in one contiguous buffer with an explicit
/// layout tag. No padding: the buffer holds exactly `rows * cols` values.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    layout: Layout,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, layout: Layout, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidMatrix(format!(
                "buffer holds {} values, {rows}x{cols} needs {}",
                data.len(),
                rows * cols
            )));
        }
        Ok(DenseMatrix {
            rows,
            cols,
            layout,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize, layout: Layout) -> Self {
        DenseMatrix {
            rows,
            cols,
            layout,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, Layout::RowMajor, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        layout: Layout,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Self {
        let mut m = Self::zeros(rows, cols, layout);
        for i in 0..rows {
            for j in 0..cols {
                let idx = m.index(i, j);
                m.data[idx] = f(i, j);
            }
        }
        m
    }

    /// Row-major matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        DenseMatrix {
            rows: rows.len(),
            cols,
            layout: Layout::RowMajor,
            data,
        }
    }

    /// Uniform entries in `[-1, 1)` from a seeded ChaCha8 stream.
    pub fn random(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(rows, cols, &mut rng)
    }

    pub fn random_with<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        DenseMatrix {
            rows,
            cols,
            layout: Layout::RowMajor,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Raw buffer in storage order.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Buffer offset of element `(i, j)`.
    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.rows && j < self.cols);
        match self.layout {
            Layout::RowMajor => i * self.cols + j,
            Layout::ColMajor => j * self.rows + i,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[self.index(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        let idx = self.index(i, j);
        self.data[idx] = v;
    }

    /// `(row stride, col stride)` in buffer elements.
    pub fn strides(&self) -> (usize, usize) {
        match self.layout {
            Layout::RowMajor => (self.cols, 1),
            Layout::ColMajor => (1, self.rows),
        }
    }

    pub(crate) fn view(&self) -> Strided<'_> {
        let (rs, cs) = self.strides();
        Strided {
            data: &self.data,
            offset: 0,
            rows: self.rows,
            cols: self.cols,
            rs,
            cs,
        }
    }

    /// Same logical matrix in the requested storage order.
    pub fn to_layout(&self, layout: Layout) -> DenseMatrix {
        if layout == self.layout {
            return self.clone();
        }
        Self::from_fn(self.rows, self.cols, layout, |i, j| self.get(i, j))
    }

    /// The transpose, always returned row-major.
    ///
    /// Walking a column of `self` becomes walking a contiguous row of the
    /// result. A column-major input is relabelled without copying data.
    pub fn transpose(&self) -> DenseMatrix {
        match self.layout {
            Layout::ColMajor => DenseMatrix {
                rows: self.cols,
                cols: self.rows,
                layout: Layout::RowMajor,
                data: self.data.clone(),
            },
            Layout::RowMajor => {
                let mut out = vec![0.0f32; self.data.len()];
                for (i, row) in self.data.chunks_exact(self.cols.max(1)).enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        out[j * self.rows + i] = v;
                    }
                }
                DenseMatrix {
                    rows: self.cols,
                    cols: self.rows,
                    layout: Layout::RowMajor,
                    data: out,
                }
            }
        }
    }

    /// Logical row `i` as an owned vector.
    pub fn row(&self, i: usize) -> Vec<f32> {
        (0..self.cols).map(|j| self.get(i, j)).collect()
    }

    /// Largest `|self - other|` over all elements, layout independent.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> Result<f32> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let mut worst = 0.0f32;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let d = (self.get(i, j) - other.get(i, j)).abs();
                if d > worst || d.is_nan() {
                    worst = d;
                }
            }
        }
        Ok(worst)
    }

    /// Element-for-element bit equality, ignoring the storage order.
    pub fn bit_eq(&self, other: &DenseMatrix) -> bool {
        if self.shape() != other.shape() {
            return false;
        }
        if self.layout == other.layout {
            return self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        }
        (0..self.rows).all(|i| (0..self.cols).all(|j| self.get(i, j).to_bits() == other.get(i, j).to_bits()))
    }

    pub fn count_zeros(&self) -> usize {
        self.data.iter().filter(|v| **v == 0.0).count()
    }
}

/// Problem size of `C (MxN) = A (MxK) * B (KxN)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GemmShape {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl GemmShape {
    pub fn new(m: usize, k: usize, n: usize) -> Result<Self> {
        if m == 0 || k == 0 || n == 0 {
            return Err(Error::dim("GemmShape", format!("{m}x{k}x{n} has a zero extent")));
        }
        Ok(GemmShape { m, k, n })
    }

    pub fn dense_flops(&self) -> u64 {
        2 * (self.m as u64) * (self.k as u64) * (self.n as u64)
    }
}

/// Dense reference GEMM: `C[i][j] = sum_k A[i][k] * B[k][j]` accumulated in
/// float32 in ascending `k`. The result is row-major.
pub fn gemm_dense(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    gemm_dense_workers(a, b, 1)
}

/// [`gemm_dense`] split over `workers` threads; bit-identical for any count.
pub fn gemm_dense_workers(a: &DenseMatrix, b: &DenseMatrix, workers: usize) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::dim(
            "gemm_dense",
            format!("A is {}x{}, B is {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut c = DenseMatrix::zeros(a.rows, b.cols, Layout::RowMajor);
    kernel::gemm_into_parallel(&a.view(), &b.view(), &mut c.data, workers);
    Ok(c)
}

/// Compressed-sparse-column matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CscMatrix {
    rows: usize,
    cols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f32>,
}

impl CscMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        col_ptr: Vec<usize>,
        row_idx: Vec<usize>,
        values: Vec<f32>,
    ) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidMatrix(msg));
        if col_ptr.len() != cols + 1 {
            return bad(format!("col_ptr has {} entries, expected {}", col_ptr.len(), cols + 1));
        }
        if col_ptr[0] != 0 {
            return bad("col_ptr[0] must be 0".into());
        }
        if row_idx.len() != values.len() || col_ptr[cols] != row_idx.len() {
            return bad(format!(
                "nnz mismatch: col_ptr end {}, {} row indices, {} values",
                col_ptr[cols],
                row_idx.len(),
                values.len()
            ));
        }
        for j in 0..cols {
            let (lo, hi) = (col_ptr[j], col_ptr[j + 1]);
            if lo > hi {
                return bad(format!("col_ptr decreases at column {j}"));
            }
            let col = &row_idx[lo..hi];
            if col.iter().any(|&r| r >= rows) {
                return bad(format!("row index out of range in column {j}"));
            }
            if col.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("row indices not strictly increasing in column {j}"));
            }
        }
        Ok(CscMatrix {
            rows,
            cols,
            col_ptr,
            row_idx,
            values,
        })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        CscMatrix {
            rows,
            cols,
            col_ptr: vec![0; cols + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// `(row, value)` pairs of column `j`.
    pub fn column(&self, j: usize) -> impl Iterator<Item = (usize, f32)> + '_ {
        let (lo, hi) = (self.col_ptr[j], self.col_ptr[j + 1]);
        self.row_idx[lo..hi].iter().copied().zip(self.values[lo..hi].iter().copied())
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.rows, self.cols, Layout::RowMajor);
        for j in 0..self.cols {
            for (i, v) in self.column(j) {
                m.set(i, j, v);
            }
        }
        m
    }
}

/// Collect the elements of `m` for which `keep(i, j, value)` holds.
pub fn to_csc(m: &DenseMatrix, mut keep: impl FnMut(usize, usize, f32) -> bool) -> CscMatrix {
    let mut col_ptr = Vec::with_capacity(m.cols + 1);
    let mut row_idx = Vec::new();
    let mut values = Vec::new();
    col_ptr.push(0);
    for j in 0..m.cols {
        for i in 0..m.rows {
            let v = m.get(i, j);
            if keep(i, j, v) {
                row_idx.push(i);
                values.push(v);
            }
        }
        col_ptr.push(row_idx.len());
    }
    CscMatrix {
        rows: m.rows,
        cols: m.cols,
        col_ptr,
        row_idx,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(a.rows(), b.cols(), Layout::RowMajor, |i, j| {
            let mut s = 0.0f32;
            for p in 0..a.cols() {
                s += a.get(i, p) * b.get(p, j);
            }
            s
        })
    }

    #[test]
    fn identity_and_zero_cases() {
        let b = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, -4.5], &[0.25, 6.0]]);
        assert!(gemm_dense(&DenseMatrix::identity(3), &b).unwrap().bit_eq(&b));
        let z = DenseMatrix::zeros(2, 2, Layout::RowMajor);
        let any = DenseMatrix::random(2, 2, 3);
        assert_eq!(gemm_dense(&z, &any).unwrap().count_zeros(), 4);
    }

    #[test]
    fn random_64_matches_triple_loop_bitwise() {
        let a = DenseMatrix::random(64, 64, 7);
        let b = DenseMatrix::random(64, 64, 8);
        assert!(gemm_dense(&a, &b).unwrap().bit_eq(&naive(&a, &b)));
    }

    #[test]
    fn mixed_layouts_and_identity_on_right() {
        let a = DenseMatrix::random(37, 19, 1).to_layout(Layout::ColMajor);
        let b = DenseMatrix::random(19, 23, 2).to_layout(Layout::ColMajor);
        assert!(gemm_dense(&a, &b).unwrap().bit_eq(&naive(&a, &b)));
        assert!(gemm_dense(&a, &DenseMatrix::identity(19)).unwrap().bit_eq(&a));
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let err = gemm_dense(&DenseMatrix::zeros(2, 3, Layout::RowMajor), &DenseMatrix::zeros(2, 3, Layout::RowMajor));
        assert!(matches!(err, Err(Error::Dimension { .. })));
        assert!(GemmShape::new(0, 1, 1).is_err());
    }

    #[test]
    fn transpose_cases() {
        let one = DenseMatrix::from_rows(&[&[5.0]]);
        assert!(one.transpose().bit_eq(&one));
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let t = m.transpose();
        assert_eq!(t.layout(), Layout::RowMajor);
        assert_eq!(t.data(), &[1.0, 3.0, 2.0, 4.0]);
        let r = DenseMatrix::random(33, 17, 9);
        assert!(r.transpose().transpose().bit_eq(&r));
        let c = r.to_layout(Layout::ColMajor);
        assert!(c.transpose().transpose().bit_eq(&r));
        assert_eq!(c.transpose().data(), c.data());
    }

    #[test]
    fn csc_cases() {
        let m = DenseMatrix::from_rows(&[&[1.0, 0.0], &[2.0, 3.0]]);
        assert_eq!(to_csc(&m, |_, _, _| false).nnz(), 0);
        let all = to_csc(&m, |_, _, _| true);
        assert_eq!(all.nnz(), 4);
        assert!(all.to_dense().bit_eq(&m));

        let r = DenseMatrix::random(50, 50, 11);
        let tau = 0.6;
        let csc = to_csc(&r, |_, _, v| v.abs() > tau);
        let masked = DenseMatrix::from_fn(50, 50, Layout::RowMajor, |i, j| {
            let v = r.get(i, j);
            if v.abs() > tau { v } else { 0.0 }
        });
        assert!(csc.to_dense().bit_eq(&masked));
        // round trip through the validating constructor
        let again = CscMatrix::new(50, 50, csc.col_ptr().to_vec(), csc.row_idx().to_vec(), csc.values().to_vec()).unwrap();
        assert_eq!(again, csc);
    }

    #[test]
    fn csc_validation_rejects_bad_structure() {
        assert!(CscMatrix::new(2, 1, vec![0, 2], vec![1, 0], vec![1.0, 2.0]).is_err());
        assert!(CscMatrix::new(2, 1, vec![0, 1], vec![2], vec![1.0]).is_err());
        assert!(CscMatrix::new(2, 2, vec![0, 1, 0], vec![0], vec![1.0]).is_err());
        assert!(CscMatrix::new(2, 1, vec![1, 1], vec![0], vec![1.0]).is_err());
    }
}
