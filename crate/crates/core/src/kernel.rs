//! Cache-blocked GEMM driver with a fixed `MR x NR` register micro-kernel.
//!
//! Every output element is accumulated with a single `f32` accumulator in
//! ascending `k` order. Between `KC` blocks the partial sum round-trips
//! through the output buffer, which stores exactly the same `f32` value, so
//! results are bit-identical to a naive triple loop regardless of blocking
//! or how rows are split across workers.
//!
//! The dense reference GEMM and the tile-wise sparse path both go through
//! [`gemm_into`], so speed comparisons between them isolate the effect of
//! sparsity.

/// Micro-kernel rows.
pub const MR: usize = 8;
/// Micro-kernel columns.
pub const NR: usize = 8;

const KC: usize = 256;
const MC: usize = 64;
const NC: usize = 256;

/// Left operand of a GEMM, packed on demand into `MR`-tall strips.
pub(crate) trait LhsSource: Sync {
    fn rows(&self) -> usize;
    fn depth(&self) -> usize;
    /// Pack rows `i0..i0+mc`, depth `p0..p0+kc` as consecutive `MR`-row
    /// strips laid out `[strip][p][r]`, zero-padding the last strip.
    fn pack(&self, i0: usize, mc: usize, p0: usize, kc: usize, out: &mut [f32]);
}

/// Right operand of a GEMM, packed on demand into `NR`-wide strips.
pub(crate) trait RhsSource: Sync {
    fn depth(&self) -> usize;
    fn cols(&self) -> usize;
    /// Pack depth `p0..p0+kc`, columns `j0..j0+nc` as consecutive `NR`-col
    /// strips laid out `[strip][p][c]`, zero-padding the last strip.
    fn pack(&self, p0: usize, kc: usize, j0: usize, nc: usize, out: &mut [f32]);
}

/// A strided view: element `(i, j)` lives at `offset + i * rs + j * cs`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strided<'a> {
    pub data: &'a [f32],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Strided<'a> {
    #[inline(always)]
    fn at(&self, i: usize, j: usize) -> f32 {
        self.data[self.offset + i * self.rs + j * self.cs]
    }

    /// Rows `r0..r0+len` of this view.
    pub fn row_slice(&self, r0: usize, len: usize) -> Strided<'a> {
        debug_assert!(r0 + len <= self.rows);
        Strided {
            offset: self.offset + r0 * self.rs,
            rows: len,
            ..*self
        }
    }
}

impl LhsSource for Strided<'_> {
    fn rows(&self) -> usize {
        self.rows
    }

    fn depth(&self) -> usize {
        self.cols
    }

    fn pack(&self, i0: usize, mc: usize, p0: usize, kc: usize, out: &mut [f32]) {
        let strips = mc.div_ceil(MR);
        for s in 0..strips {
            let r0 = i0 + s * MR;
            let live = MR.min(i0 + mc - r0);
            let dst = &mut out[s * MR * kc..(s + 1) * MR * kc];
            if self.rs == 1 && live == MR {
                for p in 0..kc {
                    let base = self.offset + r0 + (p0 + p) * self.cs;
                    dst[p * MR..(p + 1) * MR].copy_from_slice(&self.data[base..base + MR]);
                }
            } else if self.cs == 1 {
                dst.fill(0.0);
                for r in 0..live {
                    let base = self.offset + (r0 + r) * self.rs + p0;
                    for (p, &v) in self.data[base..base + kc].iter().enumerate() {
                        dst[p * MR + r] = v;
                    }
                }
            } else {
                for p in 0..kc {
                    let row = &mut dst[p * MR..(p + 1) * MR];
                    for (r, v) in row.iter_mut().enumerate() {
                        *v = if r < live { self.at(r0 + r, p0 + p) } else { 0.0 };
                    }
                }
            }
        }
    }
}

impl RhsSource for Strided<'_> {
    fn depth(&self) -> usize {
        self.rows
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn pack(&self, p0: usize, kc: usize, j0: usize, nc: usize, out: &mut [f32]) {
        let strips = nc.div_ceil(NR);
        for s in 0..strips {
            let c0 = j0 + s * NR;
            let live = NR.min(j0 + nc - c0);
            let dst = &mut out[s * NR * kc..(s + 1) * NR * kc];
            if self.cs == 1 && live == NR {
                for p in 0..kc {
                    let base = self.offset + (p0 + p) * self.rs + c0;
                    dst[p * NR..(p + 1) * NR].copy_from_slice(&self.data[base..base + NR]);
                }
            } else if self.rs == 1 {
                dst.fill(0.0);
                for c in 0..live {
                    let base = self.offset + (c0 + c) * self.cs + p0;
                    for (p, &v) in self.data[base..base + kc].iter().enumerate() {
                        dst[p * NR + c] = v;
                    }
                }
            } else {
                for p in 0..kc {
                    let row = &mut dst[p * NR..(p + 1) * NR];
                    for (c, v) in row.iter_mut().enumerate() {
                        *v = if c < live { self.at(p0 + p, c0 + c) } else { 0.0 };
                    }
                }
            }
        }
    }
}

/// Several right operands of equal depth placed side by side.
pub(crate) struct ConcatRhs<'a> {
    parts: Vec<Strided<'a>>,
    starts: Vec<usize>,
    depth: usize,
    cols: usize,
}

impl<'a> ConcatRhs<'a> {
    pub fn new(parts: Vec<Strided<'a>>) -> Self {
        let depth = parts.first().map_or(0, |p| p.rows);
        debug_assert!(parts.iter().all(|p| p.rows == depth));
        let mut starts = Vec::with_capacity(parts.len());
        let mut cols = 0;
        for p in &parts {
            starts.push(cols);
            cols += p.cols;
        }
        ConcatRhs {
            parts,
            starts,
            depth,
            cols,
        }
    }

    #[inline]
    fn locate(&self, j: usize) -> (usize, usize) {
        let part = self.starts.partition_point(|&s| s <= j) - 1;
        (part, j - self.starts[part])
    }
}

impl RhsSource for ConcatRhs<'_> {
    fn depth(&self) -> usize {
        self.depth
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn pack(&self, p0: usize, kc: usize, j0: usize, nc: usize, out: &mut [f32]) {
        let strips = nc.div_ceil(NR);
        for s in 0..strips {
            let c0 = j0 + s * NR;
            let live = NR.min(j0 + nc - c0);
            let dst = &mut out[s * NR * kc..(s + 1) * NR * kc];
            for c in 0..NR {
                if c >= live {
                    for p in 0..kc {
                        dst[p * NR + c] = 0.0;
                    }
                    continue;
                }
                let (part, local) = self.locate(c0 + c);
                let src = &self.parts[part];
                for p in 0..kc {
                    dst[p * NR + c] = src.at(p0 + p, local);
                }
            }
        }
    }
}

#[inline(always)]
fn micro_kernel(kc: usize, a: &[f32], b: &[f32], acc: &mut [[f32; NR]; MR]) {
    let a = &a[..kc * MR];
    let b = &b[..kc * NR];
    for (ap, bp) in a.chunks_exact(MR).zip(b.chunks_exact(NR)) {
        let ap: &[f32; MR] = ap.try_into().unwrap();
        let bp: &[f32; NR] = bp.try_into().unwrap();
        for i in 0..MR {
            let ai = ap[i];
            for j in 0..NR {
                acc[i][j] += ai * bp[j];
            }
        }
    }
}

/// `C += A * B` where `C` is row-major with leading dimension `ldc`.
///
/// With `C` zeroed on entry the result equals the naive ascending-`k`
/// float32 sum bit for bit.
pub(crate) fn gemm_into<L: LhsSource + ?Sized, R: RhsSource + ?Sized>(
    lhs: &L,
    rhs: &R,
    c: &mut [f32],
    ldc: usize,
) {
    let m = lhs.rows();
    let k = lhs.depth();
    let n = rhs.cols();
    debug_assert_eq!(k, rhs.depth());
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(c.len() >= (m - 1) * ldc + n);

    let kc_max = KC.min(k);
    let mut bpack = vec![0.0f32; NC.min(n).div_ceil(NR) * NR * kc_max];
    let mut apack = vec![0.0f32; MC.min(m).div_ceil(MR) * MR * kc_max];

    for jc in (0..n).step_by(NC) {
        let nc = NC.min(n - jc);
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            rhs.pack(pc, kc, jc, nc, &mut bpack);
            for ic in (0..m).step_by(MC) {
                let mc = MC.min(m - ic);
                lhs.pack(ic, mc, pc, kc, &mut apack);
                for (js, bstrip) in bpack.chunks_exact(NR * kc).take(nc.div_ceil(NR)).enumerate() {
                    let col = jc + js * NR;
                    let ncols = NR.min(n - col);
                    for (is, astrip) in apack.chunks_exact(MR * kc).take(mc.div_ceil(MR)).enumerate() {
                        let row = ic + is * MR;
                        let nrows = MR.min(m - row);
                        let mut acc = [[0.0f32; NR]; MR];
                        for (r, acc_row) in acc.iter_mut().enumerate().take(nrows) {
                            let base = (row + r) * ldc + col;
                            acc_row[..ncols].copy_from_slice(&c[base..base + ncols]);
                        }
                        micro_kernel(kc, astrip, bstrip, &mut acc);
                        for (r, acc_row) in acc.iter().enumerate().take(nrows) {
                            let base = (row + r) * ldc + col;
                            c[base..base + ncols].copy_from_slice(&acc_row[..ncols]);
                        }
                    }
                }
            }
        }
    }
}

/// Row-parallel [`gemm_into`] for a full `M x N` row-major output.
///
/// Each worker owns a contiguous band of output rows, so the per-element
/// reduction order is the same for any worker count.
pub(crate) fn gemm_into_parallel<R: RhsSource>(
    lhs: &Strided<'_>,
    rhs: &R,
    c: &mut [f32],
    workers: usize,
) {
    let m = lhs.rows;
    let n = rhs.cols();
    let workers = workers.max(1);
    if workers == 1 || m <= MR {
        gemm_into(lhs, rhs, c, n);
        return;
    }
    let band = m.div_ceil(workers).div_ceil(MR) * MR;
    std::thread::scope(|scope| {
        for (w, chunk) in c.chunks_mut(band * n).enumerate() {
            let rows = chunk.len() / n;
            let sub = lhs.row_slice(w * band, rows);
            scope.spawn(move || gemm_into(&sub, rhs, chunk, n));
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn seq(len: usize, scale: f32) -> Vec<f32> {
        (0..len)
            .map(|i| ((i * 7919 % 1013) as f32 / 1013.0 - 0.5) * scale)
            .collect()
    }

    fn row_major(data: &[f32], rows: usize, cols: usize) -> Strided<'_> {
        Strided {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    #[test]
    fn odd_shapes_match_naive_bitwise() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (9, 300, 17), (70, 257, 1030), (8, 8, 8)] {
            let a = seq(m * k, 2.0);
            let b = seq(k * n, 3.0);
            let mut c = vec![0.0; m * n];
            gemm_into(&row_major(&a, m, k), &row_major(&b, k, n), &mut c, n);
            let expect = naive(&a, &b, m, k, n);
            assert!(c.iter().zip(&expect).all(|(x, y)| x.to_bits() == y.to_bits()), "{m}x{k}x{n}");
        }
    }

    #[test]
    fn column_major_operands_and_concat() {
        let (m, k, n) = (13, 40, 21);
        let a = seq(m * k, 1.0);
        let b = seq(k * n, 1.0);
        // transposed copies so the views are column-major
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let lhs = Strided { data: &at, offset: 0, rows: m, cols: k, rs: 1, cs: m };
        let left = Strided { data: &bt, offset: 0, rows: k, cols: 10, rs: 1, cs: k };
        let right = Strided { data: &bt, offset: 10 * k, rows: k, cols: 11, rs: 1, cs: k };
        let rhs = ConcatRhs::new(vec![left, right]);
        let mut c = vec![0.0; m * n];
        gemm_into(&lhs, &rhs, &mut c, n);
        assert_eq!(c, naive(&a, &b, m, k, n));
    }

    #[test]
    fn parallel_split_is_bitwise_identical() {
        let (m, k, n) = (77, 129, 45);
        let a = seq(m * k, 1.0);
        let b = seq(k * n, 1.0);
        let lhs = row_major(&a, m, k);
        let rhs = row_major(&b, k, n);
        let mut one = vec![0.0; m * n];
        gemm_into_parallel(&lhs, &rhs, &mut one, 1);
        for workers in [2, 3, 8] {
            let mut many = vec![0.0; m * n];
            gemm_into_parallel(&lhs, &rhs, &mut many, workers);
            assert_eq!(one, many);
        }
    }
}
