//! Tile-wise sparse GEMM: every surviving tile runs as a small dense GEMM
//! over its kept rows, with `A` gathered once per distinct row mask.
//!
//! `A` is transposed first so that skipping rows of a tile's `B` becomes
//! skipping contiguous rows of `A^T` — the gather is a sequence of row
//! copies instead of a strided column walk.

use std::borrow::Cow;
use std::collections::HashMap;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::kernel::{self, ConcatRhs, Strided};
use crate::mask::RowMask;
use crate::matrix::{CscMatrix, DenseMatrix, Layout};
use crate::pattern::CompactTileSet;
use crate::pool;

/// Rows of a row-major `A^T` (`K x M`) kept by `mask`.
///
/// A full mask borrows the input unchanged; otherwise the kept rows are
/// copied, in order, into a fresh `k_i x M` row-major matrix.
pub fn gather_rows<'a>(at: &'a DenseMatrix, mask: &RowMask) -> Result<Cow<'a, DenseMatrix>> {
    if mask.len() != at.rows() {
        return Err(Error::dim(
            "gather_rows",
            format!("mask of {} rows for a {}-row matrix", mask.len(), at.rows()),
        ));
    }
    if mask.is_full() {
        return Ok(Cow::Borrowed(at));
    }
    let m = at.cols();
    let mut data = Vec::with_capacity(mask.count_ones() * m);
    match at.layout() {
        Layout::RowMajor => {
            for r in mask.iter_ones() {
                data.extend_from_slice(&at.data()[r * m..(r + 1) * m]);
            }
        }
        Layout::ColMajor => {
            for r in mask.iter_ones() {
                data.extend((0..m).map(|c| at.get(r, c)));
            }
        }
    }
    DenseMatrix::new(mask.count_ones(), m, Layout::RowMajor, data).map(Cow::Owned)
}

/// Gathered `A^T` row sets, one per distinct tile row mask.
#[derive(Debug)]
pub struct GatheredA<'a> {
    m: usize,
    slots: Vec<Cow<'a, DenseMatrix>>,
}

impl GatheredA<'_> {
    /// Output rows `M`.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Distinct gathers performed (borrowed full-mask views included).
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Gathers that had to copy.
    pub fn copies(&self) -> usize {
        self.slots.iter().filter(|s| matches!(s, Cow::Owned(_))).count()
    }

    /// `A` restricted to slot `s`'s kept `k` indices, as an `M x k_i` view.
    fn lhs(&self, s: usize) -> Strided<'_> {
        let at = &self.slots[s];
        Strided {
            data: at.data(),
            offset: 0,
            rows: self.m,
            cols: at.rows(),
            rs: 1,
            cs: self.m,
        }
    }
}

/// One output tile: `C[:, col_ids] = A[:, kept] * b`.
#[derive(Clone, Copy, Debug)]
pub struct TileTask<'a> {
    /// Position in the compacted tile set.
    pub tile: usize,
    /// Slot of the gathered `A` rows in [`GatheredA`].
    pub a_slot: usize,
    /// Compact `k_i x n_i` weights, column-major.
    pub b: &'a DenseMatrix,
    pub col_ids: &'a [usize],
}

impl TileTask<'_> {
    pub fn k(&self) -> usize {
        self.b.rows()
    }

    pub fn n(&self) -> usize {
        self.b.cols()
    }

    /// `2 * M * k_i * n_i`.
    pub fn flops(&self, m: usize) -> u64 {
        2 * m as u64 * self.k() as u64 * self.n() as u64
    }
}

/// Tasks with the same output width `n_i`.
///
/// Tiles of equal width can be stacked along `N`; members that also share a
/// row mask share a gathered `A` and run as one GEMM.
#[derive(Clone, Debug)]
pub struct BatchGroup<'a> {
    pub n: usize,
    pub tasks: Vec<TileTask<'a>>,
}

impl BatchGroup<'_> {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn flops(&self, m: usize) -> u64 {
        self.tasks.iter().map(|t| t.flops(m)).sum()
    }
}

/// Gather `A` for every tile and build one task per tile with kept rows.
///
/// Tiles whose rows were all pruned contribute nothing and get no task.
pub fn plan_tasks<'a>(at: &'a DenseMatrix, tiles: &'a CompactTileSet) -> Result<(GatheredA<'a>, Vec<TileTask<'a>>)> {
    if at.rows() != tiles.k() {
        return Err(Error::dim(
            "gemm_tw",
            format!("A has {} columns, weights have K = {}", at.rows(), tiles.k()),
        ));
    }
    let mut slot_of: HashMap<&RowMask, usize> = HashMap::new();
    let mut slots = Vec::new();
    let mut tasks = Vec::new();
    for (i, tile) in tiles.tiles().iter().enumerate() {
        if tile.kept_rows() == 0 || tile.width() == 0 {
            continue;
        }
        let a_slot = match slot_of.get(&tile.row_mask) {
            Some(&s) => s,
            None => {
                slots.push(gather_rows(at, &tile.row_mask)?);
                slot_of.insert(&tile.row_mask, slots.len() - 1);
                slots.len() - 1
            }
        };
        tasks.push(TileTask {
            tile: i,
            a_slot,
            b: &tile.sub,
            col_ids: &tile.col_ids,
        });
    }
    Ok((GatheredA { m: at.cols(), slots }, tasks))
}

/// Partition tasks by width `n_i`, largest total work first (ties by the
/// first member's tile index). Members keep their input order.
pub fn group_by_shape<'a>(tasks: &[TileTask<'a>]) -> Vec<BatchGroup<'a>> {
    let mut groups: Vec<BatchGroup<'a>> = Vec::new();
    for task in tasks {
        match groups.iter_mut().find(|g| g.n == task.n()) {
            Some(g) => g.tasks.push(*task),
            None => groups.push(BatchGroup {
                n: task.n(),
                tasks: vec![*task],
            }),
        }
    }
    // Stable sort: ties stay in first-appearance order.
    groups.sort_by_key(|g| std::cmp::Reverse(g.flops(1)));
    groups
}

/// A schedulable piece of work: tasks sharing one gathered `A`, run as a
/// single GEMM against their side-by-side `B` tiles.
struct Unit<'g, 'a> {
    a_slot: usize,
    tasks: Vec<&'g TileTask<'a>>,
}

fn units<'g, 'a>(groups: &'g [BatchGroup<'a>], workers: usize) -> Vec<Unit<'g, 'a>> {
    let mut out = Vec::new();
    for group in groups {
        let mut by_slot: Vec<(usize, Vec<&TileTask<'a>>)> = Vec::new();
        for task in &group.tasks {
            match by_slot.iter_mut().find(|(s, _)| *s == task.a_slot) {
                Some((_, members)) => members.push(task),
                None => by_slot.push((task.a_slot, vec![task])),
            }
        }
        // Split large fused batches so a single shared mask still spreads
        // over the workers; the split does not change any output value.
        for (a_slot, members) in by_slot {
            let chunk = members.len().div_ceil(workers.max(1));
            for part in members.chunks(chunk) {
                out.push(Unit {
                    a_slot,
                    tasks: part.to_vec(),
                });
            }
        }
    }
    out
}

/// Run all groups on `workers` threads and assemble the `M x n` output.
///
/// Units are assigned by longest-processing-time first. Each writes a
/// private buffer that is scattered into its own output columns afterwards,
/// so the result is bit-identical for any worker count.
pub fn execute_batched(a: &GatheredA<'_>, groups: &[BatchGroup<'_>], n: usize, workers: usize) -> DenseMatrix {
    let m = a.m;
    let mut c = DenseMatrix::zeros(m, n, Layout::RowMajor);
    let units = units(groups, workers);
    let costs: Vec<u64> = units
        .iter()
        .map(|u| u.tasks.iter().map(|t| t.flops(m)).sum())
        .collect();
    let blocks = pool::run_lpt(&costs, workers, |u| {
        let unit = &units[u];
        let width: usize = unit.tasks.iter().map(|t| t.n()).sum();
        let mut local = vec![0.0f32; m * width];
        let lhs = a.lhs(unit.a_slot);
        if let [task] = unit.tasks[..] {
            kernel::gemm_into(&lhs, &task.b.view(), &mut local, width);
        } else {
            let rhs = ConcatRhs::new(unit.tasks.iter().map(|t| t.b.view()).collect());
            kernel::gemm_into(&lhs, &rhs, &mut local, width);
        }
        local
    });
    let out = c.data_mut();
    for (unit, local) in units.iter().zip(&blocks) {
        let cols: Vec<usize> = unit.tasks.iter().flat_map(|t| t.col_ids.iter().copied()).collect();
        for (i, row) in local.chunks_exact(cols.len()).enumerate() {
            let dst = &mut out[i * n..(i + 1) * n];
            for (&j, &v) in cols.iter().zip(row) {
                dst[j] = v;
            }
        }
    }
    c
}

/// `A * expand(tiles)` computed tile by tile on one thread.
pub fn gemm_tw(a: &DenseMatrix, tiles: &CompactTileSet) -> Result<DenseMatrix> {
    gemm_tw_workers(a, tiles, 1)
}

/// [`gemm_tw`] on `workers` threads; bit-identical for any count.
pub fn gemm_tw_workers(a: &DenseMatrix, tiles: &CompactTileSet, workers: usize) -> Result<DenseMatrix> {
    if a.cols() != tiles.k() {
        return Err(Error::dim(
            "gemm_tw",
            format!("A is {}x{}, weights are {}x{}", a.rows(), a.cols(), tiles.k(), tiles.n()),
        ));
    }
    let at = a.transpose();
    let (gathered, tasks) = plan_tasks(&at, tiles)?;
    let groups = group_by_shape(&tasks);
    Ok(execute_batched(&gathered, &groups, tiles.n(), workers))
}

/// `C[i][j] = sum over stored (k, v) in column j of A[i][k] * v`, with each
/// column's entries accumulated in ascending row order.
pub fn spmm_csc(a: &DenseMatrix, s: &CscMatrix) -> Result<DenseMatrix> {
    if a.cols() != s.rows() {
        return Err(Error::dim(
            "spmm_csc",
            format!("A is {}x{}, sparse operand is {}x{}", a.rows(), a.cols(), s.rows(), s.cols()),
        ));
    }
    let m = a.rows();
    let at = a.transpose();
    // Column j of C is a contiguous row of C^T.
    let mut ct = vec![0.0f32; s.cols() * m];
    for (j, out) in ct.chunks_exact_mut(m.max(1)).enumerate().take(s.cols()) {
        for (k, v) in s.column(j) {
            for (o, &x) in out.iter_mut().zip(&at.data()[k * m..(k + 1) * m]) {
                *o += x * v;
            }
        }
    }
    Ok(DenseMatrix::new(m, s.cols(), Layout::ColMajor, ct)?.to_layout(Layout::RowMajor))
}

/// Tile-wise product plus the sparse overlay, summed elementwise.
pub fn gemm_tew(a: &DenseMatrix, tiles: &CompactTileSet, ew: &CscMatrix) -> Result<DenseMatrix> {
    gemm_tew_workers(a, tiles, ew, 1)
}

pub fn gemm_tew_workers(a: &DenseMatrix, tiles: &CompactTileSet, ew: &CscMatrix, workers: usize) -> Result<DenseMatrix> {
    if (ew.rows(), ew.cols()) != (tiles.k(), tiles.n()) {
        return Err(Error::dim(
            "gemm_tew",
            format!("overlay is {}x{}, tiles are {}x{}", ew.rows(), ew.cols(), tiles.k(), tiles.n()),
        ));
    }
    let mut c = gemm_tw_workers(a, tiles, workers)?;
    if ew.nnz() > 0 {
        let extra = spmm_csc(a, ew)?;
        for (x, y) in c.data_mut().iter_mut().zip(extra.data()) {
            *x += y;
        }
    }
    Ok(c)
}

/// Work done by one tile-wise execution.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub wall: Duration,
    /// `sum_i 2 * M * k_i * n_i`.
    pub flops: u64,
    /// `2 * M * K * N`.
    pub dense_flops: u64,
}

impl FlopReport {
    /// Executed over dense FLOPs; zero for an empty problem.
    pub fn ratio(&self) -> f64 {
        if self.dense_flops == 0 {
            0.0
        } else {
            self.flops as f64 / self.dense_flops as f64
        }
    }

    /// Effective throughput in GFLOP/s.
    pub fn gflops(&self) -> f64 {
        self.flops as f64 / self.wall.as_secs_f64().max(1e-12) / 1e9
    }
}

/// Report for `tiles` applied to `m` rows of input, given a measured time.
pub fn flop_report(tiles: &CompactTileSet, m: usize, wall: Duration) -> FlopReport {
    let flops = tiles
        .tiles()
        .iter()
        .map(|t| 2 * m as u64 * t.kept_rows() as u64 * t.width() as u64)
        .sum();
    FlopReport {
        wall: wall.max(Duration::from_nanos(1)),
        flops,
        dense_flops: 2 * m as u64 * tiles.k() as u64 * tiles.n() as u64,
    }
}

/// Run [`gemm_tw_workers`] and time it.
pub fn timed_gemm_tw(a: &DenseMatrix, tiles: &CompactTileSet, workers: usize) -> Result<(DenseMatrix, FlopReport)> {
    let start = Instant::now();
    let c = gemm_tw_workers(a, tiles, workers)?;
    let report = flop_report(tiles, a.rows(), start.elapsed());
    Ok((c, report))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::matrix::{gemm_dense, to_csc};
    use crate::pattern::{compact, Tile, TilePattern};

    fn tol(k: usize) -> f32 {
        1e-4 * k as f32
    }

    #[test]
    fn gather_full_mask_borrows() {
        let at = DenseMatrix::random(5, 7, 1);
        let g = gather_rows(&at, &RowMask::full(5)).unwrap();
        assert!(matches!(g, Cow::Borrowed(_)));
        assert!(gather_rows(&at, &RowMask::full(4)).is_err());
    }

    #[test]
    fn gather_keeps_listed_rows() {
        let at = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let g = gather_rows(&at, &RowMask::from_bools(&[true, false, true])).unwrap();
        assert_eq!(g.shape(), (2, 2));
        assert_eq!(g.data(), &[1.0, 2.0, 5.0, 6.0]);
        let col_major = at.to_layout(Layout::ColMajor);
        let cm = gather_rows(&col_major, &RowMask::from_bools(&[true, false, true])).unwrap();
        assert_eq!(cm.data(), g.data());
    }

    #[test]
    fn gather_random_mask_bit_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let at = DenseMatrix::random(70, 9, 2);
        let bits: Vec<bool> = (0..70).map(|_| rand::Rng::gen_bool(&mut rng, 0.4)).collect();
        let mask = RowMask::from_bools(&bits);
        let g = gather_rows(&at, &mask).unwrap();
        let set: Vec<usize> = (0..70).filter(|&r| bits[r]).collect();
        assert_eq!(g.rows(), set.len());
        for (r, &src) in set.iter().enumerate() {
            assert_eq!(g.row(r), at.row(src));
        }
    }

    #[test]
    fn dense_pattern_matches_dense_gemm_bitwise() {
        let a = DenseMatrix::random(33, 40, 1);
        let b = DenseMatrix::random(40, 72, 2);
        let tiles = compact(&b, &TilePattern::dense(40, 72, 16)).unwrap();
        let c = gemm_tw(&a, &tiles).unwrap();
        assert!(c.bit_eq(&gemm_dense(&a, &b).unwrap()));
    }

    #[test]
    fn pruned_columns_are_zero_and_oracle_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, k, n) = (256, 256, 256);
        let a = DenseMatrix::random(m, k, 4);
        let b = DenseMatrix::random(k, n, 5);
        let p = TilePattern::random_uniform(k, n, 64, 0.6, &mut rng);
        let tiles = compact(&b, &p).unwrap();
        let c = gemm_tw(&a, &tiles).unwrap();
        let oracle = gemm_dense(&a, &p.zero_fill(&b).unwrap()).unwrap();
        assert!(c.max_abs_diff(&oracle).unwrap() <= tol(k));
        for j in p.pruned_columns() {
            assert!((0..m).all(|i| c.get(i, j) == 0.0));
        }
    }

    #[test]
    fn fully_pruned_tile_leaves_zero_columns() {
        let b = DenseMatrix::random(8, 16, 1);
        let tiles = vec![
            Tile::new((0..8).collect(), RowMask::full(8)),
            Tile::new((8..16).collect(), RowMask::empty(8)),
        ];
        let p = TilePattern::new(8, 16, 8, tiles).unwrap();
        let a = DenseMatrix::random(5, 8, 2);
        let c = gemm_tw(&a, &compact(&b, &p).unwrap()).unwrap();
        assert!((0..5).all(|i| (8..16).all(|j| c.get(i, j) == 0.0)));
        assert!(gemm_tw(&DenseMatrix::random(5, 7, 2), &compact(&b, &p).unwrap()).is_err());
    }

    #[test]
    fn grouping_by_width() {
        let (k, g) = (64, 32);
        let b = DenseMatrix::random(k, 4 * g - 10, 1);
        let widths = [g, g, g, g - 10];
        let prunes = [2, 4, 8, 1];
        let mut start = 0;
        let tiles = widths
            .iter()
            .zip(prunes)
            .map(|(&w, pr)| {
                let t = Tile::new((start..start + w).collect(), RowMask::from_bools(&(0..k).map(|r| r >= pr).collect::<Vec<_>>()));
                start += w;
                t
            })
            .collect();
        let p = TilePattern::new(k, 4 * g - 10, g, tiles).unwrap();
        let set = compact(&b, &p).unwrap();
        let at = DenseMatrix::random(16, k, 3).transpose();
        let (gathered, tasks) = plan_tasks(&at, &set).unwrap();
        assert_eq!(gathered.len(), 4);
        let groups = group_by_shape(&tasks);
        assert_eq!(groups.iter().map(BatchGroup::len).collect::<Vec<_>>(), vec![3, 1]);
        assert_eq!(groups[0].n, g);

        let same = compact(&DenseMatrix::random(k, 4 * g, 1), &TilePattern::dense(k, 4 * g, g)).unwrap();
        let (gathered, tasks) = plan_tasks(&at, &same).unwrap();
        assert_eq!(gathered.copies(), 0);
        assert_eq!(group_by_shape(&tasks).len(), 1);
    }

    #[test]
    fn distinct_widths_give_singletons_and_empty_list_gives_zeros() {
        let gathered = GatheredA { m: 3, slots: vec![] };
        let c = execute_batched(&gathered, &[], 4, 8);
        assert_eq!(c.shape(), (3, 4));
        assert_eq!(c.count_zeros(), 12);
        assert!(group_by_shape(&[]).is_empty());
    }

    #[test]
    fn worker_count_does_not_change_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = DenseMatrix::random(97, 130, 1);
        let b = DenseMatrix::random(130, 200, 2);
        let p = TilePattern::random_irregular(130, 200, 32, 0.5, &mut rng);
        let tiles = compact(&b, &p).unwrap();
        let one = gemm_tw_workers(&a, &tiles, 1).unwrap();
        for w in [2, 3, 8] {
            assert!(gemm_tw_workers(&a, &tiles, w).unwrap().bit_eq(&one));
        }
    }

    #[test]
    fn spmm_cases() {
        let a = DenseMatrix::random(6, 5, 1);
        let empty = spmm_csc(&a, &CscMatrix::empty(5, 3)).unwrap();
        assert_eq!(empty.count_zeros(), 18);
        let id = to_csc(&DenseMatrix::identity(5), |_, _, v| v != 0.0);
        assert!(spmm_csc(&a, &id).unwrap().bit_eq(&a));
        assert!(spmm_csc(&a, &CscMatrix::empty(4, 3)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DenseMatrix::random(128, 128, 2);
        let w = DenseMatrix::random(128, 128, 3);
        let s = to_csc(&w, |_, _, _| rand::Rng::gen_bool(&mut rng, 0.015));
        let c = spmm_csc(&a, &s).unwrap();
        let oracle = gemm_dense(&a, &s.to_dense()).unwrap();
        assert!(c.max_abs_diff(&oracle).unwrap() <= tol(128));
    }

    #[test]
    fn tew_is_sum_of_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = DenseMatrix::random(40, 64, 1);
        let b = DenseMatrix::random(64, 64, 2);
        let p = TilePattern::random_uniform(64, 64, 16, 0.75, &mut rng);
        let tiles = compact(&b, &p).unwrap();
        let keep = p.keep_mask();
        let ew = to_csc(&b, |i, j, _| !keep.get(i, j) && (i + j) % 7 == 0);
        let tw = gemm_tw(&a, &tiles).unwrap();
        let c = gemm_tew(&a, &tiles, &ew).unwrap();
        let sp = spmm_csc(&a, &ew).unwrap();
        for (i, x) in c.data().iter().enumerate() {
            assert_eq!(x.to_bits(), (tw.data()[i] + sp.data()[i]).to_bits());
        }
        assert!(gemm_tew(&a, &tiles, &CscMatrix::empty(64, 64)).unwrap().bit_eq(&tw));
        assert!(gemm_tew(&a, &tiles, &CscMatrix::empty(64, 63)).is_err());
    }

    #[test]
    fn flop_ratios() {
        let b = DenseMatrix::random(16, 16, 1);
        let dense = compact(&b, &TilePattern::dense(16, 16, 8)).unwrap();
        assert_eq!(flop_report(&dense, 4, Duration::ZERO).ratio(), 1.0);

        let top_half = RowMask::from_kept(16, &(0..8).collect::<Vec<_>>()).unwrap();
        let p = TilePattern::from_columns(16, 16, 8, &[(0..8).collect()], vec![top_half]).unwrap();
        let t = compact(&b, &p).unwrap();
        assert_eq!(flop_report(&t, 4, Duration::ZERO).ratio(), 0.25);

        let none = TilePattern::new(16, 16, 8, vec![Tile::new((0..8).collect(), RowMask::empty(16))]).unwrap();
        let a = DenseMatrix::random(4, 16, 2);
        let (c, r) = timed_gemm_tw(&a, &compact(&b, &none).unwrap(), 1).unwrap();
        assert_eq!(c.count_zeros(), 64);
        assert_eq!(r.ratio(), 0.0);
        assert!(r.wall > Duration::ZERO);
    }
}
