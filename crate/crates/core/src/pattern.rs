//! The tile-wise (TW) sparsity pattern over a `K x N` weight matrix.
//!
//! The `N` columns are grouped into tiles of `G` columns. Each tile keeps
//! a subset of its columns and, independently of the other tiles, a subset
//! of the `K` rows. After column pruning the surviving columns are
//! re-organized into consecutive groups of exactly `G` (only the last tile
//! may be narrower), so most tiles share an output width and can be
//! batched.

use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::mask::{KeepMask, RowMask};
use crate::matrix::{DenseMatrix, Layout};

/// Tile geometry used by the engine and benchmarks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileConfig {
    /// Tile width in columns (pruning granularity).
    pub g: usize,
    /// Output-tile height; only reported.
    pub ty: usize,
}

impl TileConfig {
    /// Width multiple required so tiles align with the micro-kernel.
    pub const WIDTH_MULTIPLE: usize = 8;

    pub fn new(g: usize, ty: usize) -> Result<Self> {
        if g == 0 || !g.is_multiple_of(Self::WIDTH_MULTIPLE) {
            return Err(Error::Config(format!(
                "granularity {g} must be a positive multiple of {}",
                Self::WIDTH_MULTIPLE
            )));
        }
        Ok(TileConfig { g, ty })
    }
}

/// Split `0..n` into `ceil(n / g)` contiguous ranges of width `g`; the last
/// range takes the remainder.
pub fn partition(n: usize, g: usize) -> Vec<Range<usize>> {
    assert!(g >= 1, "granularity must be positive");
    (0..n).step_by(g).map(|s| s..(s + g).min(n)).collect()
}

/// Re-group surviving columns: concatenate all survivors in ascending
/// global order and cut them into consecutive groups of exactly `g`.
pub fn reorganize_columns(survivors: &[Vec<usize>], g: usize) -> Vec<Vec<usize>> {
    assert!(g >= 1, "granularity must be positive");
    let mut all: Vec<usize> = survivors.iter().flatten().copied().collect();
    all.sort_unstable();
    all.chunks(g).map(|c| c.to_vec()).collect()
}

/// One tile: its output columns and the rows it keeps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tile {
    col_ids: Vec<usize>,
    row_keep: RowMask,
}

impl Tile {
    pub fn new(col_ids: Vec<usize>, row_keep: RowMask) -> Self {
        Tile { col_ids, row_keep }
    }

    pub fn col_ids(&self) -> &[usize] {
        &self.col_ids
    }

    pub fn row_keep(&self) -> &RowMask {
        &self.row_keep
    }

    /// Surviving rows `k_i`.
    pub fn kept_rows(&self) -> usize {
        self.row_keep.count_ones()
    }

    /// Output width `n_i`.
    pub fn width(&self) -> usize {
        self.col_ids.len()
    }
}

/// A validated TW pattern.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePattern {
    k: usize,
    n: usize,
    g: usize,
    tiles: Vec<Tile>,
}

impl TilePattern {
    pub fn new(k: usize, n: usize, g: usize, tiles: Vec<Tile>) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidPattern(msg));
        if g == 0 {
            return bad("granularity must be positive".into());
        }
        let mut seen = vec![false; n];
        let last = tiles.len().saturating_sub(1);
        for (t, tile) in tiles.iter().enumerate() {
            if tile.col_ids.is_empty() {
                return bad(format!("tile {t} has no columns"));
            }
            if tile.col_ids.len() > g || (t != last && tile.col_ids.len() != g) {
                return bad(format!("tile {t} has {} columns with G={g}", tile.col_ids.len()));
            }
            if tile.col_ids.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("tile {t} column ids are not strictly ascending"));
            }
            for &c in &tile.col_ids {
                if c >= n {
                    return bad(format!("column {c} out of range {n}"));
                }
                if std::mem::replace(&mut seen[c], true) {
                    return bad(format!("column {c} appears in more than one tile"));
                }
            }
            if tile.row_keep.len() != k {
                return bad(format!("tile {t} row mask covers {} rows, K={k}", tile.row_keep.len()));
            }
        }
        Ok(TilePattern { k, n, g, tiles })
    }

    /// Nothing pruned.
    pub fn dense(k: usize, n: usize, g: usize) -> Self {
        let tiles = partition(n, g)
            .into_iter()
            .map(|r| Tile::new(r.collect(), RowMask::full(k)))
            .collect();
        TilePattern { k, n, g, tiles }
    }

    /// Build from surviving columns (any grouping) plus a row mask per
    /// re-organized tile.
    pub fn from_columns(
        k: usize,
        n: usize,
        g: usize,
        survivors: &[Vec<usize>],
        row_masks: Vec<RowMask>,
    ) -> Result<Self> {
        let groups = reorganize_columns(survivors, g);
        if groups.len() != row_masks.len() {
            return Err(Error::InvalidPattern(format!(
                "{} re-organized tiles but {} row masks",
                groups.len(),
                row_masks.len()
            )));
        }
        let tiles = groups.into_iter().zip(row_masks).map(|(c, r)| Tile::new(c, r)).collect();
        Self::new(k, n, g, tiles)
    }

    /// Random pattern with the same kept-row count in every tile. Each
    /// dimension keeps a `sqrt(1 - sparsity)` share, so element sparsity
    /// lands near `sparsity`.
    pub fn random_uniform<R: Rng + ?Sized>(
        k: usize,
        n: usize,
        g: usize,
        sparsity: f64,
        rng: &mut R,
    ) -> Self {
        let keep = (1.0 - sparsity.clamp(0.0, 1.0)).sqrt();
        let cols = ((keep * n as f64).round() as usize).min(n);
        let rows = ((keep * k as f64).round() as usize).min(k);
        Self::random_with_counts(k, n, g, cols, |_, _| rows, rng)
    }

    /// Random pattern whose kept-row count varies per tile around the
    /// uniform value.
    pub fn random_irregular<R: Rng + ?Sized>(
        k: usize,
        n: usize,
        g: usize,
        sparsity: f64,
        rng: &mut R,
    ) -> Self {
        let keep = (1.0 - sparsity.clamp(0.0, 1.0)).sqrt();
        let cols = ((keep * n as f64).round() as usize).min(n);
        let base = keep * k as f64;
        Self::random_with_counts(
            k,
            n,
            g,
            cols,
            |_, r| {
                let jitter = r.gen_range(0.5..1.5);
                ((base * jitter).round() as usize).min(k)
            },
            rng,
        )
    }

    fn random_with_counts<R: Rng + ?Sized>(
        k: usize,
        n: usize,
        g: usize,
        cols: usize,
        mut rows_for: impl FnMut(usize, &mut R) -> usize,
        rng: &mut R,
    ) -> Self {
        let mut kept: Vec<usize> = sample(rng, n, cols).into_vec();
        kept.sort_unstable();
        let groups = reorganize_columns(&[kept], g);
        let tiles = groups
            .into_iter()
            .enumerate()
            .map(|(t, c)| {
                let rows = rows_for(t, rng);
                let picked = sample(rng, k, rows).into_vec();
                Tile::new(c, RowMask::from_kept(k, &picked).unwrap())
            })
            .collect();
        TilePattern { k, n, g, tiles }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn tiles(&self) -> &[Tile] {
        &self.tiles
    }

    /// Number of tiles a plain partition of `N` would have.
    pub fn partition_tiles(&self) -> usize {
        self.n.div_ceil(self.g)
    }

    /// Surviving columns in ascending order.
    pub fn surviving_columns(&self) -> Vec<usize> {
        let mut cols: Vec<usize> = self.tiles.iter().flat_map(|t| t.col_ids.iter().copied()).collect();
        cols.sort_unstable();
        cols
    }

    /// Columns absent from every tile.
    pub fn pruned_columns(&self) -> Vec<usize> {
        let mut alive = vec![false; self.n];
        for &c in self.tiles.iter().flat_map(|t| &t.col_ids) {
            alive[c] = true;
        }
        (0..self.n).filter(|&c| !alive[c]).collect()
    }

    /// `sum_i k_i * n_i`.
    pub fn kept_elements(&self) -> usize {
        self.tiles.iter().map(|t| t.kept_rows() * t.width()).sum()
    }

    pub fn sparsity(&self) -> f64 {
        let total = self.k * self.n;
        if total == 0 {
            return 0.0;
        }
        1.0 - self.kept_elements() as f64 / total as f64
    }

    pub fn keep_mask(&self) -> KeepMask {
        let mut mask = KeepMask::all(self.k, self.n, false);
        for tile in &self.tiles {
            for r in tile.row_keep.iter_ones() {
                for &c in &tile.col_ids {
                    mask.set(r, c, true);
                }
            }
        }
        mask
    }

    /// Copy of `b` with every pruned entry set to zero.
    pub fn zero_fill(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_matrix(b, "zero_fill")?;
        self.keep_mask().apply(b)
    }

    fn check_matrix(&self, b: &DenseMatrix, op: &'static str) -> Result<()> {
        if b.shape() != (self.k, self.n) {
            return Err(Error::dim(
                op,
                format!("pattern is {}x{}, matrix is {}x{}", self.k, self.n, b.rows(), b.cols()),
            ));
        }
        Ok(())
    }
}

/// A physically compacted tile: kept rows and columns only.
#[derive(Clone, Debug, PartialEq)]
pub struct CompactTile {
    /// `k_i x n_i`, stored column-major (the transposed layout).
    pub sub: DenseMatrix,
    pub row_mask: RowMask,
    pub col_ids: Vec<usize>,
}

impl CompactTile {
    pub fn kept_rows(&self) -> usize {
        self.sub.rows()
    }

    pub fn width(&self) -> usize {
        self.sub.cols()
    }
}

/// Compacted weights ready for execution.
#[derive(Clone, Debug, PartialEq)]
pub struct CompactTileSet {
    k: usize,
    n: usize,
    g: usize,
    tiles: Vec<CompactTile>,
}

impl CompactTileSet {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn tiles(&self) -> &[CompactTile] {
        &self.tiles
    }

    /// Zero-filled `K x N` matrix holding the kept entries.
    pub fn expand(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.k, self.n, Layout::RowMajor);
        for tile in &self.tiles {
            for (r, row) in tile.row_mask.iter_ones().enumerate() {
                for (c, &col) in tile.col_ids.iter().enumerate() {
                    out.set(row, col, tile.sub.get(r, c));
                }
            }
        }
        out
    }

    /// The pattern these tiles were compacted with.
    pub fn pattern(&self) -> TilePattern {
        let tiles = self
            .tiles
            .iter()
            .map(|t| Tile::new(t.col_ids.clone(), t.row_mask.clone()))
            .collect();
        TilePattern {
            k: self.k,
            n: self.n,
            g: self.g,
            tiles,
        }
    }
}

/// Remove pruned rows and columns of `b` tile by tile.
pub fn compact(b: &DenseMatrix, p: &TilePattern) -> Result<CompactTileSet> {
    p.check_matrix(b, "compact")?;
    let tiles = p
        .tiles
        .iter()
        .map(|tile| {
            let rows: Vec<usize> = tile.row_keep.iter_ones().collect();
            let sub = DenseMatrix::from_fn(rows.len(), tile.col_ids.len(), Layout::ColMajor, |r, c| {
                b.get(rows[r], tile.col_ids[c])
            });
            CompactTile {
                sub,
                row_mask: tile.row_keep.clone(),
                col_ids: tile.col_ids.clone(),
            }
        })
        .collect();
    Ok(CompactTileSet {
        k: p.k,
        n: p.n,
        g: p.g,
        tiles,
    })
}

/// Static size and work figures for a pattern applied to `M` input rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternStats {
    pub sparsity: f64,
    /// `sum_i 2 * M * k_i * n_i`.
    pub flops: u64,
    /// `2 * M * K * N`.
    pub dense_flops: u64,
    pub per_tile_dims: Vec<(usize, usize)>,
    /// Partition tiles that vanished because their columns were pruned.
    pub dropped_tiles: usize,
}

impl PatternStats {
    /// `flops / dense_flops`; zero for an empty problem.
    pub fn flop_ratio(&self) -> f64 {
        if self.dense_flops == 0 {
            return 0.0;
        }
        self.flops as f64 / self.dense_flops as f64
    }

    pub fn flop_reduction(&self) -> f64 {
        1.0 - self.flop_ratio()
    }
}

pub fn pattern_stats(p: &TilePattern, m: usize) -> PatternStats {
    let per_tile_dims: Vec<(usize, usize)> = p.tiles.iter().map(|t| (t.kept_rows(), t.width())).collect();
    let flops = per_tile_dims
        .iter()
        .map(|&(k, n)| 2 * m as u64 * k as u64 * n as u64)
        .sum();
    PatternStats {
        sparsity: p.sparsity(),
        flops,
        dense_flops: 2 * m as u64 * p.k as u64 * p.n as u64,
        per_tile_dims,
        dropped_tiles: p.partition_tiles().saturating_sub(p.tiles.len()),
    }
}
