//! Timing sweeps, oracle probes and zero-capture reports behind the CLI.
//!
//! Dense and tile-wise runs always use the same micro-kernel, so a speedup
//! reflects skipped work and execution overhead only.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::comparator::{zero_capture_analysis, ZeroCapture};
use crate::engine;
use crate::error::{Error, Result};
use crate::mask::KeepMask;
use crate::matrix::{gemm_dense_workers, to_csc, DenseMatrix};
use crate::pattern::{compact, TilePattern};
use crate::prune::ew_global_masks;
use crate::score::ScoreMap;

pub const MIN_REPEATS: usize = 5;

/// Summary of repeated wall-clock samples, in milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

impl Timing {
    pub fn from_samples(ms: &[f64]) -> Timing {
        let n = ms.len();
        if n == 0 {
            return Timing {
                mean: 0.0,
                median: 0.0,
                std: 0.0,
            };
        }
        let mean = ms.iter().sum::<f64>() / n as f64;
        let mut sorted = ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let std = if n > 1 {
            (ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Timing { mean, median, std }
    }
}

/// One benchmark configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchCase {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub g: usize,
    /// Final sparsity of the weights.
    pub sparsity: f64,
    /// Element-wise share restored on top of the tile pattern (0 = plain TW).
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub repeats: usize,
    pub workers: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            repeats: MIN_REPEATS,
            workers: 1,
            seed: 42,
        }
    }
}

/// Result row; see [`BENCH_HEADER`] for the CSV column order.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub case: BenchCase,
    /// Sparsity of the generated weights (pattern plus overlay).
    pub actual_sparsity: f64,
    pub workers: usize,
    pub repeats: usize,
    pub dense: Timing,
    pub sparse: Timing,
    /// Executed multiply-add work, `2 * M * k_i * n_i` summed, plus overlay.
    pub flops: u64,
    pub dense_flops: u64,
    /// Dense median over sparse median.
    pub speedup: f64,
    /// Against the dense product of the zero-filled weights.
    pub max_abs_diff: f32,
}

pub const BENCH_HEADER: [&str; 20] = [
    "m",
    "k",
    "n",
    "g",
    "sparsity",
    "delta",
    "actual_sparsity",
    "workers",
    "repeats",
    "dense_mean_ms",
    "dense_median_ms",
    "dense_std_ms",
    "sparse_mean_ms",
    "sparse_median_ms",
    "sparse_std_ms",
    "flops",
    "dense_flops",
    "flop_ratio",
    "speedup",
    "max_abs_diff",
];

impl BenchRow {
    pub fn record(&self) -> Vec<String> {
        let c = &self.case;
        vec![
            c.m.to_string(),
            c.k.to_string(),
            c.n.to_string(),
            c.g.to_string(),
            c.sparsity.to_string(),
            c.delta.to_string(),
            format!("{:.6}", self.actual_sparsity),
            self.workers.to_string(),
            self.repeats.to_string(),
            format!("{:.4}", self.dense.mean),
            format!("{:.4}", self.dense.median),
            format!("{:.4}", self.dense.std),
            format!("{:.4}", self.sparse.mean),
            format!("{:.4}", self.sparse.median),
            format!("{:.4}", self.sparse.std),
            self.flops.to_string(),
            self.dense_flops.to_string(),
            format!("{:.6}", self.flop_ratio()),
            format!("{:.4}", self.speedup),
            format!("{:e}", self.max_abs_diff),
        ]
    }

    pub fn flop_ratio(&self) -> f64 {
        self.flops as f64 / self.dense_flops.max(1) as f64
    }
}

/// Seeded problem instance for a case.
pub struct BenchProblem {
    pub a: DenseMatrix,
    pub w: DenseMatrix,
    pub pattern: TilePattern,
    /// Element-wise overlay restored on top of the pattern.
    pub overlay: crate::matrix::CscMatrix,
}

impl BenchProblem {
    pub fn generate(case: &BenchCase, seed: u64) -> Result<BenchProblem> {
        if case.m == 0 || case.k == 0 || case.n == 0 || case.g == 0 {
            return Err(Error::Config(format!("degenerate bench case {case:?}")));
        }
        if !(0.0..=1.0).contains(&case.sparsity) || case.delta < 0.0 || case.sparsity + case.delta > 1.0 {
            return Err(Error::Config(format!(
                "sparsity {} with delta {} is out of range",
                case.sparsity, case.delta
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DenseMatrix::random_with(case.m, case.k, &mut rng);
        let w = DenseMatrix::random_with(case.k, case.n, &mut rng);
        let pattern = TilePattern::random_uniform(case.k, case.n, case.g, case.sparsity + case.delta, &mut rng);
        let keep = pattern.keep_mask();
        let restore = (case.delta * (case.k * case.n) as f64).round() as usize;
        let mut pruned: Vec<usize> = (0..case.k * case.n).filter(|&i| !keep.as_slice()[i]).collect();
        // partial Fisher-Yates: the first `restore` entries become the overlay
        let restore = restore.min(pruned.len());
        for i in 0..restore {
            let j = rng.gen_range(i..pruned.len());
            pruned.swap(i, j);
        }
        let mut chosen = KeepMask::all(case.k, case.n, false);
        for &idx in &pruned[..restore] {
            chosen.set(idx / case.n, idx % case.n, true);
        }
        let overlay = to_csc(&w, |i, j, _| chosen.get(i, j));
        Ok(BenchProblem { a, w, pattern, overlay })
    }

    /// `W` with everything outside the pattern and overlay zeroed.
    pub fn effective_weights(&self) -> Result<DenseMatrix> {
        let mut z = self.pattern.zero_fill(&self.w)?;
        for j in 0..self.overlay.cols() {
            for (i, v) in self.overlay.column(j) {
                z.set(i, j, v);
            }
        }
        Ok(z)
    }
}

fn time_ms(f: impl FnOnce()) -> f64 {
    let start = Instant::now();
    f();
    start.elapsed().as_secs_f64() * 1e3
}

/// Time dense and sparse execution of one case, interleaved, after one
/// discarded warm-up of each.
pub fn bench_case(case: &BenchCase, opts: &BenchOptions) -> Result<BenchRow> {
    if opts.repeats < MIN_REPEATS {
        return Err(Error::Config(format!("repeats must be at least {MIN_REPEATS}, got {}", opts.repeats)));
    }
    let workers = opts.workers.max(1);
    let p = BenchProblem::generate(case, opts.seed)?;
    let tiles = compact(&p.w, &p.pattern)?;
    let run_sparse = || -> Result<DenseMatrix> {
        if p.overlay.nnz() == 0 {
            engine::gemm_tw_workers(&p.a, &tiles, workers)
        } else {
            engine::gemm_tew_workers(&p.a, &tiles, &p.overlay, workers)
        }
    };

    let c = run_sparse()?;
    gemm_dense_workers(&p.a, &p.w, workers)?;
    let oracle = gemm_dense_workers(&p.a, &p.effective_weights()?, workers)?;
    let max_abs_diff = c.max_abs_diff(&oracle)?;

    let mut dense_ms = Vec::with_capacity(opts.repeats);
    let mut sparse_ms = Vec::with_capacity(opts.repeats);
    for _ in 0..opts.repeats {
        let mut err = None;
        dense_ms.push(time_ms(|| {
            if let Err(e) = gemm_dense_workers(&p.a, &p.w, workers) {
                err = Some(e);
            }
        }));
        sparse_ms.push(time_ms(|| {
            if let Err(e) = run_sparse() {
                err = Some(e);
            }
        }));
        if let Some(e) = err {
            return Err(e);
        }
    }
    let dense = Timing::from_samples(&dense_ms);
    let sparse = Timing::from_samples(&sparse_ms);
    let report = engine::flop_report(&tiles, case.m, std::time::Duration::ZERO);
    let flops = report.flops + 2 * case.m as u64 * p.overlay.nnz() as u64;
    let kept = p.pattern.kept_elements() + p.overlay.nnz();
    Ok(BenchRow {
        case: case.clone(),
        actual_sparsity: 1.0 - kept as f64 / (case.k * case.n) as f64,
        workers,
        repeats: opts.repeats,
        speedup: dense.median / sparse.median.max(1e-9),
        dense,
        sparse,
        flops,
        dense_flops: report.dense_flops,
        max_abs_diff,
    })
}

pub fn run_bench(cases: &[BenchCase], opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    cases.iter().map(|c| bench_case(c, opts)).collect()
}

/// Smallest benchmarked sparsity at which sparse execution beat dense.
pub fn crossover(rows: &[BenchRow]) -> Option<f64> {
    rows.iter()
        .filter(|r| r.speedup > 1.0)
        .map(|r| r.case.sparsity)
        .min_by(f64::total_cmp)
}

/// Outcome of an oracle probe sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub probes: usize,
    pub failures: usize,
    /// Largest `max_abs_diff` seen across probes and matrices.
    pub worst_diff: f32,
    /// Largest diff divided by its tolerance `1e-4 * K`.
    pub worst_ratio: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Tolerance for a product with inner dimension `k`.
pub fn oracle_tolerance(k: usize) -> f32 {
    1e-4 * k as f32
}

/// For every probe draw a random input with `rows` rows, run each weight
/// matrix tile-wise and compare against the zero-filled dense product.
pub fn verify_patterns(
    weights: &[DenseMatrix],
    patterns: &[TilePattern],
    probes: usize,
    rows: usize,
    seed: u64,
    workers: usize,
) -> Result<VerifyReport> {
    if weights.len() != patterns.len() {
        return Err(Error::Config(format!("{} weights but {} patterns", weights.len(), patterns.len())));
    }
    let tiles: Vec<_> = weights.iter().zip(patterns).map(|(w, p)| compact(w, p)).collect::<Result<_>>()?;
    let filled: Vec<_> = weights.iter().zip(patterns).map(|(w, p)| p.zero_fill(w)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = VerifyReport {
        probes,
        failures: 0,
        worst_diff: 0.0,
        worst_ratio: 0.0,
    };
    for _ in 0..probes {
        let mut failed = false;
        for (t, z) in tiles.iter().zip(&filled) {
            let a = DenseMatrix::random_with(rows, t.k(), &mut rng);
            let c = engine::gemm_tw_workers(&a, t, workers)?;
            let oracle = gemm_dense_workers(&a, z, workers)?;
            let diff = c.max_abs_diff(&oracle)?;
            let tol = oracle_tolerance(t.k());
            report.worst_diff = report.worst_diff.max(diff);
            report.worst_ratio = report.worst_ratio.max(diff as f64 / tol as f64);
            failed |= !(diff <= tol);
        }
        report.failures += usize::from(failed);
    }
    Ok(report)
}

/// Per-matrix sparsity of a pooled element-wise pruning.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSparsity {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub sparsity: f64,
}

pub const LAYER_HEADER: [&str; 4] = ["layer", "rows", "cols", "sparsity"];
pub const CDF_HEADER: [&str; 6] = ["unit", "height", "width", "zeros", "units", "cdf"];

#[derive(Clone, Debug, PartialEq)]
pub struct Analysis {
    pub layers: Vec<LayerSparsity>,
    /// Zero-capture distribution per unit shape, pooled over all layers.
    pub capture: Vec<ZeroCapture>,
    /// How far the strip CDF rises above each block CDF at worst (<= 0
    /// means strips capture at least as many zeros everywhere).
    pub strip_excess: Vec<f64>,
}

/// Prune all matrices element-wise to `sparsity` as one pool, then count
/// the zeros captured by `1 x g` tile-row strips and by square blocks.
pub fn analyze(scores: &[ScoreMap], sparsity: f64, g: usize, blocks: &[usize]) -> Result<Analysis> {
    if scores.is_empty() {
        return Err(Error::Config("no score matrices to analyze".into()));
    }
    let masks = ew_global_masks(scores, sparsity)?;
    let layers = masks
        .iter()
        .enumerate()
        .map(|(layer, m)| LayerSparsity {
            layer,
            rows: m.rows(),
            cols: m.cols(),
            sparsity: m.sparsity(),
        })
        .collect();
    let mut shapes = vec![(1, g)];
    shapes.extend(blocks.iter().map(|&b| (b, b)));
    let mut capture: Vec<ZeroCapture> = Vec::new();
    for m in &masks {
        for (i, z) in zero_capture_analysis(m, &shapes)?.into_iter().enumerate() {
            match capture.get_mut(i) {
                None => capture.push(z),
                Some(acc) => {
                    acc.units += z.units;
                    for (a, b) in acc.histogram.iter_mut().zip(&z.histogram) {
                        *a += b;
                    }
                }
            }
        }
    }
    for z in &mut capture {
        let mut run = 0usize;
        z.cdf = z
            .histogram
            .iter()
            .map(|&c| {
                run += c;
                run as f64 / z.units.max(1) as f64
            })
            .collect();
    }
    let strip_excess = capture[1..].iter().map(|b| normalized_excess(&capture[0], b)).collect();
    Ok(Analysis {
        layers,
        capture,
        strip_excess,
    })
}

/// Largest gap `cdf_a(x) - cdf_b(x)` over pruned fractions `x`, comparing
/// shapes of possibly different sizes on the same fractional axis.
fn normalized_excess(a: &ZeroCapture, b: &ZeroCapture) -> f64 {
    let at = |z: &ZeroCapture, x: f64| {
        let idx = ((x * z.unit_size() as f64) + 1e-9).floor() as usize;
        z.cdf[idx.min(z.cdf.len() - 1)]
    };
    let mut points: Vec<f64> = Vec::new();
    for z in [a, b] {
        points.extend((0..=z.unit_size()).map(|i| i as f64 / z.unit_size() as f64));
    }
    points.iter().map(|&x| at(a, x) - at(b, x)).fold(f64::NEG_INFINITY, f64::max)
}

impl Analysis {
    pub fn layer_records(&self) -> Vec<Vec<String>> {
        self.layers
            .iter()
            .map(|l| {
                vec![
                    l.layer.to_string(),
                    l.rows.to_string(),
                    l.cols.to_string(),
                    format!("{:.6}", l.sparsity),
                ]
            })
            .collect()
    }

    pub fn cdf_records(&self) -> Vec<Vec<String>> {
        let mut out = Vec::new();
        for z in &self.capture {
            let unit = format!("{}x{}", z.shape.0, z.shape.1);
            for (zeros, cdf) in z.cdf.iter().enumerate() {
                out.push(vec![
                    unit.clone(),
                    z.shape.0.to_string(),
                    z.shape.1.to_string(),
                    zeros.to_string(),
                    z.units.to_string(),
                    format!("{cdf:.6}"),
                ]);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Layout;

    #[test]
    fn timing_stats() {
        let t = Timing::from_samples(&[1.0, 2.0, 3.0, 4.0, 10.0]);
        assert_eq!(t.mean, 4.0);
        assert_eq!(t.median, 3.0);
        assert!((t.std - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(Timing::from_samples(&[2.0, 4.0]).median, 3.0);
    }

    #[test]
    fn bench_row_is_consistent() {
        let case = BenchCase {
            m: 32,
            k: 64,
            n: 96,
            g: 32,
            sparsity: 0.5,
            delta: 0.0,
        };
        let row = bench_case(&case, &BenchOptions::default()).unwrap();
        assert_eq!(row.repeats, 5);
        assert!(row.dense.std >= 0.0 && row.sparse.std >= 0.0);
        assert!(row.max_abs_diff <= oracle_tolerance(64));
        assert_eq!(row.record().len(), BENCH_HEADER.len());
        assert!(bench_case(&case, &BenchOptions { repeats: 4, ..BenchOptions::default() }).is_err());
    }

    #[test]
    fn tew_case_restores_delta() {
        let case = BenchCase {
            m: 16,
            k: 64,
            n: 64,
            g: 32,
            sparsity: 0.5,
            delta: 0.05,
        };
        let p = BenchProblem::generate(&case, 1).unwrap();
        assert_eq!(p.overlay.nnz(), (0.05f64 * 4096.0).round() as usize);
        let row = bench_case(&case, &BenchOptions::default()).unwrap();
        assert!(row.max_abs_diff <= oracle_tolerance(64));
    }

    #[test]
    fn crossover_picks_first_win() {
        let mk = |s: f64, speedup: f64| BenchRow {
            case: BenchCase {
                m: 1,
                k: 1,
                n: 1,
                g: 1,
                sparsity: s,
                delta: 0.0,
            },
            actual_sparsity: s,
            workers: 1,
            repeats: 5,
            dense: Timing::from_samples(&[1.0]),
            sparse: Timing::from_samples(&[1.0]),
            flops: 1,
            dense_flops: 1,
            speedup,
            max_abs_diff: 0.0,
        };
        assert_eq!(crossover(&[mk(0.0, 0.9), mk(0.4, 1.2), mk(0.2, 1.1)]), Some(0.2));
        assert_eq!(crossover(&[mk(0.0, 0.9)]), None);
    }

    #[test]
    fn verify_dense_pattern_is_exact() {
        let w = DenseMatrix::random(48, 40, 1);
        let r = verify_patterns(&[w], &[TilePattern::dense(48, 40, 16)], 3, 10, 7, 1).unwrap();
        assert!(r.passed());
        assert_eq!(r.worst_diff, 0.0);
    }

    #[test]
    fn analysis_of_dense_input_is_degenerate() {
        let s = ScoreMap::new(DenseMatrix::from_fn(16, 16, Layout::RowMajor, |i, j| (i * 16 + j + 1) as f32)).unwrap();
        let a = analyze(std::slice::from_ref(&s), 0.0, 8, &[4]).unwrap();
        assert_eq!(a.layers.len(), 1);
        assert_eq!(a.layers[0].sparsity, 0.0);
        assert!(a.capture.iter().all(|z| z.cdf[0] == 1.0));
        assert_eq!(a.cdf_records().len(), 9 + 17);
    }
}
