//! Tile-wise pruning: one column-then-row pruning stage, the multi-stage
//! prune/fine-tune loop, apriori tuning from an element-wise reference,
//! pooled cross-matrix ranking and the tile + element overlay.
//!
//! A stage with target sparsity `s` works on element counts:
//!
//! 1. Column units (`K x 1`) are scored by their mean element score and
//!    pruned in rank order while the pruned elements stay within
//!    `(1 - sqrt(1 - s))` of the total, i.e. columns take their share of a
//!    uniform split of `s` between the two dimensions.
//! 2. Surviving columns are re-organized into width-`G` tiles.
//! 3. Row units (`1 x G` inside a tile) are scored the same way and pruned
//!    in rank order until at least `s` of all elements are pruned.
//!
//! Ranks are ascending by score with ties broken by ascending unit index.
//! Columns pruned by an earlier stage or forced by apriori tuning always
//! go first; columns protected by apriori tuning are never pruned.

use crate::comparator::{generate_comparator_mask, MaskKind};
use crate::error::{Error, Result};
use crate::mask::{KeepMask, RowMask};
use crate::matrix::{to_csc, CscMatrix, DenseMatrix};
use crate::pattern::{reorganize_columns, Tile, TilePattern};
use crate::score::{ceil_count, cmp_unit, floor_count, rank_ascending, ScoreMap};

const EPS: f64 = 1e-9;

/// Staged sparsity targets for [`multi_stage_prune`].
#[derive(Clone, Debug, PartialEq)]
pub struct PruneSchedule {
    stages: Vec<f64>,
    fine_tune_epochs: usize,
}

impl PruneSchedule {
    /// Explicit, strictly increasing targets in `(0, 1]`.
    pub fn new(stages: Vec<f64>, fine_tune_epochs: usize) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Config("schedule has no stages".into()));
        }
        if stages.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(Error::Config(format!("schedule targets must lie in (0, 1]: {stages:?}")));
        }
        if stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("schedule is not strictly increasing: {stages:?}")));
        }
        Ok(PruneSchedule {
            stages,
            fine_tune_epochs,
        })
    }

    /// First stage at 0.2 (or the target, if smaller), then +0.1 per stage,
    /// with the final stage landing exactly on `target`.
    pub fn gradual(target: f64, fine_tune_epochs: usize) -> Result<Self> {
        if !(target > 0.0 && target <= 1.0) {
            return Err(Error::Config(format!("target sparsity {target} outside (0, 1]")));
        }
        let mut stages = Vec::new();
        let mut s = 0.2f64.min(target);
        loop {
            stages.push(s);
            if s >= target - EPS {
                break;
            }
            s = ((s + 0.1) * 1e9).round() / 1e9;
            if s > target - EPS {
                s = target;
            }
        }
        *stages.last_mut().unwrap() = target;
        Self::new(stages, fine_tune_epochs)
    }

    pub fn stages(&self) -> &[f64] {
        &self.stages
    }

    pub fn target(&self) -> f64 {
        *self.stages.last().unwrap()
    }

    pub fn fine_tune_epochs(&self) -> usize {
        self.fine_tune_epochs
    }
}

/// Apriori bias for column units, derived from an element-wise reference.
#[derive(Clone, Debug, PartialEq)]
pub struct AprioriConfig {
    /// Columns with the highest reference sparsity forced to prune.
    pub n1: usize,
    /// Columns with the lowest reference sparsity never pruned.
    pub n2: usize,
    /// Per-column pruned fraction from an element-wise run at the target.
    pub ew_reference: Vec<f64>,
}

impl AprioriConfig {
    pub fn new(n1: usize, n2: usize, ew_reference: Vec<f64>) -> Result<Self> {
        if n1 + n2 > ew_reference.len() {
            return Err(Error::Config(format!(
                "apriori n1 + n2 = {} exceeds {} columns",
                n1 + n2,
                ew_reference.len()
            )));
        }
        Ok(AprioriConfig { n1, n2, ew_reference })
    }

    /// `(forced, protected)` column indices.
    pub fn selections(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        let len = self.ew_reference.len();
        let mut by_sparsity: Vec<usize> = (0..len).collect();
        by_sparsity.sort_by(|&a, &b| {
            self.ew_reference[b]
                .total_cmp(&self.ew_reference[a])
                .then(a.cmp(&b))
        });
        let forced: Vec<usize> = by_sparsity.iter().take(self.n1).copied().collect();
        let mut ascending: Vec<usize> = (0..len).collect();
        ascending.sort_by(|&a, &b| cmp_unit((self.ew_reference[a], a), (self.ew_reference[b], b)));
        let protected: Vec<usize> = ascending.iter().take(self.n2).copied().collect();
        if forced.iter().any(|f| protected.contains(f)) {
            return Err(Error::Config("apriori top-n and last-n sets overlap".into()));
        }
        Ok((forced, protected))
    }
}

/// Zero the scores of the `n1` columns most pruned by the reference and
/// set the `n2` least pruned to `+inf`.
pub fn apriori_tuning(tile_scores: &[f64], cfg: &AprioriConfig) -> Result<Vec<f64>> {
    if tile_scores.len() != cfg.ew_reference.len() {
        return Err(Error::dim(
            "apriori_tuning",
            format!("{} tile scores, {} reference entries", tile_scores.len(), cfg.ew_reference.len()),
        ));
    }
    let (forced, protected) = cfg.selections()?;
    let mut out = tile_scores.to_vec();
    for f in forced {
        out[f] = 0.0;
    }
    for p in protected {
        out[p] = f64::INFINITY;
    }
    Ok(out)
}

/// Pruned fraction of each column of a mask.
pub fn column_sparsity(mask: &KeepMask) -> Vec<f64> {
    (0..mask.cols())
        .map(|j| {
            let pruned = (0..mask.rows()).filter(|&i| !mask.get(i, j)).count();
            pruned as f64 / mask.rows().max(1) as f64
        })
        .collect()
}

/// Element-wise masks at `sparsity`, ranking all elements of all matrices
/// in one pool.
pub fn ew_global_masks(scores: &[ScoreMap], sparsity: f64) -> Result<Vec<KeepMask>> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::Config(format!("sparsity {sparsity} outside [0, 1]")));
    }
    let mut pool: Vec<(f64, usize, usize)> = Vec::new();
    for (m, s) in scores.iter().enumerate() {
        for idx in 0..s.rows() * s.cols() {
            pool.push((s.get(idx / s.cols(), idx % s.cols()) as f64, m, idx));
        }
    }
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut masks: Vec<KeepMask> = scores.iter().map(|s| KeepMask::all(s.rows(), s.cols(), true)).collect();
    for &(_, m, idx) in pool.iter().take(floor_count(sparsity, pool.len())) {
        let cols = scores[m].cols();
        masks[m].set(idx / cols, idx % cols, false);
    }
    Ok(masks)
}

/// Pooled ranking of units from several matrices: `(matrix, unit)` pairs in
/// ascending score order, ties by matrix then unit index.
pub fn global_rank(unit_scores: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let mut pool: Vec<(usize, usize)> = unit_scores
        .iter()
        .enumerate()
        .flat_map(|(m, s)| (0..s.len()).map(move |u| (m, u)))
        .collect();
    pool.sort_by(|&(ma, ua), &(mb, ub)| {
        unit_scores[ma][ua]
            .total_cmp(&unit_scores[mb][ub])
            .then((ma, ua).cmp(&(mb, ub)))
    });
    pool
}

/// Apply one pooled cut-off pruning `floor(fraction * total)` units; returns
/// per-matrix pruned flags.
pub fn global_threshold(unit_scores: &[Vec<f64>], fraction: f64) -> Result<Vec<Vec<bool>>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("fraction {fraction} outside [0, 1]")));
    }
    let ranked = global_rank(unit_scores);
    let mut pruned: Vec<Vec<bool>> = unit_scores.iter().map(|s| vec![false; s.len()]).collect();
    for &(m, u) in ranked.iter().take(floor_count(fraction, ranked.len())) {
        pruned[m][u] = true;
    }
    Ok(pruned)
}

/// One matrix's inputs to a pruning stage.
#[derive(Clone, Copy, Debug)]
pub struct StageInput<'a> {
    pub scores: &'a ScoreMap,
    /// Pattern from the previous stage; its pruned columns stay pruned.
    pub prior: Option<&'a TilePattern>,
    pub apriori: Option<&'a AprioriConfig>,
}

impl<'a> StageInput<'a> {
    pub fn new(scores: &'a ScoreMap) -> Self {
        StageInput {
            scores,
            prior: None,
            apriori: None,
        }
    }
}

/// Share of the elements pruned by column units when a stage targets
/// `sparsity` overall.
pub fn column_share(sparsity: f64) -> f64 {
    1.0 - (1.0 - sparsity).max(0.0).sqrt()
}

/// Single-matrix pruning stage.
pub fn prune_stage(scores: &ScoreMap, sparsity: f64, g: usize) -> Result<TilePattern> {
    Ok(prune_stage_pooled(&[StageInput::new(scores)], sparsity, g)?.remove(0))
}

/// A pruning stage over several matrices ranked in one pool. With a single
/// input this is the per-matrix stage.
pub fn prune_stage_pooled(inputs: &[StageInput<'_>], sparsity: f64, g: usize) -> Result<Vec<TilePattern>> {
    if g == 0 {
        return Err(Error::Config("granularity must be positive".into()));
    }
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::Config(format!("stage sparsity {sparsity} outside [0, 1]")));
    }
    for (m, input) in inputs.iter().enumerate() {
        let (k, n) = (input.scores.rows(), input.scores.cols());
        if let Some(prior) = input.prior {
            if (prior.k(), prior.n()) != (k, n) {
                return Err(Error::dim("prune_stage", format!("matrix {m}: prior pattern shape differs from scores")));
            }
        }
        if let Some(a) = input.apriori {
            if a.ew_reference.len() != n {
                return Err(Error::dim("prune_stage", format!("matrix {m}: apriori reference length")));
            }
        }
    }
    let total: usize = inputs.iter().map(|i| i.scores.rows() * i.scores.cols()).sum();
    // Regression is judged on the pool: under global ranking one matrix may
    // legitimately sit above the stage target while the aggregate does not.
    let kept_before: usize = inputs
        .iter()
        .map(|i| i.prior.map_or(i.scores.rows() * i.scores.cols(), TilePattern::kept_elements))
        .sum();
    let before = 1.0 - kept_before as f64 / total.max(1) as f64;
    if before > sparsity + EPS {
        return Err(Error::Config(format!(
            "stage target {sparsity} is below the current sparsity {before}"
        )));
    }

    // 1. column units
    let mut col_pruned: Vec<Vec<bool>> = Vec::with_capacity(inputs.len());
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    let mut pruned_elems = 0usize;
    for (m, input) in inputs.iter().enumerate() {
        let (k, n) = (input.scores.rows(), input.scores.cols());
        let mut means = column_means(input.scores);
        let mut forced = vec![false; n];
        let mut protected = vec![false; n];
        if let Some(prior) = input.prior {
            for c in prior.pruned_columns() {
                forced[c] = true;
            }
        }
        if let Some(a) = input.apriori {
            means = apriori_tuning(&means, a)?;
            let (f, p) = a.selections()?;
            for c in f {
                forced[c] = true;
            }
            for c in p {
                protected[c] = true;
            }
        }
        for c in 0..n {
            if forced[c] {
                pruned_elems += k;
            } else if !protected[c] {
                candidates.push((means[c], m, c));
            }
        }
        col_pruned.push(forced);
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let column_budget = column_share(sparsity) * total as f64;
    for &(_, m, c) in &candidates {
        let k = inputs[m].scores.rows();
        if (pruned_elems + k) as f64 > column_budget + EPS {
            break;
        }
        col_pruned[m][c] = true;
        pruned_elems += k;
    }

    // 2. re-organize survivors
    let groups: Vec<Vec<Vec<usize>>> = col_pruned
        .iter()
        .map(|flags| {
            let survivors: Vec<usize> = (0..flags.len()).filter(|&c| !flags[c]).collect();
            reorganize_columns(&[survivors], g)
        })
        .collect();

    // 3. row units inside each tile
    let mut row_units: Vec<(f64, usize, usize, usize)> = Vec::new();
    for (m, tiles) in groups.iter().enumerate() {
        let s = inputs[m].scores;
        for (t, cols) in tiles.iter().enumerate() {
            for r in 0..s.rows() {
                let sum: f64 = cols.iter().map(|&c| s.get(r, c) as f64).sum();
                row_units.push((sum / cols.len() as f64, m, t, r));
            }
        }
    }
    row_units.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    let mut masks: Vec<Vec<RowMask>> = groups
        .iter()
        .zip(inputs)
        .map(|(tiles, i)| vec![RowMask::full(i.scores.rows()); tiles.len()])
        .collect();
    let target = ceil_count(sparsity, total);
    for &(_, m, t, r) in &row_units {
        if pruned_elems >= target {
            break;
        }
        masks[m][t].set(r, false);
        pruned_elems += groups[m][t].len();
    }

    groups
        .into_iter()
        .zip(masks)
        .zip(inputs)
        .map(|((tiles, row_masks), input)| {
            let tiles = tiles.into_iter().zip(row_masks).map(|(c, r)| Tile::new(c, r)).collect();
            TilePattern::new(input.scores.rows(), input.scores.cols(), g, tiles)
        })
        .collect()
}

fn column_means(s: &ScoreMap) -> Vec<f64> {
    let k = s.rows().max(1) as f64;
    (0..s.cols())
        .map(|c| (0..s.rows()).map(|r| s.get(r, c) as f64).sum::<f64>() / k)
        .collect()
}

/// How stage targets are applied across matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ranking {
    /// Every matrix reaches the stage target on its own.
    PerMatrix,
    /// Units from all matrices share one ranking; per-matrix sparsity floats.
    Global,
}

/// Knobs for [`multi_stage_prune`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneOptions {
    pub g: usize,
    pub ranking: Ranking,
    /// `(n1, n2)` for apriori tuning; the element-wise reference is computed
    /// once at the final target from the initial scores.
    pub apriori: Option<(usize, usize)>,
}

/// Called after each stage with the new patterns and the cumulative keep
/// masks. Implementations zero pruned weights, fine-tune with those masks
/// frozen, and return fresh importance scores.
pub trait FineTune {
    fn fine_tune(&mut self, stage: usize, patterns: &[TilePattern], masks: &[KeepMask]) -> Result<Vec<ScoreMap>>;
}

impl<F> FineTune for F
where
    F: FnMut(usize, &[TilePattern], &[KeepMask]) -> Result<Vec<ScoreMap>>,
{
    fn fine_tune(&mut self, stage: usize, patterns: &[TilePattern], masks: &[KeepMask]) -> Result<Vec<ScoreMap>> {
        self(stage, patterns, masks)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub target: f64,
    pub sparsity: Vec<f64>,
    pub aggregate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneOutcome {
    pub patterns: Vec<TilePattern>,
    /// Intersection of every stage's keep mask; pruned weights never return.
    pub masks: Vec<KeepMask>,
    pub history: Vec<StageRecord>,
}

impl PruneOutcome {
    /// Pattern sparsity pooled over all matrices.
    pub fn aggregate_sparsity(&self) -> f64 {
        aggregate_sparsity(&self.patterns)
    }
}

pub fn aggregate_sparsity(patterns: &[TilePattern]) -> f64 {
    let total: usize = patterns.iter().map(|p| p.k() * p.n()).sum();
    let kept: usize = patterns.iter().map(TilePattern::kept_elements).sum();
    if total == 0 {
        return 0.0;
    }
    1.0 - kept as f64 / total as f64
}

/// Alternate pruning stages and fine-tuning until the schedule's final
/// target is reached.
pub fn multi_stage_prune<F: FineTune + ?Sized>(
    initial_scores: Vec<ScoreMap>,
    schedule: &PruneSchedule,
    opts: &PruneOptions,
    fine_tune: &mut F,
) -> Result<PruneOutcome> {
    if initial_scores.is_empty() {
        return Err(Error::Config("no matrices to prune".into()));
    }
    let apriori: Option<Vec<AprioriConfig>> = match opts.apriori {
        None => None,
        Some((n1, n2)) => {
            let ew = match opts.ranking {
                Ranking::Global => ew_global_masks(&initial_scores, schedule.target())?,
                Ranking::PerMatrix => initial_scores
                    .iter()
                    .map(|s| ew_global_masks(std::slice::from_ref(s), schedule.target()).map(|mut v| v.remove(0)))
                    .collect::<Result<_>>()?,
            };
            Some(
                ew.iter()
                    .map(|m| AprioriConfig::new(n1, n2, column_sparsity(m)))
                    .collect::<Result<_>>()?,
            )
        }
    };

    let mut scores = initial_scores;
    let mut masks: Vec<KeepMask> = scores.iter().map(|s| KeepMask::all(s.rows(), s.cols(), true)).collect();
    let mut patterns: Vec<TilePattern> = Vec::new();
    let mut history = Vec::new();

    for (stage, &target) in schedule.stages().iter().enumerate() {
        let inputs: Vec<StageInput<'_>> = scores
            .iter()
            .enumerate()
            .map(|(m, s)| StageInput {
                scores: s,
                prior: patterns.get(m),
                apriori: apriori.as_ref().map(|a| &a[m]),
            })
            .collect();
        let next = match opts.ranking {
            Ranking::Global => prune_stage_pooled(&inputs, target, opts.g)?,
            Ranking::PerMatrix => inputs
                .iter()
                .map(|i| prune_stage_pooled(std::slice::from_ref(i), target, opts.g).map(|mut v| v.remove(0)))
                .collect::<Result<_>>()?,
        };
        masks = masks
            .iter()
            .zip(&next)
            .map(|(m, p)| m.intersect(&p.keep_mask()))
            .collect::<Result<_>>()?;
        patterns = next;
        history.push(StageRecord {
            target,
            sparsity: patterns.iter().map(TilePattern::sparsity).collect(),
            aggregate: aggregate_sparsity(&patterns),
        });
        let fresh = fine_tune.fine_tune(stage, &patterns, &masks)?;
        if fresh.len() != masks.len() {
            return Err(Error::FineTune {
                stage,
                reason: format!("returned {} score maps for {} matrices", fresh.len(), masks.len()),
            });
        }
        scores = fresh
            .iter()
            .zip(&masks)
            .map(|(s, m)| s.masked(m).and_then(|d| ScoreMap::new(d.into_matrix())))
            .collect::<Result<_>>()?;
    }

    Ok(PruneOutcome {
        patterns,
        masks,
        history,
    })
}

/// Tile + element overlay parameters: final sparsity `alpha` reached by
/// pruning `alpha + delta` tile-wise and restoring `delta` element-wise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TewConfig {
    pub alpha: f64,
    pub delta: f64,
}

impl TewConfig {
    pub fn new(alpha: f64, delta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && delta >= 0.0 && alpha + delta <= 1.0 + EPS) {
            return Err(Error::Config(format!("invalid overlay alpha={alpha} delta={delta}")));
        }
        Ok(TewConfig { alpha, delta })
    }

    /// Tile-wise sparsity to prune to before restoring.
    pub fn tile_sparsity(&self) -> f64 {
        (self.alpha + self.delta).min(1.0)
    }
}

/// Restore the `floor(delta * K * N)` highest-scored elements that `pattern`
/// prunes, keeping their original values, as a CSC matrix.
pub fn tew_overlay(
    w: &DenseMatrix,
    scores: &ScoreMap,
    pattern: &TilePattern,
    cfg: &TewConfig,
) -> Result<(TilePattern, CscMatrix)> {
    let (k, n) = (pattern.k(), pattern.n());
    if w.shape() != (k, n) || (scores.rows(), scores.cols()) != (k, n) {
        return Err(Error::dim("tew_overlay", "weights, scores and pattern must share a shape"));
    }
    let unit = k.max(pattern.g()) as f64 / (k * n).max(1) as f64;
    if (pattern.sparsity() - cfg.tile_sparsity()).abs() > unit + EPS {
        return Err(Error::Config(format!(
            "pattern sparsity {} is not within one unit of alpha + delta = {}",
            pattern.sparsity(),
            cfg.tile_sparsity()
        )));
    }
    let keep = pattern.keep_mask();
    let restore = floor_count(cfg.delta, k * n);
    let pruned: Vec<usize> = (0..k * n).filter(|&idx| !keep.get(idx / n, idx % n)).collect();
    if restore > pruned.len() {
        return Err(Error::Config(format!(
            "delta restores {restore} elements but the pattern prunes only {}",
            pruned.len()
        )));
    }
    let neg: Vec<f64> = pruned.iter().map(|&idx| -(scores.get(idx / n, idx % n) as f64)).collect();
    let mut chosen = KeepMask::all(k, n, false);
    for &p in rank_ascending(&neg).iter().take(restore) {
        let idx = pruned[p];
        chosen.set(idx / n, idx % n, true);
    }
    let csc = to_csc(w, |i, j, _| chosen.get(i, j));
    Ok((pattern.clone(), csc))
}

/// Prune `alpha + delta` tile-wise, then overlay the `delta` restore.
pub fn tew_prune(w: &DenseMatrix, scores: &ScoreMap, cfg: &TewConfig, g: usize) -> Result<(TilePattern, CscMatrix)> {
    let pattern = prune_stage(scores, cfg.tile_sparsity(), g)?;
    tew_overlay(w, scores, &pattern, cfg)
}

/// Element-wise reference mask for a single matrix.
pub fn ew_mask(scores: &ScoreMap, sparsity: f64) -> Result<KeepMask> {
    if sparsity >= 1.0 {
        return Ok(KeepMask::all(scores.rows(), scores.cols(), false));
    }
    generate_comparator_mask(MaskKind::ElementWise, scores, sparsity)
}
