//! A small ReLU MLP with hand-written backprop on synthetic clustered data.
//!
//! It exists to produce real loss gradients for importance scoring and to
//! fine-tune with frozen sparsity masks. Weights are stored `in x out`, so
//! each layer is `Y = X W + b` and its weight matrix is directly a `K x N`
//! pruning target.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::engine;
use crate::error::{Error, Result};
use crate::io::LayerRecord;
use crate::mask::KeepMask;
use crate::matrix::{gemm_dense_workers, DenseMatrix, Layout};
use crate::pattern::{compact, TilePattern};
use crate::prune::FineTune;
use crate::score::{importance_scores, ScoreMap};

/// Gaussian blobs around random class centres.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub train: usize,
    pub test: usize,
    pub dim: usize,
    pub classes: usize,
    /// Distance of every class centre from the origin.
    pub separation: f32,
    /// Per-coordinate noise standard deviation.
    pub noise: f32,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train: 4096,
            test: 1024,
            dim: 64,
            classes: 8,
            separation: 4.0,
            noise: 1.0,
            seed: 42,
        }
    }
}

/// Row-per-sample features with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub x: DenseMatrix,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `idx` as a new split.
    pub fn select(&self, idx: &[usize]) -> Split {
        let d = self.x.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.x.data()[i * d..(i + 1) * d]);
        }
        Split {
            x: DenseMatrix::new(idx.len(), d, Layout::RowMajor, data).expect("row selection"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub classes: usize,
    pub train: Split,
    pub test: Split,
}

impl SyntheticDataset {
    pub fn generate(cfg: &DatasetConfig) -> Result<Self> {
        if cfg.dim == 0 || cfg.classes < 2 || cfg.train == 0 || cfg.test == 0 {
            return Err(Error::Config(format!("degenerate dataset config {cfg:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let centres: Vec<Vec<f32>> = (0..cfg.classes)
            .map(|_| {
                let v: Vec<f32> = (0..cfg.dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
                v.into_iter().map(|x| x / norm * cfg.separation).collect()
            })
            .collect();
        let mut draw = |n: usize| {
            let mut data = Vec::with_capacity(n * cfg.dim);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let c = i % cfg.classes;
                labels.push(c);
                data.extend(
                    centres[c]
                        .iter()
                        .map(|&m| m + cfg.noise * rng.sample::<f32, _>(StandardNormal)),
                );
            }
            Split {
                x: DenseMatrix::new(n, cfg.dim, Layout::RowMajor, data).expect("dataset shape"),
                labels,
            }
        };
        let train = draw(cfg.train);
        let test = draw(cfg.test);
        Ok(SyntheticDataset {
            classes: cfg.classes,
            train,
            test,
        })
    }
}

/// One affine layer, `in x out` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub w: DenseMatrix,
    pub b: Vec<f32>,
}

/// Fully connected ReLU network ending in softmax cross-entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

pub const DEFAULT_WIDTHS: [usize; 4] = [64, 256, 256, 8];

impl MlpModel {
    /// He-initialized weights, zero biases.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|io| {
                let std = (2.0 / io[0] as f32).sqrt();
                let w = DenseMatrix::from_fn(io[0], io[1], Layout::RowMajor, |_, _| {
                    std * rng.sample::<f32, _>(StandardNormal)
                });
                Layer {
                    w,
                    b: vec![0.0; io[1]],
                }
            })
            .collect();
        Ok(MlpModel { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.b.len() != l.w.cols() {
                return Err(Error::dim("MlpModel", format!("layer {i}: bias {} for {} outputs", l.b.len(), l.w.cols())));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.w.rows() != l.w.cols() {
                    return Err(Error::dim(
                        "MlpModel",
                        format!("layer {i} outputs {} but layer {} takes {}", l.w.cols(), i + 1, next.w.rows()),
                    ));
                }
            }
        }
        let layers = layers
            .into_iter()
            .map(|l| Layer {
                w: l.w.to_layout(Layout::RowMajor),
                b: l.b,
            })
            .collect();
        Ok(MlpModel { layers })
    }

    pub fn from_records(records: Vec<LayerRecord>) -> Result<Self> {
        Self::from_layers(records.into_iter().map(|r| Layer { w: r.weight, b: r.bias }).collect())
    }

    pub fn to_records(&self) -> Vec<LayerRecord> {
        self.layers
            .iter()
            .map(|l| LayerRecord {
                weight: l.w.clone(),
                bias: l.b.clone(),
            })
            .collect()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().unwrap().w.cols()
    }

    /// Hidden layers are pruned; the classifier layer stays dense.
    pub fn prunable(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn prunable_weights(&self) -> Vec<&DenseMatrix> {
        self.layers[..self.prunable()].iter().map(|l| &l.w).collect()
    }

    /// Zero every weight outside `masks` (one per prunable layer).
    pub fn apply_masks(&mut self, masks: &[KeepMask]) -> Result<()> {
        self.check_prunable(masks.len())?;
        for (l, m) in self.layers.iter_mut().zip(masks) {
            m.apply_in_place(&mut l.w)?;
        }
        Ok(())
    }

    fn check_prunable(&self, n: usize) -> Result<()> {
        if n != self.prunable() {
            return Err(Error::Config(format!("{n} masks or patterns for {} prunable layers", self.prunable())));
        }
        Ok(())
    }

    /// Layer inputs (starting with `x`) and final logits.
    fn forward(&self, x: &DenseMatrix, workers: usize) -> Result<(Vec<DenseMatrix>, DenseMatrix)> {
        let mut acts = vec![x.clone()];
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = gemm_dense_workers(acts.last().unwrap(), &l.w, workers)?;
            bias_act(&mut z, &l.b, i + 1 < self.layers.len());
            if i + 1 == self.layers.len() {
                return Ok((acts, z));
            }
            acts.push(z);
        }
        unreachable!("model has at least one layer")
    }

    /// Logits for `x`.
    pub fn logits(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward(x, 1)?.1)
    }

    /// Logits with prunable layers executed tile-wise.
    pub fn logits_tw(&self, x: &DenseMatrix, patterns: &[TilePattern], workers: usize) -> Result<DenseMatrix> {
        self.check_prunable(patterns.len())?;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = match patterns.get(i) {
                Some(p) => engine::gemm_tw_workers(&h, &compact(&l.w, p)?, workers)?,
                None => gemm_dense_workers(&h, &l.w, workers)?,
            };
            bias_act(&mut z, &l.b, i + 1 < self.layers.len());
            h = z;
        }
        Ok(h)
    }

    /// Mean cross-entropy evaluated entirely in `f64`.
    ///
    /// Slow reference used to validate gradients by finite differences,
    /// where `f32` round-off would swamp small perturbations.
    pub fn loss_f64(&self, x: &DenseMatrix, labels: &[usize]) -> f64 {
        let mut total = 0.0f64;
        for (s, &y) in labels.iter().enumerate() {
            let mut h: Vec<f64> = (0..x.cols()).map(|j| x.get(s, j) as f64).collect();
            for (i, l) in self.layers.iter().enumerate() {
                let mut z: Vec<f64> = l.b.iter().map(|&b| b as f64).collect();
                for (k, &hk) in h.iter().enumerate() {
                    if hk == 0.0 {
                        continue;
                    }
                    for (o, zo) in z.iter_mut().enumerate() {
                        *zo += hk * l.w.get(k, o) as f64;
                    }
                }
                if i + 1 < self.layers.len() {
                    z.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                h = z;
            }
            let max = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + h.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - h[y];
        }
        total / labels.len().max(1) as f64
    }
}

/// Add the bias row and optionally apply ReLU in one pass.
fn bias_act(z: &mut DenseMatrix, b: &[f32], relu: bool) {
    let cols = z.cols();
    for row in z.data_mut().chunks_exact_mut(cols) {
        for (v, &bj) in row.iter_mut().zip(b) {
            let t = *v + bj;
            // `t < 0` rather than `max`, so NaN propagates and divergence shows
            *v = if relu && t < 0.0 { 0.0 } else { t };
        }
    }
}

/// Softmax in place per row; returns the mean cross-entropy for `labels`.
fn softmax_xent(logits: &mut DenseMatrix, labels: &[usize]) -> f32 {
    let cols = logits.cols();
    let mut loss = 0.0f64;
    for (row, &y) in logits.data_mut().chunks_exact_mut(cols).zip(labels) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        let p = row[y];
        loss -= if p.is_nan() { f64::NAN } else { (p.max(f32::MIN_POSITIVE) as f64).ln() };
    }
    (loss / labels.len().max(1) as f64) as f32
}

/// Loss gradients for every layer, averaged over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSnapshot {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f32>>,
    pub loss: f32,
}

/// Forward and backward pass over the whole of `batch`.
pub fn grad_snapshot(model: &MlpModel, batch: &Split) -> Result<GradSnapshot> {
    grad_workers(model, batch, 1)
}

fn grad_workers(model: &MlpModel, batch: &Split, workers: usize) -> Result<GradSnapshot> {
    if batch.x.cols() != model.inputs() {
        return Err(Error::dim(
            "grad_snapshot",
            format!("batch has {} features, model takes {}", batch.x.cols(), model.inputs()),
        ));
    }
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= model.outputs()) {
        return Err(Error::Config(format!("label {y} out of range for {} classes", model.outputs())));
    }
    let (acts, mut probs) = model.forward(&batch.x, workers)?;
    let loss = softmax_xent(&mut probs, &batch.labels);

    // dL/dz for the output layer: (softmax - onehot) / B
    let inv = 1.0 / batch.len().max(1) as f32;
    let classes = probs.cols();
    for (row, &y) in probs.data_mut().chunks_exact_mut(classes).zip(&batch.labels) {
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v *= inv);
    }

    let n = model.layers.len();
    let mut weights = vec![DenseMatrix::zeros(0, 0, Layout::RowMajor); n];
    let mut biases = vec![Vec::new(); n];
    let mut dz = probs;
    for i in (0..n).rev() {
        let input = &acts[i];
        weights[i] = gemm_dense_workers(&input.transpose(), &dz, workers)?;
        let mut db = vec![0.0f32; dz.cols()];
        for row in dz.data().chunks_exact(dz.cols()) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
        biases[i] = db;
        if i > 0 {
            let mut dh = gemm_dense_workers(&dz, &model.layers[i].w.transpose(), workers)?;
            // ReLU: the layer input is the previous activation, positive where live
            for (d, &a) in dh.data_mut().iter_mut().zip(input.data()) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            dz = dh;
        }
    }
    Ok(GradSnapshot { weights, biases, loss })
}

/// Importance scores `|g * w|` for the prunable layers.
pub fn layer_scores(model: &MlpModel, batch: &Split) -> Result<Vec<ScoreMap>> {
    let g = grad_snapshot(model, batch)?;
    model
        .prunable_weights()
        .into_iter()
        .zip(&g.weights)
        .map(|(w, gw)| importance_scores(w, gw))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.05,
            batch: 64,
            seed: 42,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Full-training-set loss before the first update.
    pub initial_loss: f32,
    /// Mean minibatch loss of each epoch.
    pub epoch_loss: Vec<f32>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f32 {
        self.epoch_loss.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Minibatch SGD; deterministic for a given seed and any worker count.
pub fn train(model: &mut MlpModel, data: &Split, cfg: &TrainConfig) -> Result<TrainReport> {
    sgd(model, data, cfg, None)
}

/// [`train`] with the weights outside `masks` zeroed first and every
/// gradient masked before its update, so pruned weights stay exactly zero.
pub fn fine_tune_masked(model: &mut MlpModel, data: &Split, masks: &[KeepMask], cfg: &TrainConfig) -> Result<TrainReport> {
    model.apply_masks(masks)?;
    sgd(model, data, cfg, Some(masks))
}

fn sgd(model: &mut MlpModel, data: &Split, cfg: &TrainConfig, masks: Option<&[KeepMask]>) -> Result<TrainReport> {
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let initial_loss = grad_workers(model, data, cfg.workers)?.loss;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0f64;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch) {
            let mut g = grad_workers(model, &data.select(idx), cfg.workers)?;
            if !g.loss.is_finite() {
                return Err(Error::Divergence { epoch, loss: g.loss });
            }
            if let Some(masks) = masks {
                for (gw, m) in g.weights.iter_mut().zip(masks) {
                    m.apply_in_place(gw)?;
                }
            }
            for ((l, gw), gb) in model.layers.iter_mut().zip(&g.weights).zip(&g.biases) {
                for (w, d) in l.w.data_mut().iter_mut().zip(gw.data()) {
                    *w -= cfg.lr * d;
                }
                for (b, d) in l.b.iter_mut().zip(gb) {
                    *b -= cfg.lr * d;
                }
            }
            sum += g.loss as f64;
            batches += 1;
        }
        let mean = (sum / batches as f64) as f32;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        epoch_loss.push(mean);
    }
    Ok(TrainReport {
        initial_loss,
        epoch_loss,
    })
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Predicted class per sample; pruned layers run through the tile engine
/// when `patterns` are given.
pub fn predict(model: &MlpModel, x: &DenseMatrix, patterns: Option<&[TilePattern]>) -> Result<Vec<usize>> {
    let logits = match patterns {
        Some(p) => model.logits_tw(x, p, 1)?,
        None => model.logits(x)?,
    };
    Ok(logits.data().chunks_exact(logits.cols()).map(argmax).collect())
}

/// Fraction of samples classified correctly.
pub fn evaluate(model: &MlpModel, data: &Split, patterns: Option<&[TilePattern]>) -> Result<f64> {
    let pred = predict(model, &data.x, patterns)?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Fine-tuning hook for the multi-stage pruner: zero pruned weights, train
/// with masks frozen, and re-score on the training set.
pub struct MaskedFineTune<'a> {
    pub model: &'a mut MlpModel,
    pub data: &'a Split,
    pub cfg: TrainConfig,
    /// Accuracy on `eval` after each stage, when an evaluation split is set.
    pub eval: Option<&'a Split>,
    pub stage_accuracy: Vec<f64>,
}

impl<'a> MaskedFineTune<'a> {
    pub fn new(model: &'a mut MlpModel, data: &'a Split, cfg: TrainConfig) -> Self {
        MaskedFineTune {
            model,
            data,
            cfg,
            eval: None,
            stage_accuracy: Vec::new(),
        }
    }
}

impl FineTune for MaskedFineTune<'_> {
    fn fine_tune(&mut self, stage: usize, _patterns: &[TilePattern], masks: &[KeepMask]) -> Result<Vec<ScoreMap>> {
        let cfg = TrainConfig {
            seed: self.cfg.seed.wrapping_add(stage as u64 + 1),
            ..self.cfg.clone()
        };
        fine_tune_masked(self.model, self.data, masks, &cfg)?;
        if let Some(eval) = self.eval {
            self.stage_accuracy.push(evaluate(self.model, eval, None)?);
        }
        layer_scores(self.model, self.data)
    }
}
