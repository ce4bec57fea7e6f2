//! Mini-batch training with validation-loss model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::model::{assemble_batch, ModelParams};
use crate::preprocess::{PreprocessedStream, DEFAULT_THRESHOLD};
use crate::scalar::Scalar;
use crate::scene::Dataset;
use crate::tensor::{BatchNormMode, BatchStats, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub cycle_epochs: usize,
    pub gamma: f64,
    pub mask_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr_init: 1e-4,
            lr_min: 1e-6,
            cycle_epochs: 10,
            gamma: 2.0,
            mask_threshold: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be at least 1");
        }
        if self.cycle_epochs == 0 {
            bail!(Config, "cycle_epochs must be at least 1");
        }
        if !(self.lr_min > 0.0 && self.lr_init > self.lr_min && self.lr_init.is_finite()) {
            bail!(Config, "need lr_init > lr_min > 0, got {} and {}", self.lr_init, self.lr_min);
        }
        crate::loss::LossConfig::new(self.gamma)?;
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            bail!(Config, "mask_threshold must lie in (0, 1), got {}", self.mask_threshold);
        }
        Ok(())
    }
}

/// Cyclic cosine annealing from `lr_init` down towards `lr_min`, restarting every `cycle_epochs`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let cycle = cfg.cycle_epochs.max(1);
    let phase = (epoch % cycle) as f64 / cycle as f64;
    cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + (std::f64::consts::PI * phase).cos())
}

/// Adam moments, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &ModelParams<S>) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![S::zero(); t.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn optimizer_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &[Vec<S>],
    state: &mut OptimizerState<S>,
    lr: f64,
) -> Result<()> {
    let n = params.tensors().len();
    if grads.len() != n || state.m.len() != n {
        bail!(Dimension, "{} gradients and {} moments for {} parameters", grads.len(), state.m.len(), n);
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != params.tensors()[i].numel() || state.m[i].len() != g.len() {
            bail!(Dimension, "gradient of {} has {} entries, parameter has {}", params.names()[i], g.len(), params.tensors()[i].numel());
        }
        if g.iter().any(|v| !v.is_finite()) {
            bail!(Numeric, "non-finite gradient for parameter {}", params.names()[i]);
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::of(state.beta1), S::of(state.beta2));
    let c1 = S::of(1.0 - state.beta1.powi(t));
    let c2 = S::of(1.0 - state.beta2.powi(t));
    let (lr, eps) = (S::of(lr), S::of(state.eps));
    let one = S::one();
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][k];
            let m = b1 * state.m[i][k] + (one - b1) * g;
            let v = b2 * state.v[i][k] + (one - b2) * g * g;
            state.m[i][k] = m;
            state.v[i][k] = v;
            *w -= lr * (m / c1) / ((v / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Loss, gradients and batch statistics of one batch.
#[derive(Debug, Clone)]
pub struct BatchOutput<S> {
    /// `(1 / (B (J + 1))) * sum of per-sample task losses`.
    pub loss: S,
    /// Per-parameter gradients in canonical order (empty unless requested).
    pub grads: Vec<Vec<S>>,
    /// Train-mode batch statistics, one per CNN stage.
    pub bn_stats: Vec<BatchStats<S>>,
}

/// Forward (and optionally backward) pass over a batch of windows.
///
/// `frames` is `[B * (L + 1), 3, H, W]`; `labels` holds `B * (J + 1)` beam
/// indices, sample-major.
pub fn batch_loss<S: Scalar>(
    params: &ModelParams<S>,
    frames: Tensor<S>,
    labels: &[usize],
    gamma: f64,
    mode: BatchNormMode,
    with_grads: bool,
) -> Result<BatchOutput<S>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, with_grads);
    let x = tape.leaf(frames);
    let pass = params.forward(&mut tape, &bound, x, mode)?;
    let slots = params.config().slots();
    if labels.len() != pass.batch * slots {
        bail!(Dimension, "{} labels for {} samples of {} slots", labels.len(), pass.batch, slots);
    }
    let total = tape.focal_loss(pass.logits, labels, S::of(gamma))?;
    let loss = tape.scale(total, S::one() / S::of((pass.batch * slots) as f64));
    let value = tape.value(loss).item()?;
    let grads = if with_grads {
        tape.backward(loss)?;
        bound
            .all
            .iter()
            .map(|&v| tape.grad(v).map(<[S]>::to_vec).unwrap_or_else(|| vec![S::zero(); tape.value(v).numel()]))
            .collect()
    } else {
        Vec::new()
    };
    Ok(BatchOutput {
        loss: value,
        grads,
        bn_stats: pass.bn_stats,
    })
}

fn batch_labels(ds: &Dataset, timestamps: &[usize]) -> Vec<usize> {
    timestamps.iter().flat_map(|&t| ds.label_window(t)).collect()
}

/// One pass over `train` timestamps in `batch_size` chunks, shuffled by
/// `(seed, epoch)`. Returns the mean per-sample, per-slot loss.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<S: Scalar>(
    params: &mut ModelParams<S>,
    optimizer: &mut OptimizerState<S>,
    ds: &Dataset,
    stream: &PreprocessedStream<S>,
    train: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    if train.is_empty() {
        bail!(Usage, "training split is empty");
    }
    let mut order = train.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(crate::scene::derive_seed(cfg.seed, epoch as u64)));
    let lr = lr_schedule(epoch, cfg);
    let mut weighted = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let frames = assemble_batch(stream, chunk, params.config())?;
        let out = batch_loss(params, frames, &batch_labels(ds, chunk), cfg.gamma, BatchNormMode::Train, true)?;
        if !out.loss.is_finite() {
            bail!(Numeric, "training loss became non-finite at epoch {}", epoch);
        }
        optimizer_step(params, &out.grads, optimizer, lr)?;
        params.update_bn(&out.bn_stats)?;
        weighted += out.loss.f64() * chunk.len() as f64;
    }
    Ok(weighted / train.len() as f64)
}

/// Mean per-sample, per-slot focal loss with eval-mode batch norm.
pub fn validate<S: Scalar>(
    params: &ModelParams<S>,
    ds: &Dataset,
    stream: &PreprocessedStream<S>,
    timestamps: &[usize],
    gamma: f64,
    batch_size: usize,
) -> Result<f64> {
    if timestamps.is_empty() {
        bail!(Usage, "validation split is empty");
    }
    let mut weighted = 0.0;
    for chunk in timestamps.chunks(batch_size.max(1)) {
        let frames = assemble_batch(stream, chunk, params.config())?;
        let out = batch_loss(params, frames, &batch_labels(ds, chunk), gamma, BatchNormMode::Eval, false)?;
        weighted += out.loss.f64() * chunk.len() as f64;
    }
    Ok(weighted / timestamps.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the selected model; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.best_epoch.map(|i| self.epochs[i].val_loss)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
        }
        s
    }
}

/// Trains for `cfg.epochs` epochs and returns the parameters with the lowest
/// validation loss (earliest epoch on ties).
pub fn fit<S: Scalar>(params: ModelParams<S>, ds: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams<S>, TrainReport)> {
    fit_with(params, ds, cfg, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with<S: Scalar>(
    mut params: ModelParams<S>,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams<S>, TrainReport)> {
    cfg.validate()?;
    params.config().check_dataset(ds.meta())?;
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok((params, report));
    }
    let split = ds.split();
    if split.train.is_empty() || split.validation.is_empty() {
        bail!(Usage, "both train and validation splits must be nonempty");
    }
    let stream = PreprocessedStream::new(ds, cfg.mask_threshold)?;
    let mut optimizer = OptimizerState::new(&params);
    let mut best = params.clone();
    for epoch in 0..cfg.epochs {
        let train_loss = train_epoch(&mut params, &mut optimizer, ds, &stream, &split.train, cfg, epoch)?;
        let val_loss = validate(&params, ds, &stream, &split.validation, cfg.gamma, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: lr_schedule(epoch, cfg),
        };
        on_epoch(&record);
        if report.best_val_loss().map_or(true, |b| val_loss < b) {
            report.best_epoch = Some(report.epochs.len());
            best = params.clone();
        }
        report.epochs.push(record);
    }
    Ok((best, report))
}
