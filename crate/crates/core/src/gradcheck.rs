//! Finite-difference check of the full model's task-loss gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{BatchNormMode, Tensor};
use crate::train::batch_loss;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    /// Entries sampled from every parameter tensor (fewer if the tensor is smaller).
    pub per_tensor: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator. Central differences
    /// at step 1e-6 carry roughly 1e-10 of roundoff in f64, so gradients
    /// below the floor are effectively compared in absolute terms.
    pub floor: f64,
    pub batch: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            per_tensor: 2,
            step: 1e-6,
            tolerance: 1e-4,
            floor: 1e-5,
            batch: 2,
            gamma: 2.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !(e.rel_err <= self.tolerance))
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Random preprocessed-looking input: each window's first frame is zero,
/// the rest are uniform in `[0, 1)` inside the unpadded area.
fn random_batch(cfg: &ModelConfig, batch: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<f64>, Vec<usize>)> {
    let (ph, pw) = cfg.padded_dims();
    let (h, w) = (cfg.frame_height, cfg.frame_width);
    let (top, left) = ((ph - h) / 2, (pw - w) / 2);
    let seq = cfg.seq_len();
    let c = crate::scene::CHANNELS;
    let mut data = vec![0.0; batch * seq * c * ph * pw];
    for f in 0..batch * seq {
        if f % seq == 0 {
            continue;
        }
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    data[((f * c + ch) * ph + top + i) * pw + left + j] = rng.gen();
                }
            }
        }
    }
    let labels = (0..batch * cfg.slots()).map(|_| rng.gen_range(0..cfg.codebook_size)).collect();
    Ok((Tensor::new(vec![batch * seq, c, ph, pw], data)?, labels))
}

/// Compares backpropagated gradients of the batch task loss (train-mode
/// batch norm) against central differences on sampled entries of every
/// parameter tensor.
///
/// `corrupt` names a tensor whose analytic gradient is deliberately
/// perturbed, as a negative control.
pub fn full_model_gradcheck(model: &ModelConfig, cfg: &GradCheckConfig, corrupt: Option<&str>) -> Result<GradCheckReport> {
    if cfg.batch == 0 || cfg.per_tensor == 0 || !(cfg.step > 0.0) {
        bail!(Config, "gradcheck needs batch, per_tensor and step to be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::<f64>::init(model, cfg.seed)?;
    if let Some(name) = corrupt {
        if params.get(name).is_none() {
            bail!(Config, "no parameter named {:?}", name);
        }
    }
    let (frames, labels) = random_batch(model, cfg.batch, &mut rng)?;
    let loss_at = |p: &ModelParams<f64>| -> Result<f64> {
        Ok(batch_loss(p, frames.clone(), &labels, cfg.gamma, BatchNormMode::Train, false)?.loss)
    };
    let mut grads = batch_loss(&params, frames.clone(), &labels, cfg.gamma, BatchNormMode::Train, true)?.grads;
    if let Some(name) = corrupt {
        let i = params.names().iter().position(|n| n == name).expect("checked above");
        grads[i].iter_mut().for_each(|g| *g = 1.5 * *g + 1e-3);
    }

    let mut entries = Vec::new();
    for (ti, name) in params.names().iter().enumerate() {
        let numel = params.tensors()[ti].numel();
        for index in sample(&mut rng, numel, cfg.per_tensor.min(numel)).into_vec() {
            let shifted = |delta: f64| -> Result<f64> {
                let mut p = params.clone();
                let t = &mut p.tensors_mut()[ti];
                let mut data = t.data().to_vec();
                data[index] += delta;
                *t = Tensor::new(t.shape().to_vec(), data)?;
                loss_at(&p)
            };
            let numeric = (shifted(cfg.step)? - shifted(-cfg.step)?) / (2.0 * cfg.step);
            let analytic = grads[ti][index];
            entries.push(GradCheckEntry {
                name: name.clone(),
                index,
                analytic,
                numeric,
                rel_err: relative_error(analytic, numeric, cfg.floor),
            });
        }
    }
    Ok(GradCheckReport {
        entries,
        tolerance: cfg.tolerance,
    })
}
