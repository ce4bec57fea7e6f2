use rayon::prelude::*;

use super::{derive_seed, position_to_channel, render_frame_into, simulate_trajectory, SceneConfig, CHANNELS};
use crate::channel::{best_beam, Codebook, MultipathConfig, UlaConfig};
use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Header of a dataset: stream length, window sizes and frame geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetMeta {
    pub frames_total: usize,
    pub history: usize,
    pub horizon: usize,
    pub codebook_size: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl DatasetMeta {
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Number of timestamps `t` with a full history and horizon: `T - L - J`.
    pub fn sample_count(&self) -> usize {
        self.frames_total.saturating_sub(self.history + self.horizon)
    }

    /// Valid sample timestamps `L ..= T - J - 1`.
    pub fn timestamps(&self) -> std::ops::Range<usize> {
        self.history..self.history + self.sample_count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames_total < self.history + self.horizon + 1 {
            bail!(
                Config,
                "{} frames cannot hold a history of {} and a horizon of {} (need at least {})",
                self.frames_total,
                self.history,
                self.horizon,
                self.history + self.horizon + 1
            );
        }
        if self.codebook_size == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            bail!(Config, "dataset dimensions must be positive");
        }
        Ok(())
    }
}

/// Contiguous train/validation partition of the valid timestamps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Split {
    /// The earliest `ratio` fraction (rounded) of `timestamps` goes to training.
    pub fn contiguous(timestamps: std::ops::Range<usize>, ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            bail!(Config, "split ratio must lie in (0, 1), got {}", ratio);
        }
        let all: Vec<usize> = timestamps.collect();
        let n_train = ((all.len() as f64) * ratio).round() as usize;
        let validation = all[n_train..].to_vec();
        let mut train = all;
        train.truncate(n_train);
        Ok(Self { train, validation })
    }
}

/// One training example: frames `t - L ..= t` and labels for slots `t ..= t + J`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSequence<S> {
    pub timestamp: usize,
    pub frames: Vec<Tensor<S>>,
    pub labels: Vec<usize>,
}

/// Frame stream, oracle labels and UE geometry of one simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    meta: DatasetMeta,
    frames: Vec<f32>,
    labels: Vec<u32>,
    geometry: Vec<(f64, f64)>,
    split: Split,
}

impl Dataset {
    pub fn new(
        meta: DatasetMeta,
        frames: Vec<f32>,
        labels: Vec<u32>,
        geometry: Vec<(f64, f64)>,
        split_ratio: f64,
    ) -> Result<Self> {
        meta.validate()?;
        let t = meta.frames_total;
        if frames.len() != t * meta.frame_len() || labels.len() != t || geometry.len() != t {
            bail!(Dimension, "dataset streams do not match {} frames", t);
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= meta.codebook_size) {
            bail!(Index, "label {} outside codebook of {}", bad, meta.codebook_size);
        }
        let split = Split::contiguous(meta.timestamps(), split_ratio)?;
        Ok(Self {
            meta,
            frames,
            labels,
            geometry,
            split,
        })
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn with_split_ratio(mut self, ratio: f64) -> Result<Self> {
        self.split = Split::contiguous(self.meta.timestamps(), ratio)?;
        Ok(self)
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let len = self.meta.frame_len();
        &self.frames[t * len..(t + 1) * len]
    }

    /// Per-slot oracle beam indices (0-based).
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// `(azimuth, range)` of the UE per slot.
    pub fn geometry(&self) -> &[(f64, f64)] {
        &self.geometry
    }

    /// Labels for slots `t ..= t + J`.
    pub fn label_window(&self, t: usize) -> Vec<usize> {
        self.labels[t..=t + self.meta.horizon].iter().map(|&l| l as usize).collect()
    }

    pub fn sample<S: Scalar>(&self, t: usize) -> Result<SampleSequence<S>> {
        if !self.meta.timestamps().contains(&t) {
            bail!(Index, "timestamp {} has no full window (valid {:?})", t, self.meta.timestamps());
        }
        let shape = vec![self.meta.channels, self.meta.height, self.meta.width];
        let frames = (t - self.meta.history..=t)
            .map(|s| Tensor::new(shape.clone(), self.frame(s).iter().map(|&v| S::of(v as f64)).collect()))
            .collect::<Result<_>>()?;
        Ok(SampleSequence {
            timestamp: t,
            frames,
            labels: self.label_window(t),
        })
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.meta.codebook_size];
        self.labels.iter().for_each(|&l| hist[l as usize] += 1);
        hist
    }
}

/// Simulates one trajectory of `scene.frames_total` slots, renders every frame,
/// and labels each slot with the exhaustive-search beam of its channel.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset(
    scene: &SceneConfig,
    ula: &UlaConfig,
    codebook: &Codebook<f64>,
    multipath: &MultipathConfig,
    history: usize,
    horizon: usize,
    split_ratio: f64,
    seed: u64,
) -> Result<Dataset> {
    scene.validate()?;
    ula.validate()?;
    multipath.validate()?;
    let meta = DatasetMeta {
        frames_total: scene.frames_total,
        history,
        horizon,
        codebook_size: codebook.len(),
        channels: CHANNELS,
        height: scene.height,
        width: scene.width,
    };
    meta.validate()?;
    if codebook.beams()[0].len() != ula.n_antennas {
        bail!(Dimension, "codebook beams have length {}, array has {} antennas", codebook.beams()[0].len(), ula.n_antennas);
    }

    let trajectory = simulate_trajectory(scene, seed)?;
    let geometry: Vec<(f64, f64)> = trajectory.theta.iter().copied().zip(trajectory.range.iter().copied()).collect();

    let mut frames = vec![0f32; meta.frames_total * meta.frame_len()];
    frames
        .par_chunks_mut(meta.frame_len())
        .zip(geometry.par_iter())
        .enumerate()
        .try_for_each(|(t, (buf, &(theta, range)))| {
            render_frame_into(theta, range, scene, derive_seed(seed, t as u64 + 1), buf)
        })?;

    let labels = geometry
        .iter()
        .map(|&(theta, range)| {
            let h = position_to_channel::<f64>(theta, range, ula, multipath)?;
            Ok(best_beam(&h, codebook)? as u32)
        })
        .collect::<Result<Vec<_>>>()?;

    Dataset::new(meta, frames, labels, geometry, split_ratio)
}
