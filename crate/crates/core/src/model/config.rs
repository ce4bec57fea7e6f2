use std::fmt;
use std::str::FromStr;

use crate::error::{bail, Result};
use crate::scene::DatasetMeta;

/// Number of conv/pool stages in the frame embedding.
pub const CNN_LAYERS: usize = 5;
/// Each stage halves the resolution, so padded frames are multiples of this.
pub const SPATIAL_MULTIPLE: usize = 1 << CNN_LAYERS;

/// How the last CNN feature map becomes a vector before the embedding map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedPool {
    /// Keep every spatial cell (`c5 * h/32 * w/32` features).
    Flatten,
    /// Global average per channel (`c5` features).
    Average,
}

impl fmt::Display for EmbedPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Flatten => "flatten",
            Self::Average => "average",
        })
    }
}

impl FromStr for EmbedPool {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flatten" => Ok(Self::Flatten),
            "average" | "gap" => Ok(Self::Average),
            _ => bail!(Config, "unknown embed pool {:?} (expected flatten or average)", s),
        }
    }
}

/// Shapes of the CNN -> GRU -> residual MHA -> prediction-head network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub cnn_channels: [usize; CNN_LAYERS],
    pub embed_dim: usize,
    pub embed_pool: EmbedPool,
    pub gru_hidden: usize,
    pub mha: bool,
    pub mha_heads: usize,
    pub pred_hidden: usize,
    pub history: usize,
    pub horizon: usize,
    pub codebook_size: usize,
    pub frame_height: usize,
    pub frame_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale network for 64x64 frames, L = 4, J = 3, C = 32 (under 2e5 parameters).
    pub fn desk() -> Self {
        Self {
            cnn_channels: [8, 16, 32, 64, 64],
            embed_dim: 64,
            embed_pool: EmbedPool::Flatten,
            gru_hidden: 96,
            mha: true,
            mha_heads: 8,
            pred_hidden: 64,
            history: 4,
            horizon: 3,
            codebook_size: 32,
            frame_height: 64,
            frame_width: 64,
        }
    }

    /// Small network for finite-difference checks: 8x8 frames, L = 2, J = 1, C = 4.
    pub fn tiny() -> Self {
        Self {
            cnn_channels: [2, 3, 3, 4, 4],
            embed_dim: 6,
            embed_pool: EmbedPool::Flatten,
            gru_hidden: 4,
            mha: true,
            mha_heads: 2,
            pred_hidden: 5,
            history: 2,
            horizon: 1,
            codebook_size: 4,
            frame_height: 8,
            frame_width: 8,
        }
    }

    /// Widths sized to roughly 1.8e6 parameters at 64x64, L = 8, J = 6, C = 32.
    pub fn paper_scale() -> Self {
        Self {
            cnn_channels: [32, 64, 128, 256, 256],
            embed_dim: 128,
            embed_pool: EmbedPool::Flatten,
            gru_hidden: 256,
            mha: true,
            mha_heads: 8,
            pred_hidden: 256,
            history: 8,
            horizon: 6,
            codebook_size: 32,
            frame_height: 64,
            frame_width: 64,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            "paper" | "paper_scale" => Ok(Self::paper_scale()),
            _ => bail!(Config, "unknown model preset {:?} (expected desk, tiny or paper)", name),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cnn_channels.contains(&0) {
            bail!(Config, "cnn channel widths must be positive, got {:?}", self.cnn_channels);
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("gru_hidden", self.gru_hidden),
            ("pred_hidden", self.pred_hidden),
            ("codebook_size", self.codebook_size),
            ("frame_height", self.frame_height),
            ("frame_width", self.frame_width),
        ] {
            if v == 0 {
                bail!(Config, "{} must be positive", name);
            }
        }
        if self.mha && (self.mha_heads == 0 || self.gru_hidden % self.mha_heads != 0) {
            bail!(
                Config,
                "gru_hidden {} is not divisible by {} attention heads",
                self.gru_hidden,
                self.mha_heads
            );
        }
        Ok(())
    }

    /// Frame size after centred zero padding to multiples of 32.
    pub fn padded_dims(&self) -> (usize, usize) {
        let up = |v: usize| v.div_ceil(SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE;
        (up(self.frame_height), up(self.frame_width))
    }

    /// Length of the vector fed to the embedding map.
    pub fn cnn_output_len(&self) -> usize {
        let c5 = self.cnn_channels[CNN_LAYERS - 1];
        match self.embed_pool {
            EmbedPool::Average => c5,
            EmbedPool::Flatten => {
                let (h, w) = self.padded_dims();
                c5 * (h / SPATIAL_MULTIPLE) * (w / SPATIAL_MULTIPLE)
            }
        }
    }

    /// Width of `[mean-pooled attention, context, current feature]`.
    pub fn fuse_dim(&self) -> usize {
        2 * self.gru_hidden + self.embed_dim
    }

    pub fn seq_len(&self) -> usize {
        self.history + 1
    }

    pub fn slots(&self) -> usize {
        self.horizon + 1
    }

    /// Fails with a mismatch error if the dataset does not fit this network.
    pub fn check_dataset(&self, meta: &DatasetMeta) -> Result<()> {
        let mut diffs = Vec::new();
        for (name, model, data) in [
            ("codebook_size", self.codebook_size, meta.codebook_size),
            ("history", self.history, meta.history),
            ("horizon", self.horizon, meta.horizon),
            ("height", self.frame_height, meta.height),
            ("width", self.frame_width, meta.width),
            ("channels", crate::scene::CHANNELS, meta.channels),
        ] {
            if model != data {
                diffs.push(format!("{name}: model {model}, dataset {data}"));
            }
        }
        if !diffs.is_empty() {
            bail!(Mismatch, "checkpoint and dataset disagree ({})", diffs.join("; "));
        }
        Ok(())
    }

    pub fn to_entries(&self) -> Vec<(String, String)> {
        let ch = self.cnn_channels.map(|c| c.to_string()).join(",");
        [
            ("cnn_channels", ch),
            ("embed_dim", self.embed_dim.to_string()),
            ("embed_pool", self.embed_pool.to_string()),
            ("gru_hidden", self.gru_hidden.to_string()),
            ("mha", if self.mha { "on" } else { "off" }.to_string()),
            ("mha_heads", self.mha_heads.to_string()),
            ("pred_hidden", self.pred_hidden.to_string()),
            ("history", self.history.to_string()),
            ("horizon", self.horizon.to_string()),
            ("codebook_size", self.codebook_size.to_string()),
            ("frame_height", self.frame_height.to_string()),
            ("frame_width", self.frame_width.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Sets one field from its `key=value` form. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num(key: &str, v: &str) -> Result<usize> {
            v.parse().map_err(|_| crate::Error::Config(format!("{key}: expected an integer, got {v:?}")))
        }
        match key {
            "cnn_channels" => {
                let parts: Vec<usize> = value.split(',').map(|p| num(key, p.trim())).collect::<Result<_>>()?;
                let Ok(arr) = <[usize; CNN_LAYERS]>::try_from(parts) else {
                    bail!(Config, "cnn_channels needs exactly {} widths, got {:?}", CNN_LAYERS, value);
                };
                self.cnn_channels = arr;
            }
            "embed_dim" => self.embed_dim = num(key, value)?,
            "embed_pool" => self.embed_pool = value.parse()?,
            "gru_hidden" => self.gru_hidden = num(key, value)?,
            "mha" => self.mha = parse_switch(key, value)?,
            "mha_heads" => self.mha_heads = num(key, value)?,
            "pred_hidden" => self.pred_hidden = num(key, value)?,
            "history" => self.history = num(key, value)?,
            "horizon" => self.horizon = num(key, value)?,
            "codebook_size" => self.codebook_size = num(key, value)?,
            "frame_height" => self.frame_height = num(key, value)?,
            "frame_width" => self.frame_width = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses a full `key=value` block; every field must be present exactly once.
    pub fn from_entries(entries: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::desk();
        let mut seen = Vec::new();
        for (k, v) in entries {
            if seen.contains(k) {
                bail!(Format, "duplicate model key {:?}", k);
            }
            if !cfg.set(k, v).map_err(|e| crate::Error::Format(e.to_string()))? {
                bail!(Format, "unknown model key {:?}", k);
            }
            seen.push(k.clone());
        }
        if seen.len() != cfg.to_entries().len() {
            bail!(Format, "model config block has {} of {} keys", seen.len(), cfg.to_entries().len());
        }
        cfg.validate().map_err(|e| crate::Error::Format(e.to_string()))?;
        Ok(cfg)
    }
}

/// Parses `on|off` (also `true|false`, `1|0`).
pub fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => bail!(Config, "{}: expected on or off, got {:?}", key, value),
    }
}
