//! Run configuration: built-in defaults, a `key=value` file, then flag overrides.

use std::path::Path;

use beamtrack::channel::{MultipathConfig, UlaConfig};
use beamtrack::gradcheck::GradCheckConfig;
use beamtrack::metrics::MetricsConfig;
use beamtrack::model::{parse_switch, ModelConfig};
use beamtrack::scene::{read_meta, SceneConfig};
use beamtrack::train::TrainConfig;
use beamtrack::{Error, Result};

/// Which timestamps `eval` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Validation,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub scene: SceneConfig,
    pub ula: UlaConfig,
    pub beams: usize,
    pub multipath: MultipathConfig,
    pub history: usize,
    pub horizon: usize,
    pub split: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub gradcheck: GradCheckConfig,
    pub eval_split: EvalSplit,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::desk();
        Self {
            seed: 0,
            threads: 1,
            scene: SceneConfig::default(),
            ula: UlaConfig::default(),
            beams: model.codebook_size,
            multipath: MultipathConfig::default(),
            history: model.history,
            horizon: model.horizon,
            split: 0.8,
            model,
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
            gradcheck: GradCheckConfig::default(),
            eval_split: EvalSplit::Validation,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Defaults, then `file` entries, then `overrides`; later entries win.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut entries = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let parsed = read_meta(text.as_bytes()).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            for (i, (k, _)) in parsed.iter().enumerate() {
                if parsed[..i].iter().any(|(seen, _)| seen == k) {
                    return Err(Error::Config(format!("{}: duplicate key {k:?}", path.display())));
                }
            }
            entries.extend(parsed);
        }
        entries.extend(overrides.iter().cloned());
        Self::from_entries(&entries)
    }

    pub fn from_entries(entries: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        // a preset replaces every model width, so it goes first
        if let Some((_, name)) = entries.iter().rev().find(|(k, _)| k == "model") {
            cfg.model = ModelConfig::preset(name)?;
            cfg.history = cfg.model.history;
            cfg.horizon = cfg.model.horizon;
            cfg.beams = cfg.model.codebook_size;
        }
        for (k, v) in entries {
            cfg.set(k, v)?;
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.scene;
        match key {
            "model" => {}
            "seed" => self.seed = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "frames" => s.frames_total = parse(key, v)?,
            "height" => s.height = parse(key, v)?,
            "width" => s.width = parse(key, v)?,
            "fov_deg" => s.fov = parse::<f64>(key, v)?.to_radians(),
            "ue_size" => s.ue_size = parse(key, v)?,
            "background" => s.background = v.parse()?,
            "distractors" => s.distractors = parse(key, v)?,
            "noise_std" => s.noise_std = parse(key, v)?,
            "max_step_deg" => s.max_step = parse::<f64>(key, v)?.to_radians(),
            "dwell_bias" => s.dwell_bias = parse(key, v)?,
            "range_min" => s.range_min = parse(key, v)?,
            "range_max" => s.range_max = parse(key, v)?,
            "layout_seed" => s.layout_seed = parse(key, v)?,
            "antennas" => self.ula.n_antennas = parse(key, v)?,
            "spacing" => self.ula.spacing = parse(key, v)?,
            "beams" => self.beams = parse(key, v)?,
            "nlos_paths" => self.multipath.nlos_paths = parse(key, v)?,
            "nlos_power" => self.multipath.nlos_power = parse(key, v)?,
            "history" => self.history = parse(key, v)?,
            "horizon" => self.horizon = parse(key, v)?,
            "split" => self.split = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "batch_size" => {
                self.train.batch_size = parse(key, v)?;
                self.metrics.batch_size = self.train.batch_size;
            }
            "lr_init" => self.train.lr_init = parse(key, v)?,
            "lr_min" => self.train.lr_min = parse(key, v)?,
            "cycle_epochs" => self.train.cycle_epochs = parse(key, v)?,
            "gamma" => {
                self.train.gamma = parse(key, v)?;
                self.metrics.gamma = self.train.gamma;
                self.gradcheck.gamma = self.train.gamma;
            }
            "mask_threshold" => {
                self.train.mask_threshold = parse(key, v)?;
                self.metrics.mask_threshold = self.train.mask_threshold;
            }
            "dba_k" => self.metrics.dba_k = parse(key, v)?,
            "dba_delta" => self.metrics.dba_delta = parse(key, v)?,
            "eval_split" => {
                self.eval_split = match v {
                    "validation" | "val" => EvalSplit::Validation,
                    "all" => EvalSplit::All,
                    _ => return Err(Error::Config(format!("eval_split: expected validation or all, got {v:?}"))),
                }
            }
            "gc_per_tensor" => self.gradcheck.per_tensor = parse(key, v)?,
            "gc_step" => self.gradcheck.step = parse(key, v)?,
            "gc_tolerance" => self.gradcheck.tolerance = parse(key, v)?,
            "gc_floor" => self.gradcheck.floor = parse(key, v)?,
            "gc_batch" => self.gradcheck.batch = parse(key, v)?,
            "frame_height" | "frame_width" | "codebook_size" => {
                return Err(Error::Config(format!("{key} follows height, width and beams; set those instead")))
            }
            _ => {
                if !self.model.set(key, v)? {
                    return Err(Error::Config(format!("unknown config key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Copies the dataset-side shapes and the seed into the sub-configs.
    fn sync(&mut self) {
        self.model.history = self.history;
        self.model.horizon = self.horizon;
        self.model.codebook_size = self.beams;
        self.model.frame_height = self.scene.height;
        self.model.frame_width = self.scene.width;
        self.train.seed = self.seed;
        self.gradcheck.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.beams == 0 {
            return Err(Error::Config("beams must be at least 1".into()));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::Config(format!("split must lie in (0, 1), got {}", self.split)));
        }
        if self.scene.frames_total < self.history + self.horizon + 1 {
            return Err(Error::Config(format!(
                "{} frames cannot hold a history of {} and a horizon of {} (need at least {})",
                self.scene.frames_total,
                self.history,
                self.horizon,
                self.history + self.horizon + 1
            )));
        }
        if !(self.metrics.dba_delta > 0.0) || self.metrics.dba_k == 0 {
            return Err(Error::Config("dba_k and dba_delta must be positive".into()));
        }
        self.scene.validate()?;
        self.ula.validate()?;
        self.multipath.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    /// The effective configuration as `key=value` pairs, loadable by [`RunConfig::from_entries`].
    pub fn to_entries(&self) -> Vec<(String, String)> {
        let s = &self.scene;
        let mut out: Vec<(String, String)> = [
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("frames", s.frames_total.to_string()),
            ("height", s.height.to_string()),
            ("width", s.width.to_string()),
            ("fov_deg", s.fov.to_degrees().to_string()),
            ("ue_size", s.ue_size.to_string()),
            ("background", s.background.to_string()),
            ("distractors", s.distractors.to_string()),
            ("noise_std", s.noise_std.to_string()),
            ("max_step_deg", s.max_step.to_degrees().to_string()),
            ("dwell_bias", s.dwell_bias.to_string()),
            ("range_min", s.range_min.to_string()),
            ("range_max", s.range_max.to_string()),
            ("layout_seed", s.layout_seed.to_string()),
            ("antennas", self.ula.n_antennas.to_string()),
            ("spacing", self.ula.spacing.to_string()),
            ("beams", self.beams.to_string()),
            ("nlos_paths", self.multipath.nlos_paths.to_string()),
            ("nlos_power", self.multipath.nlos_power.to_string()),
            ("split", self.split.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        out.extend(
            self.model
                .to_entries()
                .into_iter()
                .filter(|(k, _)| !matches!(k.as_str(), "frame_height" | "frame_width" | "codebook_size")),
        );
        let t = &self.train;
        out.extend(
            [
                ("epochs", t.epochs.to_string()),
                ("batch_size", t.batch_size.to_string()),
                ("lr_init", t.lr_init.to_string()),
                ("lr_min", t.lr_min.to_string()),
                ("cycle_epochs", t.cycle_epochs.to_string()),
                ("gamma", t.gamma.to_string()),
                ("mask_threshold", t.mask_threshold.to_string()),
                ("dba_k", self.metrics.dba_k.to_string()),
                ("dba_delta", self.metrics.dba_delta.to_string()),
                (
                    "eval_split",
                    match self.eval_split {
                        EvalSplit::Validation => "validation",
                        EvalSplit::All => "all",
                    }
                    .to_string(),
                ),
                ("gc_per_tensor", self.gradcheck.per_tensor.to_string()),
                ("gc_step", self.gradcheck.step.to_string()),
                ("gc_tolerance", self.gradcheck.tolerance.to_string()),
                ("gc_floor", self.gradcheck.floor.to_string()),
                ("gc_batch", self.gradcheck.batch.to_string()),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v)),
        );
        out
    }
}

/// Splits `key=value` from a `--set` flag.
pub fn parse_assignment(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Checks an `on|off` flag value.
pub fn parse_on_off(s: &str) -> std::result::Result<String, String> {
    parse_switch("mha", s).map(|b| if b { "on" } else { "off" }.to_string()).map_err(|e| e.to_string())
}
