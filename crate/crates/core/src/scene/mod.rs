//! Synthetic camera scene: a UE moving across the field of view of a
//! base-station camera, rendered to RGB frames and mapped to a channel.

mod dataset;
mod format;

pub use dataset::{build_dataset, Dataset, DatasetMeta, SampleSequence, Split};
pub use format::{read_btds, read_meta, write_btds, write_meta, BTDS_MAGIC, BTDS_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::channel::{geometric_channel, ComplexVec, MultipathConfig, UlaConfig};
use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of color channels in every frame.
pub const CHANNELS: usize = 3;

const UE_COLOR: [f32; 3] = [1.0, 0.85, 0.25];
const SKY: [f32; 3] = [0.30, 0.36, 0.45];
const GROUND: [f32; 3] = [0.18, 0.18, 0.16];
const HORIZON: f64 = 0.45;
const ROAD_CENTER: f64 = 0.62;
// the UE stays inside this fraction of the half field of view
const EDGE_LIMIT: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Background {
    Static,
    Textured,
}

impl std::str::FromStr for Background {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Self::Static),
            "textured" => Ok(Self::Textured),
            other => bail!(Config, "unknown background mode {:?} (static|textured)", other),
        }
    }
}

impl std::fmt::Display for Background {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Static => "static",
            Self::Textured => "textured",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Horizontal field of view in radians.
    pub fov: f64,
    /// UE width in pixels at unit range.
    pub ue_size: f64,
    pub background: Background,
    /// Static clutter rectangles.
    pub distractors: usize,
    /// Std of additive Gaussian pixel noise.
    pub noise_std: f64,
    pub frames_total: usize,
    /// Bound on the per-slot azimuth change, radians.
    pub max_step: f64,
    /// Slow-down factor near the field-of-view edges, in `[0, 1)`.
    pub dwell_bias: f64,
    pub range_min: f64,
    pub range_max: f64,
    /// Seed of the static scene layout (clutter placement).
    pub layout_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            fov: 60f64.to_radians(),
            ue_size: 8.0,
            background: Background::Static,
            distractors: 0,
            noise_std: 0.0,
            frames_total: 2000,
            max_step: 0.8f64.to_radians(),
            dwell_bias: 0.6,
            range_min: 0.8,
            range_max: 1.6,
            layout_seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            bail!(Config, "frames must be at least 16x16, got {}x{}", self.height, self.width);
        }
        if !(self.fov > 0.0 && self.fov < std::f64::consts::PI) {
            bail!(Config, "field of view must lie in (0, pi), got {}", self.fov);
        }
        if !(self.ue_size > 0.0) {
            bail!(Config, "ue_size must be positive");
        }
        if !(self.noise_std >= 0.0) {
            bail!(Config, "noise_std must be >= 0");
        }
        if !(self.max_step >= 0.0) {
            bail!(Config, "max_step must be >= 0");
        }
        if !(0.0..1.0).contains(&self.dwell_bias) {
            bail!(Config, "dwell_bias must lie in [0, 1)");
        }
        if !(self.range_min > 0.0 && self.range_max >= self.range_min) {
            bail!(Config, "range bounds must satisfy 0 < min <= max");
        }
        Ok(())
    }

    fn max_abs_theta(&self) -> f64 {
        EDGE_LIMIT * self.fov / 2.0
    }

    /// Continuous horizontal pixel coordinate of azimuth `theta`.
    pub fn pixel_x(&self, theta: f64) -> f64 {
        (theta / self.fov + 0.5) * self.width as f64
    }

    /// Pixel column the UE is centered on: `round((theta / fov + 0.5) * width)`.
    pub fn pixel_column(&self, theta: f64) -> i64 {
        self.pixel_x(theta).round() as i64
    }
}

/// Per-slot UE azimuth and range.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub theta: Vec<f64>,
    pub range: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

/// Smooth random walk in azimuth with reflecting edges.
///
/// The angular velocity is an AR(1) process clipped to `max_step`; the
/// position update is slowed near the field-of-view edges by `dwell_bias`,
/// so edge beams collect more samples than central ones.
pub fn simulate_trajectory(config: &SceneConfig, seed: u64) -> Result<Trajectory> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limit = config.max_abs_theta();
    let n = config.frames_total;
    let rho: f64 = 0.95;
    let kick = config.max_step * (1.0 - rho * rho).sqrt();

    let mut theta = rng.gen_range(-limit..=limit);
    let mut omega = if config.max_step > 0.0 {
        rng.gen_range(-config.max_step..=config.max_step)
    } else {
        0.0
    };
    let mut range = rng.gen_range(config.range_min..=config.range_max);
    let mut out = Trajectory {
        theta: Vec::with_capacity(n),
        range: Vec::with_capacity(n),
    };
    for _ in 0..n {
        out.theta.push(theta);
        out.range.push(range);

        let eps: f64 = StandardNormal.sample(&mut rng);
        omega = (rho * omega + kick * eps).clamp(-config.max_step, config.max_step);
        let edge = (theta.abs() / limit).min(1.0);
        theta += omega * (1.0 - config.dwell_bias * edge * edge);
        if theta.abs() > limit {
            theta = theta.signum() * (2.0 * limit - theta.abs());
            omega = -omega;
        }
        let dr: f64 = StandardNormal.sample(&mut rng);
        range = (range + 0.01 * dr).clamp(config.range_min, config.range_max);
    }
    Ok(out)
}

fn background_pixel(config: &SceneConfig, c: usize, i: usize, j: usize) -> f32 {
    let sky = (i as f64) < HORIZON * config.height as f64;
    let mut v = if sky { SKY[c] } else { GROUND[c] };
    if config.background == Background::Textured {
        let (y, x) = (i as f64, j as f64);
        let t = 0.5 + 0.25 * (0.9 * x + 0.4 * y).sin() + 0.25 * (0.23 * x - 1.3 * y + c as f64).cos();
        v += (0.08 * (t - 0.5)) as f32;
    }
    v
}

/// Static clutter rectangles `(top, left, height, width, color)`.
fn clutter(config: &SceneConfig) -> Vec<(usize, usize, usize, usize, [f32; 3])> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.layout_seed);
    (0..config.distractors)
        .map(|_| {
            let h = rng.gen_range(2..=config.height / 6);
            let w = rng.gen_range(2..=config.width / 6);
            let top = rng.gen_range(0..config.height - h);
            let left = rng.gen_range(0..config.width - w);
            let color = [rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9)];
            (top, left, h, w, color)
        })
        .collect()
}

/// Fraction of pixel `[p, p + 1)` covered by the interval `[lo, hi)`.
fn coverage(p: usize, lo: f64, hi: f64) -> f64 {
    let (a, b) = (p as f64, p as f64 + 1.0);
    (hi.min(b) - lo.max(a)).max(0.0)
}

/// Renders one `3 x height x width` frame with values in `[0, 1]`, row-major
/// and channel-major. `seed` drives the pixel noise only.
pub fn render_frame_into(theta: f64, range: f64, config: &SceneConfig, seed: u64, out: &mut [f32]) -> Result<()> {
    if theta.abs() >= config.fov / 2.0 {
        bail!(Domain, "azimuth {} outside the field of view {}", theta, config.fov);
    }
    if !(range > 0.0) {
        bail!(Domain, "range must be positive, got {}", range);
    }
    let (h, w) = (config.height, config.width);
    if out.len() != CHANNELS * h * w {
        bail!(Dimension, "frame buffer has {} values, expected {}", out.len(), CHANNELS * h * w);
    }
    for c in 0..CHANNELS {
        for i in 0..h {
            for j in 0..w {
                out[(c * h + i) * w + j] = background_pixel(config, c, i, j);
            }
        }
    }
    for (top, left, rh, rw, color) in clutter(config) {
        for c in 0..CHANNELS {
            for i in top..top + rh {
                out[(c * h + i) * w + left..(c * h + i) * w + left + rw].fill(color[c]);
            }
        }
    }

    let ue_w = config.ue_size / range;
    let ue_h = 0.6 * config.ue_size / range;
    let cx = config.pixel_x(theta);
    let cy = ROAD_CENTER * h as f64;
    let (x0, x1) = (cx - ue_w / 2.0, cx + ue_w / 2.0);
    let (y0, y1) = (cy - ue_h / 2.0, cy + ue_h / 2.0);
    let cols = x0.floor().max(0.0) as usize..(x1.ceil().max(0.0) as usize).min(w);
    let rows = y0.floor().max(0.0) as usize..(y1.ceil().max(0.0) as usize).min(h);
    for i in rows {
        let cy = coverage(i, y0, y1);
        for j in cols.clone() {
            let alpha = (cy * coverage(j, x0, x1)) as f32;
            for (c, ue) in UE_COLOR.iter().enumerate() {
                let px = &mut out[(c * h + i) * w + j];
                *px = alpha * ue + (1.0 - alpha) * *px;
            }
        }
    }

    if config.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.noise_std).map_err(|e| crate::Error::Config(e.to_string()))?;
        for px in out.iter_mut() {
            *px = (*px as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(())
}

/// Renders one frame as a `[3, height, width]` tensor.
pub fn render_frame<S: Scalar>(theta: f64, range: f64, config: &SceneConfig, seed: u64) -> Result<Tensor<S>> {
    let mut buf = vec![0f32; CHANNELS * config.height * config.width];
    render_frame_into(theta, range, config, seed, &mut buf)?;
    Tensor::new(
        vec![CHANNELS, config.height, config.width],
        buf.into_iter().map(|v| S::of(v as f64)).collect(),
    )
}

/// Channel of a UE at `(theta, range)`: `(1/r) a(theta)` plus configured NLoS paths.
pub fn position_to_channel<S: Scalar>(
    theta: f64,
    range: f64,
    ula: &UlaConfig,
    multipath: &MultipathConfig,
) -> Result<ComplexVec<S>> {
    geometric_channel(theta, range, ula, multipath)
}

/// SplitMix64 step, used to derive independent per-item seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
