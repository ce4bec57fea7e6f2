//! Narrowband mmWave link model: ULA steering vectors, DFT codebooks,
//! received signal, SNR, spectral efficiency and the exhaustive-search
//! beam oracle that produces ground-truth labels.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{bail, Result};
use crate::scalar::Scalar;

/// Complex scalar as a `(re, im)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Complex<S> {
    pub re: S,
    pub im: S,
}

impl<S: Scalar> Complex<S> {
    pub fn new(re: S, im: S) -> Self {
        Self { re, im }
    }

    pub fn norm_sqr(self) -> S {
        self.re * self.re + self.im * self.im
    }

    fn mul(self, other: Self) -> Self {
        Self::new(
            self.re * other.re - self.im * other.im,
            self.re * other.im + self.im * other.re,
        )
    }
}

/// Complex vector stored as separate real and imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexVec<S> {
    re: Vec<S>,
    im: Vec<S>,
}

impl<S: Scalar> ComplexVec<S> {
    pub fn new(re: Vec<S>, im: Vec<S>) -> Result<Self> {
        if re.len() != im.len() {
            bail!(Dimension, "real part has {} entries, imaginary part {}", re.len(), im.len());
        }
        if re.iter().chain(&im).any(|v| !v.is_finite()) {
            bail!(Numeric, "complex vector has non-finite entries");
        }
        Ok(Self { re, im })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            re: vec![S::zero(); len],
            im: vec![S::zero(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn re(&self) -> &[S] {
        &self.re
    }

    pub fn im(&self) -> &[S] {
        &self.im
    }

    pub fn get(&self, n: usize) -> Complex<S> {
        Complex::new(self.re[n], self.im[n])
    }

    pub fn norm(&self) -> S {
        self.re.iter().chain(&self.im).map(|&v| v * v).sum::<S>().sqrt()
    }

    pub fn scaled(&self, factor: S) -> Self {
        Self {
            re: self.re.iter().map(|&v| v * factor).collect(),
            im: self.im.iter().map(|&v| v * factor).collect(),
        }
    }

    /// `self + factor * other` for a complex `factor`.
    pub fn add_scaled(&self, other: &Self, factor: Complex<S>) -> Result<Self> {
        if self.len() != other.len() {
            bail!(Dimension, "vector lengths {} and {} differ", self.len(), other.len());
        }
        let mut out = self.clone();
        for n in 0..self.len() {
            let t = other.get(n).mul(factor);
            out.re[n] += t.re;
            out.im[n] += t.im;
        }
        Ok(out)
    }

    /// Hermitian inner product `self^H other = sum conj(self_n) other_n`.
    pub fn inner(&self, other: &Self) -> Result<Complex<S>> {
        if self.len() != other.len() {
            bail!(Dimension, "vector lengths {} and {} differ", self.len(), other.len());
        }
        let mut acc = Complex::new(S::zero(), S::zero());
        for n in 0..self.len() {
            let (a, b) = (self.get(n), other.get(n));
            acc.re += a.re * b.re + a.im * b.im;
            acc.im += a.re * b.im - a.im * b.re;
        }
        Ok(acc)
    }
}

/// Uniform linear array geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UlaConfig {
    pub n_antennas: usize,
    /// Element spacing in wavelengths.
    pub spacing: f64,
}

impl Default for UlaConfig {
    fn default() -> Self {
        Self {
            n_antennas: 32,
            spacing: 0.5,
        }
    }
}

impl UlaConfig {
    pub fn new(n_antennas: usize, spacing: f64) -> Result<Self> {
        let ula = Self { n_antennas, spacing };
        ula.validate()?;
        Ok(ula)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_antennas == 0 {
            bail!(Config, "ULA needs at least one antenna");
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            bail!(Config, "ULA spacing must be positive, got {}", self.spacing);
        }
        Ok(())
    }
}

/// Unit-norm array response `a_n = exp(j 2 pi d n sin(theta)) / sqrt(N)`.
///
/// `theta` is the azimuth in radians measured from broadside, `|theta| < pi/2`.
pub fn steering_vector<S: Scalar>(theta: f64, ula: &UlaConfig) -> ComplexVec<S> {
    steering_from_sine(theta.sin(), ula)
}

fn steering_from_sine<S: Scalar>(sine: f64, ula: &UlaConfig) -> ComplexVec<S> {
    let n = ula.n_antennas;
    let amp = 1.0 / (n as f64).sqrt();
    let phase_step = 2.0 * std::f64::consts::PI * ula.spacing * sine;
    let (re, im) = (0..n)
        .map(|i| {
            let phase = phase_step * i as f64;
            (S::of(amp * phase.cos()), S::of(amp * phase.sin()))
        })
        .unzip();
    ComplexVec { re, im }
}

/// Beamforming codebook: `C` unit-norm vectors indexed `0..C` in increasing angle.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<S> {
    beams: Vec<ComplexVec<S>>,
    angles: Vec<f64>,
}

impl<S: Scalar> Codebook<S> {
    pub fn from_beams(beams: Vec<ComplexVec<S>>, angles: Vec<f64>) -> Result<Self> {
        if beams.is_empty() {
            bail!(Config, "codebook needs at least one beam");
        }
        if beams.len() != angles.len() {
            bail!(Dimension, "{} beams but {} angles", beams.len(), angles.len());
        }
        let n = beams[0].len();
        for (c, b) in beams.iter().enumerate() {
            if b.len() != n {
                bail!(Dimension, "beam {} has length {}, expected {}", c, b.len(), n);
            }
            if (b.norm().f64() - 1.0).abs() > 1e-9 {
                bail!(Numeric, "beam {} is not unit norm", c);
            }
        }
        Ok(Self { beams, angles })
    }

    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }

    pub fn beam(&self, index: usize) -> &ComplexVec<S> {
        &self.beams[index]
    }

    pub fn beams(&self) -> &[ComplexVec<S>] {
        &self.beams
    }

    /// Pointing angle (radians) of each beam.
    pub fn angles(&self) -> &[f64] {
        &self.angles
    }
}

/// Steering-vector codebook with `sin(theta_c)` on the uniform grid
/// `-1 + (2c + 1) / C`, `c = 0..C`. For `C = N` and half-wavelength spacing
/// the beams are the orthogonal DFT basis.
pub fn dft_codebook<S: Scalar>(ula: &UlaConfig, c_beams: usize) -> Result<Codebook<S>> {
    ula.validate()?;
    if c_beams == 0 {
        bail!(Config, "codebook size must be at least 1");
    }
    let c = c_beams as f64;
    let sines: Vec<f64> = (0..c_beams).map(|i| -1.0 + (2 * i + 1) as f64 / c).collect();
    let beams = sines.iter().map(|&s| steering_from_sine(s, ula)).collect();
    let angles = sines.iter().map(|s| s.asin()).collect();
    Codebook::from_beams(beams, angles)
}

/// Additive white Gaussian noise settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Noise power (linear).
    pub sigma2: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(sigma2: f64, seed: u64) -> Result<Self> {
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            bail!(Config, "noise power must be >= 0, got {}", sigma2);
        }
        Ok(Self { sigma2, seed })
    }
}

/// `y = h^H v s + n` with `n ~ CN(0, sigma2)` drawn from `rng`.
pub fn received_signal<S: Scalar, R: Rng + ?Sized>(
    h: &ComplexVec<S>,
    v: &ComplexVec<S>,
    symbol: Complex<S>,
    sigma2: f64,
    rng: &mut R,
) -> Result<Complex<S>> {
    if sigma2 < 0.0 {
        bail!(Domain, "noise power must be >= 0");
    }
    let gain = h.inner(v)?;
    let clean = gain.mul(symbol);
    if sigma2 == 0.0 {
        return Ok(clean);
    }
    let std = (sigma2 / 2.0).sqrt();
    let nr: f64 = StandardNormal.sample(rng);
    let ni: f64 = StandardNormal.sample(rng);
    Ok(Complex::new(clean.re + S::of(std * nr), clean.im + S::of(std * ni)))
}

/// Beamforming gain `|h^H v|^2`.
pub fn beam_gain<S: Scalar>(h: &ComplexVec<S>, v: &ComplexVec<S>) -> Result<S> {
    Ok(h.inner(v)?.norm_sqr())
}

/// `|h^H v|^2 / sigma2`.
pub fn snr<S: Scalar>(h: &ComplexVec<S>, v: &ComplexVec<S>, sigma2: f64) -> Result<S> {
    if !(sigma2 > 0.0) {
        bail!(Domain, "SNR needs a positive noise power, got {}", sigma2);
    }
    Ok(beam_gain(h, v)? / S::of(sigma2))
}

/// `sum_tau log2(1 + SNR[tau])` in bit/s/Hz.
pub fn spectral_efficiency<S: Scalar>(
    h_seq: &[ComplexVec<S>],
    v_seq: &[ComplexVec<S>],
    sigma2: f64,
) -> Result<S> {
    if h_seq.len() != v_seq.len() {
        bail!(Dimension, "{} channels but {} beams", h_seq.len(), v_seq.len());
    }
    h_seq
        .iter()
        .zip(v_seq)
        .map(|(h, v)| Ok((S::one() + snr(h, v, sigma2)?).log2()))
        .sum()
}

/// Best codebook index for one channel; ties go to the lowest index.
pub fn best_beam<S: Scalar>(h: &ComplexVec<S>, codebook: &Codebook<S>) -> Result<usize> {
    let mut best = 0;
    let mut best_gain = S::neg_infinity();
    for (c, v) in codebook.beams().iter().enumerate() {
        let g = beam_gain(h, v)?;
        if g > best_gain {
            best = c;
            best_gain = g;
        }
    }
    Ok(best)
}

/// Exhaustive-search labels for slots `t..t+J`. The joint maximization of the
/// summed gains separates per slot, so each slot is searched independently.
pub fn oracle_beams<S: Scalar>(h_seq: &[ComplexVec<S>], codebook: &Codebook<S>) -> Result<Vec<usize>> {
    if h_seq.is_empty() {
        bail!(Usage, "oracle needs at least one channel");
    }
    h_seq.iter().map(|h| best_beam(h, codebook)).collect()
}

/// Extra propagation paths added on top of the line-of-sight component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultipathConfig {
    pub nlos_paths: usize,
    /// Power of each NLoS path relative to the LoS path.
    pub nlos_power: f64,
}

impl Default for MultipathConfig {
    fn default() -> Self {
        Self {
            nlos_paths: 0,
            nlos_power: 0.1,
        }
    }
}

impl MultipathConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nlos_power >= 0.0 && self.nlos_power.is_finite()) {
            bail!(Config, "NLoS relative power must be >= 0");
        }
        Ok(())
    }

    /// Fixed scatterer directions, evenly spread over (-60, 60) degrees.
    fn path_angle(&self, k: usize) -> f64 {
        let span = 120f64.to_radians();
        -span / 2.0 + span * (k as f64 + 0.5) / self.nlos_paths as f64
    }
}

/// Channel of a UE at azimuth `theta` and range `r`: `(1/r) a(theta)` plus
/// scatterer paths with range-dependent phase.
pub fn geometric_channel<S: Scalar>(
    theta: f64,
    range: f64,
    ula: &UlaConfig,
    multipath: &MultipathConfig,
) -> Result<ComplexVec<S>> {
    if !(range > 0.0) {
        bail!(Domain, "range must be positive, got {}", range);
    }
    let mut h = steering_vector::<S>(theta, ula).scaled(S::of(1.0 / range));
    let amp = multipath.nlos_power.sqrt() / range;
    for k in 0..multipath.nlos_paths {
        let phase = 2.0 * std::f64::consts::PI * (range * (k + 1) as f64).fract();
        let coeff = Complex::new(S::of(amp * phase.cos()), S::of(amp * phase.sin()));
        h = h.add_scaled(&steering_vector(multipath.path_angle(k), ula), coeff)?;
    }
    Ok(h)
}
