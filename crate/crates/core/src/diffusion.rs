//! Numerical kernel: noise schedule, forward noising, the deterministic
//! sampler update, latent blending and mask downsampling.
//!
//! Everything here is pure. Noise is always supplied by the caller, usually
//! from a [`SeededNoise`] stream.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::BinaryMask;

/// Number of discrete training timesteps the base schedules are defined on.
pub const TRAIN_TIMESTEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Betas linear in sqrt-space between 0.00085 and 0.012.
    #[default]
    ScaledLinear,
    /// Betas linear between 1e-4 and 0.02.
    Linear,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaled_linear" | "scaled-linear" => Ok(ScheduleKind::ScaledLinear),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::Config(format!("unknown schedule kind {other:?}"))),
        }
    }
}

impl ScheduleKind {
    fn train_betas(self) -> Vec<f64> {
        let n = TRAIN_TIMESTEPS;
        let lin = |a: f64, b: f64| -> Vec<f64> {
            (0..n)
                .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
                .collect()
        };
        match self {
            ScheduleKind::ScaledLinear => lin(0.00085f64.sqrt(), 0.012f64.sqrt())
                .into_iter()
                .map(|b| b * b)
                .collect(),
            ScheduleKind::Linear => lin(1e-4, 0.02),
        }
    }
}

/// Cumulative signal coefficients `alpha_bar[0..=T]` for a `T`-step sampler.
///
/// Level `t` maps onto training timestep `round(t * 1000 / T)` of the base
/// schedule, so `alpha_bar[0] = 1` and `alpha_bar[T]` is the fully noised level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_level(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Range(format!(
                "level {t} outside [0, {}]",
                self.steps()
            )));
        }
        Ok(())
    }
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if steps > TRAIN_TIMESTEPS {
        return Err(Error::Config(format!(
            "{steps} steps exceed the {TRAIN_TIMESTEPS} training timesteps"
        )));
    }
    let betas = kind.train_betas();
    let mut cumulative = Vec::with_capacity(TRAIN_TIMESTEPS + 1);
    cumulative.push(1.0f64);
    for beta in betas {
        let last = *cumulative.last().unwrap();
        cumulative.push(last * (1.0 - beta));
    }
    let alpha_bar = (0..=steps)
        .map(|t| {
            let k = (t as f64 * TRAIN_TIMESTEPS as f64 / steps as f64).round() as usize;
            cumulative[k]
        })
        .collect();
    Ok(NoiseSchedule { kind, alpha_bar })
}

/// A `(C, h, w)` array of latent values.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} values do not fill a {channels}x{height}x{width} latent",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &LatentTensor, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Elementwise `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &LatentTensor, b: f64) -> Result<LatentTensor> {
        self.ensure_same_shape(other, "axpby")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(LatentTensor { data, ..*self })
    }
}

/// A binary latent-resolution mask, broadcast across channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LatentMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Builds a mask from raw values; anything outside {0, 1} is a mask error.
    pub fn from_values(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("latent mask buffer size"));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Mask("latent mask must be binary".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    fn check_against(&self, z: &LatentTensor) -> Result<()> {
        if (self.height, self.width) != (z.height, z.width) {
            return Err(Error::shape(format!(
                "mask {}x{} does not match latent {}x{}",
                self.height, self.width, z.height, z.width
            )));
        }
        if self.data.iter().any(|&v| v > 1) {
            return Err(Error::Mask("latent mask must be binary".into()));
        }
        Ok(())
    }
}

/// `sqrt(alpha_bar[t]) * z0 + sqrt(1 - alpha_bar[t]) * eps`.
pub fn forward_noise(
    z0: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    sched.check_level(t)?;
    z0.ensure_same_shape(eps, "forward_noise")?;
    let ab = sched.alpha_bar(t);
    z0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Deterministic variance-free update from level `t` to level `t - 1`.
pub fn sampler_step(
    z_t: &LatentTensor,
    eps_hat: &LatentTensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    if t == 0 {
        return Err(Error::Range("no sampler step below level 0".into()));
    }
    sched.check_level(t)?;
    z_t.ensure_same_shape(eps_hat, "sampler_step")?;
    if !eps_hat.is_finite() {
        return Err(Error::Numeric {
            step: t,
            detail: "non-finite noise prediction".into(),
        });
    }
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let (sa, sb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let data = z_t
        .data
        .iter()
        .zip(&eps_hat.data)
        .map(|(&z, &e)| {
            let z0_hat = (z - sb * e) / sa;
            pa * z0_hat + pb * e
        })
        .collect();
    Ok(LatentTensor { data, ..*z_t })
}

/// `z_bg * (1 - m) + z_fg * m`, selecting whole values per cell.
pub fn blend_latents(
    z_bg: &LatentTensor,
    z_fg: &LatentTensor,
    m: &LatentMask,
) -> Result<LatentTensor> {
    z_bg.ensure_same_shape(z_fg, "blend_latents")?;
    m.check_against(z_bg)?;
    let plane = z_bg.height * z_bg.width;
    let data = z_bg
        .data
        .iter()
        .zip(&z_fg.data)
        .enumerate()
        .map(|(i, (&bg, &fg))| if m.data[i % plane] != 0 { fg } else { bg })
        .collect();
    Ok(LatentTensor { data, ..*z_bg })
}

/// Block-mean downsampling; a cell is set when at least half its block is set.
pub fn downsample_mask(mask: &BinaryMask, factor: u32) -> Result<LatentMask> {
    if factor == 0 || !mask.width().is_multiple_of(factor) || !mask.height().is_multiple_of(factor) {
        return Err(Error::shape(format!(
            "mask {}x{} is not divisible by factor {factor}",
            mask.width(),
            mask.height()
        )));
    }
    let f = factor as usize;
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let (lw, lh) = (w / f, h / f);
    let raw = mask.as_raw();
    let mut counts = vec![0usize; lw * lh];
    for y in 0..h {
        let row = &raw[y * w..(y + 1) * w];
        let base = (y / f) * lw;
        for (x, &v) in row.iter().enumerate() {
            counts[base + x / f] += v as usize;
        }
    }
    let data = counts.iter().map(|&n| (2 * n >= f * f) as u8).collect();
    Ok(LatentMask {
        height: lh,
        width: lw,
        data,
    })
}

/// Deterministic Gaussian noise streams derived from one seed.
///
/// Stream 0 produces the initial latent; stream `t + 1` produces the
/// foreground re-noising sample for the step at level `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeededNoise {
    seed: u64,
}

impl SeededNoise {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, stream: u64, shape: (usize, usize, usize)) -> LatentTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let (c, h, w) = shape;
        let data = (0..c * h * w).map(|_| rng.sample(StandardNormal)).collect();
        LatentTensor {
            channels: c,
            height: h,
            width: w,
            data,
        }
    }

    pub fn initial_latent(&self, shape: (usize, usize, usize)) -> LatentTensor {
        self.stream(0, shape)
    }

    pub fn step_noise(&self, t: usize, shape: (usize, usize, usize)) -> LatentTensor {
        self.stream(t as u64 + 1, shape)
    }
}
