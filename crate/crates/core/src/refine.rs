//! Compositing and environment-aware generative refinement.
//!
//! The composite video is noised to an intermediate step `t0 = round(s·T)`
//! of a linear-beta schedule and denoised back to step 0. After every
//! denoising step, pixels inside the character mask are pulled toward the
//! composite re-noised to the same step:
//!
//! ```text
//! x̂ ← (1 - M)·x̂ + M·(w·x̂ + (1 - w)·x_ref)
//! ```
//!
//! so the character keeps its appearance while its surroundings are free to
//! be harmonized by the denoiser. All algebra runs on pixel frames in
//! [-1, 1]; a learned latent encoder could be slotted in without changing
//! the interfaces.

use crate::error::ensure;
use crate::raster::Mask;
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// RGB frame, row-major interleaved, samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    samples: Vec<f32>,
}

impl Frame {
    pub const CHANNELS: usize = 3;

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let samples = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, samples }
    }

    pub fn from_samples(width: usize, height: usize, samples: Vec<f32>) -> Result<Self> {
        ensure(samples.len() == width * height * 3, || {
            format!("frame {width}x{height} needs {} samples, got {}", width * height * 3, samples.len())
        })?;
        ensure(samples.iter().all(|s| s.is_finite()), || "frame contains non-finite samples".into())?;
        Ok(Self { width, height, samples })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f32] {
        &mut self.samples
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.samples[i], self.samples[i + 1], self.samples[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.samples[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_size(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn zeros_like(&self) -> Frame {
        Frame { width: self.width, height: self.height, samples: vec![0.0; self.samples.len()] }
    }
}

/// Per-step noise levels. Steps are 1-based; `alpha_bar(0)` is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Linear betas from `beta_start` to `beta_end`, `alpha = 1 - beta`,
/// `alpha_bar` the running product.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    ensure(steps >= 1, || "schedule needs at least one step".into())?;
    ensure(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0, || {
        format!("need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    })?;
    let alphas: Vec<f64> = (0..steps)
        .map(|i| {
            let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            1.0 - (beta_start + (beta_end - beta_start) * f)
        })
        .collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { alphas, alpha_bars })
}

/// `x_t = sqrt(ab_t)·x0 + sqrt(1 - ab_t)·eps`
pub fn forward_noise(x0: &Frame, t: usize, eps: &Frame, schedule: &NoiseSchedule) -> Result<Frame> {
    ensure((1..=schedule.steps()).contains(&t), || format!("step {t} outside 1..={}", schedule.steps()))?;
    ensure(x0.same_size(eps), || "noise and frame differ in size".into())?;
    Ok(noise_to(x0, t, eps, schedule))
}

/// Like [`forward_noise`] but also accepts `t = 0` (returns `x0`).
fn noise_to(x0: &Frame, t: usize, eps: &Frame, schedule: &NoiseSchedule) -> Frame {
    if t == 0 {
        return x0.clone();
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let samples = x0.samples.iter().zip(&eps.samples).map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32).collect();
    Frame { width: x0.width, height: x0.height, samples }
}

/// Standard-normal noise frame drawn from `(seed, stream)`.
pub fn gaussian_frame(width: usize, height: usize, seed: u64, stream: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let samples = (0..width * height * 3).map(|_| StandardNormal.sample(&mut rng)).map(|x: f64| x as f32).collect();
    Frame { width, height, samples }
}

/// Noise predictor plugged into the refinement loop.
///
/// Implementations must be deterministic in `(frames, t)`, return frames of
/// the input dimensions, and be callable from several threads.
pub trait Denoiser: Send + Sync {
    fn predict_noise(&self, frames: &[Frame], t: usize) -> Vec<Frame>;
}

/// Predicts zero noise: denoising reduces to rescaling by `1/sqrt(alpha)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict_noise(&self, frames: &[Frame], _t: usize) -> Vec<Frame> {
        frames.iter().map(Frame::zeros_like).collect()
    }
}

/// Treats high frequencies as noise: `eps = x - gaussian_blur(x, sigma)`.
#[derive(Debug, Clone, Copy)]
pub struct BlurDenoiser {
    pub sigma: f64,
}

impl Default for BlurDenoiser {
    fn default() -> Self {
        Self { sigma: 1.5 }
    }
}

impl Denoiser for BlurDenoiser {
    fn predict_noise(&self, frames: &[Frame], _t: usize) -> Vec<Frame> {
        frames
            .par_iter()
            .map(|f| {
                let blurred = gaussian_blur(f, self.sigma);
                let samples = f.samples.iter().zip(&blurred.samples).map(|(a, b)| a - b).collect();
                Frame { width: f.width, height: f.height, samples }
            })
            .collect()
    }
}

/// Separable Gaussian blur, radius `ceil(3·sigma)`, edges clamped.
pub fn gaussian_blur(frame: &Frame, sigma: f64) -> Frame {
    if sigma <= 0.0 {
        return frame.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let (w, h) = (frame.width as isize, frame.height as isize);
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0f64;
                    for (k, kv) in kernel.iter().enumerate() {
                        let o = k as isize - radius;
                        let (sx, sy) = if horizontal { ((x + o).clamp(0, w - 1), y) } else { (x, (y + o).clamp(0, h - 1)) };
                        acc += kv * src[((sy * w + sx) * 3 + c as isize) as usize] as f64;
                    }
                    out[((y * w + x) * 3 + c as isize) as usize] = acc as f32;
                }
            }
        }
        out
    };
    let tmp = pass(&frame.samples, true);
    Frame { width: frame.width, height: frame.height, samples: pass(&tmp, false) }
}

/// Inside-mask blend of one sample: `w·denoised + (1 - w)·reference`.
#[inline]
pub fn latent_update(denoised: f32, reference: f32, w: f64) -> f32 {
    (w * denoised as f64 + (1.0 - w) * reference as f64) as f32
}

/// Applies the masked latent update in place. Pixels outside `mask` are left
/// untouched.
pub fn masked_update(denoised: &mut Frame, reference: &Frame, mask: &Mask, w: f64) {
    for (i, &inside) in mask.bits().iter().enumerate() {
        if inside {
            for c in 0..3 {
                let k = i * 3 + c;
                denoised.samples[k] = latent_update(denoised.samples[k], reference.samples[k], w);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 50, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Noise strength: denoising starts at `round(strength · steps)`.
    pub strength: f64,
    /// Latent update weight inside the character mask.
    pub weight: f64,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    /// Adds posterior-variance noise at each step; off keeps runs exact.
    pub stochastic: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { strength: 0.2, weight: 0.1, schedule: ScheduleConfig::default(), seed: 0, stochastic: false }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<NoiseSchedule> {
        ensure((0.0..=1.0).contains(&self.strength), || format!("strength {} outside [0, 1]", self.strength))?;
        ensure((0.0..=1.0).contains(&self.weight), || format!("weight {} outside [0, 1]", self.weight))?;
        build_schedule(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
    }

    pub fn start_step(&self) -> usize {
        (self.strength * self.schedule.steps as f64).round() as usize
    }
}

/// Character over environment wherever the coverage mask is set. Returns
/// the composite frames and the masks used (the character mask for
/// refinement).
pub fn composite(foregrounds: &[Frame], masks: &[Mask], environment: &[Frame]) -> Result<(Vec<Frame>, Vec<Mask>)> {
    ensure(foregrounds.len() == masks.len() && masks.len() == environment.len(), || {
        format!(
            "frame count mismatch: {} renders, {} masks, {} environment frames",
            foregrounds.len(),
            masks.len(),
            environment.len()
        )
    })?;
    let mut out = Vec::with_capacity(foregrounds.len());
    for (t, ((fg, m), env)) in foregrounds.iter().zip(masks).zip(environment).enumerate() {
        ensure(fg.same_size(env) && m.width() == env.width && m.height() == env.height, || {
            format!("frame {t}: render, mask and environment sizes differ")
        })?;
        let mut c = env.clone();
        for (i, &inside) in m.bits().iter().enumerate() {
            if inside {
                c.samples[i * 3..i * 3 + 3].copy_from_slice(&fg.samples[i * 3..i * 3 + 3]);
            }
        }
        out.push(c);
    }
    Ok((out, masks.to_vec()))
}

/// Partial denoising of the composite with the masked latent update after
/// every step (including the last).
pub fn refine_video(composite: &[Frame], masks: &[Mask], denoiser: &dyn Denoiser, cfg: &RefineConfig) -> Result<Vec<Frame>> {
    let schedule = cfg.validate()?;
    ensure(composite.len() == masks.len(), || format!("{} frames but {} masks", composite.len(), masks.len()))?;
    for (t, (f, m)) in composite.iter().zip(masks).enumerate() {
        ensure(f.width == m.width() && f.height == m.height(), || format!("frame {t}: mask size differs from frame"))?;
    }
    let t0 = cfg.start_step();
    if t0 == 0 || composite.is_empty() {
        return Ok(composite.to_vec());
    }

    let eps: Vec<Frame> = composite
        .par_iter()
        .enumerate()
        .map(|(i, f)| gaussian_frame(f.width, f.height, cfg.seed, i as u64))
        .collect();
    let mut x: Vec<Frame> = composite.iter().zip(&eps).map(|(c, e)| noise_to(c, t0, e, &schedule)).collect();

    for t in (1..=t0).rev() {
        let eps_hat = denoiser.predict_noise(&x, t);
        if eps_hat.len() != x.len() || eps_hat.iter().zip(&x).any(|(a, b)| !a.same_size(b)) {
            return Err(Error::input("denoiser returned frames of the wrong shape"));
        }
        let alpha = schedule.alpha(t);
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t - 1);
        let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let sigma = if cfg.stochastic && t > 1 { ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - alpha)).sqrt() } else { 0.0 };

        x = x
            .par_iter()
            .zip(eps_hat.par_iter())
            .enumerate()
            .map(|(i, (xt, e))| {
                let mut samples: Vec<f32> = xt
                    .samples
                    .iter()
                    .zip(&e.samples)
                    .map(|(&a, &b)| ((a as f64 - coef * b as f64) * inv_sqrt_alpha) as f32)
                    .collect();
                if sigma > 0.0 {
                    // stream ids above the frame count keep this noise disjoint from eps
                    let z = gaussian_frame(xt.width, xt.height, cfg.seed, ((t as u64) << 32) | i as u64);
                    samples.iter_mut().zip(&z.samples).for_each(|(s, z)| *s += (sigma * *z as f64) as f32);
                }
                let mut denoised = Frame { width: xt.width, height: xt.height, samples };
                let reference = noise_to(&composite[i], t - 1, &eps[i], &schedule);
                masked_update(&mut denoised, &reference, &masks[i], cfg.weight);
                denoised
            })
            .collect();
    }
    for f in &mut x {
        f.samples.iter_mut().for_each(|s| *s = s.clamp(-1.0, 1.0));
    }
    Ok(x)
}
