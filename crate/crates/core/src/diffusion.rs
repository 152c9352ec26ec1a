//! Discrete-time variance-preserving diffusion machinery.
//!
//! Steps are indexed `t in 1..=T` with a `t = 0` boundary where the marginal is the data
//! itself. Coefficients are computed and stored in f64 (the cumulative products underflow
//! f32 accuracy quickly); image arithmetic stays in f32.

use crate::error::{CoreError, Result};
use crate::image::Image;

/// Noise schedule and derived per-step coefficients.
///
/// `beta` is the per-step variance increment, `alpha = 1 - beta`,
/// `alpha_bar(t)` the running product of `alpha`. The forward marginal at step `t` is
/// `N(marginal_scale(t) * x0, marginal_std(t)^2 I)` with
/// `marginal_scale = sqrt(alpha_bar)` and `marginal_std = sqrt(1 - alpha_bar)`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    beta: Vec<f64>,      // index 0 unused (t = 0 boundary)
    alpha: Vec<f64>,     // 1 - beta
    alpha_bar: Vec<f64>, // alpha_bar[0] = 1
}

impl NoiseSchedule {
    /// Linear schedule: `beta_t = beta_min + (t-1) (beta_max - beta_min) / (T-1)`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 1 {
            return Err(CoreError::invalid("schedule needs at least one step"));
        }
        if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(CoreError::invalid(format!(
                "beta bounds ({beta_min}, {beta_max}) must satisfy 0 < min <= max < 1"
            )));
        }
        let mut beta = vec![0.0; steps + 1];
        let mut alpha = vec![1.0; steps + 1];
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            let frac = if steps == 1 { 0.0 } else { (t - 1) as f64 / (steps - 1) as f64 };
            beta[t] = beta_min + frac * (beta_max - beta_min);
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        Ok(NoiseSchedule { steps, beta_min, beta_max, beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_bounds(&self) -> (f64, f64) {
        (self.beta_min, self.beta_max)
    }

    fn check(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps {
            return Err(CoreError::StepOutOfRange { t, lo, hi: self.steps });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// Cumulative product of `alpha`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `sqrt(alpha_bar(t))`, the forward marginal mean scale.
    pub fn marginal_scale(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    /// `sqrt(1 - alpha_bar(t))`, the forward marginal standard deviation.
    pub fn marginal_std(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    /// Reverse-step noise standard deviation `sqrt(sigma_t)` with `sigma_t = beta_t`.
    pub fn reverse_std(&self, t: usize) -> f64 {
        self.beta[t].sqrt()
    }
}

fn zip_shape(a: &Image, b: &Image, what: &str) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(CoreError::dim(format!("{what}: {}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

/// Forward perturbation: `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise`.
pub fn forward_diffuse(x0: &Image, t: usize, noise: &Image, sched: &NoiseSchedule) -> Result<Image> {
    sched.check(t, 1)?;
    zip_shape(x0, noise, "forward_diffuse")?;
    let a = sched.marginal_scale(t) as f32;
    let b = sched.marginal_std(t) as f32;
    let pixels = x0.pixels.iter().zip(&noise.pixels).map(|(x, z)| a * x + b * z).collect();
    Ok(Image { width: x0.width, height: x0.height, pixels })
}

/// One ancestral reverse step:
/// `x_{t-1} = (x_t + (1 - alpha_t) score) / sqrt(alpha_t) + sqrt(beta_t) noise`,
/// with the noise term suppressed at `t = 1`.
pub fn ancestral_step(xt: &Image, t: usize, score: &Image, noise: &Image, sched: &NoiseSchedule) -> Result<Image> {
    sched.check(t, 1)?;
    zip_shape(xt, score, "ancestral_step score")?;
    zip_shape(xt, noise, "ancestral_step noise")?;
    let inv_sqrt_alpha = (1.0 / sched.alpha(t).sqrt()) as f32;
    let one_minus_alpha = (1.0 - sched.alpha(t)) as f32;
    let std = if t == 1 { 0.0 } else { sched.reverse_std(t) as f32 };
    let pixels = xt
        .pixels
        .iter()
        .zip(&score.pixels)
        .zip(&noise.pixels)
        .map(|((x, s), z)| inv_sqrt_alpha * (x + one_minus_alpha * s) + std * z)
        .collect();
    Ok(Image { width: xt.width, height: xt.height, pixels })
}

/// Convert a noise prediction to a score estimate: `score = -eps / sqrt(1 - alpha_bar_t)`.
pub fn epsilon_to_score(eps: &Image, t: usize, sched: &NoiseSchedule) -> Result<Image> {
    sched.check(t, 1)?;
    let scale = (-1.0 / sched.marginal_std(t)) as f32;
    Ok(eps.map(|v| scale * v))
}

/// Inverse of [`epsilon_to_score`].
pub fn score_to_epsilon(score: &Image, t: usize, sched: &NoiseSchedule) -> Result<Image> {
    sched.check(t, 1)?;
    let scale = (-sched.marginal_std(t)) as f32;
    Ok(score.map(|v| scale * v))
}

/// Posterior-mean denoising: `x0_hat = (x_t + (1 - alpha_bar_t) score) / sqrt(alpha_bar_t)`.
pub fn tweedie_denoise(xt: &Image, t: usize, score: &Image, sched: &NoiseSchedule) -> Result<Image> {
    sched.check(t, 1)?;
    zip_shape(xt, score, "tweedie_denoise")?;
    let var = (1.0 - sched.alpha_bar(t)) as f32;
    let inv_scale = (1.0 / sched.marginal_scale(t)) as f32;
    let pixels = xt
        .pixels
        .iter()
        .zip(&score.pixels)
        .map(|(x, s)| inv_scale * (x + var * s))
        .collect();
    Ok(Image { width: xt.width, height: xt.height, pixels })
}
