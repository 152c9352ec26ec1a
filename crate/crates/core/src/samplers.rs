//! Reverse-diffusion reconstruction engines.
//!
//! * A skip-step deterministic sampler (pseudo linear multistep on the noise prediction,
//!   with a plain single-step deterministic fallback) drives the multi-scale partial
//!   reconstructions, unconditional and conditional.
//! * The conditional variants interleave a measurement-consistency projection that mixes
//!   the forward-projected sample with a noised version of the measurements and maps the
//!   composed sinogram back through filtered backprojection.
//! * Full CT reconstruction runs the entire reverse chain with a predictor-corrector
//!   update, a measurement-gradient correction through the posterior-mean estimate, and
//!   the consistency projection.
//!
//! All engines work in model space (`2 x - 1`); inputs and outputs at the public surface
//! are data-space images in nominal `[0, 1]`. States are pure functions of
//! `(weights, inputs, seed)`.

use crate::denoiser::Denoiser;
use crate::diffusion::{ancestral_step, epsilon_to_score, forward_diffuse, NoiseSchedule};
use crate::error::{CoreError, Result};
use crate::image::{read_image_raw, write_image_raw, Image};
use crate::nn::scalar::Scalar;
use crate::nn::tensor::Tensor;
use crate::nn::unet::{unet_backward, unet_forward, UnetParams};
use crate::rng;
use crate::tomography::{
    embed, fbp_sparse, subsample, Measurements, ProjectionGeometry, RadonPlan, SubsamplingMask,
};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};

/// Inference step grid: the sampler visits `spacing, 2*spacing, ..., t_max` and partial
/// reconstructions start from the configured `t0` subset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepGrid {
    spacing: usize,
    t_max: usize,
    t0_set: Vec<usize>,
}

impl Default for StepGrid {
    /// 100 grid points spaced by 10 up to 1000; twelve reconstruction start points
    /// 150, 220, ..., 920 (spacing 70).
    fn default() -> Self {
        StepGrid {
            spacing: 10,
            t_max: 1000,
            t0_set: (0..12).map(|i| 150 + 70 * i).collect(),
        }
    }
}

impl StepGrid {
    pub fn new(t_max: usize, spacing: usize, t0_set: Vec<usize>) -> Result<Self> {
        if spacing == 0 || t_max == 0 || !t_max.is_multiple_of(spacing) {
            return Err(CoreError::invalid("grid spacing must divide t_max"));
        }
        for w in t0_set.windows(2) {
            if w[0] >= w[1] {
                return Err(CoreError::invalid("t0 set must be strictly increasing"));
            }
        }
        for &t0 in &t0_set {
            if !t0.is_multiple_of(spacing) || t0 == 0 || t0 > t_max {
                return Err(CoreError::invalid(format!("t0 = {t0} is not on the step grid")));
            }
        }
        Ok(StepGrid { spacing, t_max, t0_set })
    }

    pub fn spacing(&self) -> usize {
        self.spacing
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn t0_set(&self) -> &[usize] {
        &self.t0_set
    }

    pub fn contains(&self, t0: usize) -> bool {
        t0 >= self.spacing && t0 <= self.t_max && t0.is_multiple_of(self.spacing)
    }

    /// Denoiser evaluations needed to reconstruct from `t0`.
    pub fn eval_count(&self, t0: usize) -> usize {
        t0 / self.spacing
    }

    /// Evaluations for one full multi-scale sweep over the `t0` set.
    pub fn total_evals(&self) -> usize {
        self.t0_set.iter().map(|&t0| self.eval_count(t0)).sum()
    }
}

/// Deterministic denoising rule applied between grid steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplerKind {
    /// Pseudo linear multistep: 4th-order multistep on the noise prediction after three
    /// lower-order warmup steps.
    #[default]
    Plms,
    /// Single-step deterministic transfer (debugging fallback).
    Ddim,
}

/// Measurement context for conditional reconstruction.
#[derive(Debug, Clone)]
pub struct ConditioningContext {
    pub measurements: Measurements,
    pub mask: SubsamplingMask,
    pub geometry: ProjectionGeometry,
    /// Data-consistency weight on observed sinogram rows.
    pub lambda: f32,
    pub mcg_step_size: f32,
    /// Measurement noise level used when simulating acquisitions (not used by the
    /// reconstruction itself).
    pub noise_std: f32,
    /// Apply the measurement-gradient correction inside multi-scale conditional
    /// reconstructions (full CT reconstruction always applies it).
    pub mcg_in_multiscale: bool,
}

impl ConditioningContext {
    pub fn new(
        measurements: Measurements,
        mask: SubsamplingMask,
        geometry: ProjectionGeometry,
    ) -> Result<Self> {
        if measurements.num_kept != mask.len() {
            return Err(CoreError::dim(format!(
                "{} measurement rows vs mask of {}",
                measurements.num_kept,
                mask.len()
            )));
        }
        if measurements.num_detectors != geometry.num_detectors {
            return Err(CoreError::dim("detector count mismatch".to_string()));
        }
        Ok(ConditioningContext {
            measurements,
            mask,
            geometry,
            lambda: 1.0,
            mcg_step_size: 1.0,
            noise_std: 0.0,
            mcg_in_multiscale: false,
        })
    }

    pub fn with_lambda(mut self, lambda: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(CoreError::invalid(format!("lambda {lambda} outside [0, 1]")));
        }
        self.lambda = lambda;
        Ok(self)
    }
}

/// Noised measurement sample at step `t`:
/// `yt = sqrt(alpha_bar_t) y + sqrt(1 - alpha_bar_t) A z`, `z` a fresh standard normal in
/// image space. At `t = 0` this is the measurements themselves.
pub fn sample_yt(
    y: &Measurements,
    mask: &SubsamplingMask,
    plan: &RadonPlan,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Measurements> {
    let w = plan.image_width();
    let z = Image::from_pixels(w, w, rng::standard_normal(rng, w * w))?;
    let az = subsample(&plan.apply(&z)?, mask)?;
    let a = sched.marginal_scale(t) as f32;
    let b = sched.marginal_std(t) as f32;
    Ok(Measurements {
        num_kept: y.num_kept,
        num_detectors: y.num_detectors,
        values: y.values.iter().zip(&az.values).map(|(yv, zv)| a * yv + b * zv).collect(),
    })
}

/// Measurement-consistency projection with an explicit noised measurement sample.
///
/// Composes a full sinogram from the forward-projected sample (`lambda`-mixed with the
/// embedded `yt` on observed rows, unchanged elsewhere) and returns both the composed
/// sinogram and its filtered backprojection.
pub fn consistency_project_with(
    x_u: &Image,
    yt: &Measurements,
    mask: &SubsamplingMask,
    plan: &RadonPlan,
    lambda: f32,
) -> Result<(Image, crate::tomography::Sinogram)> {
    let mut sino = plan.apply(x_u)?;
    let yt_full = embed(yt, mask, plan.geometry())?;
    for &a in mask.kept() {
        let row = sino.row_mut(a);
        let src = &yt_full.values[a * yt_full.num_detectors..(a + 1) * yt_full.num_detectors];
        for (r, y) in row.iter_mut().zip(src) {
            *r = lambda * *y + (1.0 - lambda) * *r;
        }
    }
    let img = plan.fbp(&sino)?;
    Ok((img, sino))
}

/// Spec-shaped convenience wrapper: draws the noised measurements internally.
pub fn consistency_project(
    x_u: &Image,
    ctx: &ConditioningContext,
    plan: &RadonPlan,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    let yt = sample_yt(&ctx.measurements, &ctx.mask, plan, t, sched, rng)?;
    Ok(consistency_project_with(x_u, &yt, &ctx.mask, plan, ctx.lambda)?.0)
}

/// Linear measurement operator abstraction for the measurement-gradient correction.
/// `apply_t` must be the exact adjoint of `apply`.
pub trait MeasurementOp<T: Scalar> {
    fn apply(&self, image: &[T]) -> Vec<T>;
    fn apply_t(&self, meas: &[T]) -> Vec<T>;
}

/// Production operator `A = subsample . radon` over a plan.
pub struct PlanOp<'a> {
    pub plan: &'a RadonPlan,
    pub mask: &'a SubsamplingMask,
}

impl MeasurementOp<f32> for PlanOp<'_> {
    fn apply(&self, image: &[f32]) -> Vec<f32> {
        let w = self.plan.image_width();
        let img = Image { width: w, height: w, pixels: image.to_vec() };
        subsample(&self.plan.apply(&img).expect("plan shape"), self.mask)
            .expect("mask shape")
            .values
    }

    fn apply_t(&self, meas: &[f32]) -> Vec<f32> {
        let m = Measurements {
            num_kept: self.mask.len(),
            num_detectors: self.plan.geometry().num_detectors,
            values: meas.to_vec(),
        };
        let full = embed(&m, self.mask, self.plan.geometry()).expect("mask shape");
        self.plan.apply_adjoint(&full).expect("plan shape").pixels
    }
}

/// Gradient of `|y - A x0_hat(xt)|^2` with respect to `xt`, where
/// `x0_hat(xt) = (xt - sqrt(1 - alpha_bar_t) eps(xt, t)) / sqrt(alpha_bar_t)` is the
/// posterior-mean estimate and the gradient propagates through the network evaluation:
///
/// `d/dxt = -(2 / sqrt(alpha_bar_t)) (I - sqrt(1 - alpha_bar_t) J_eps^T) A^T r`.
///
/// Returns `(gradient, residual_norm, x0_hat)`.
pub fn mcg_gradient<T: Scalar>(
    xt: &[T],
    y: &[T],
    op: &dyn MeasurementOp<T>,
    params: &UnetParams<T>,
    width: usize,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(Vec<T>, f64, Vec<T>)> {
    let a = T::from_f64(sched.marginal_scale(t));
    let b = T::from_f64(sched.marginal_std(t));
    let x = Tensor::from_vec(&[1, 1, width, width], xt.to_vec());
    let (eps, cache) = unet_forward(params, &x, &[t]);
    let x0_hat: Vec<T> = xt.iter().zip(&eps.data).map(|(x, e)| (*x - b * *e) / a).collect();
    let ax = op.apply(&x0_hat);
    let r: Vec<T> = y.iter().zip(&ax).map(|(yv, av)| *yv - *av).collect();
    let r_norm = r.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
    let v = op.apply_t(&r);

    // J_eps^T v through one network evaluation.
    let cot = Tensor::from_vec(&[1, 1, width, width], v.clone());
    let jv = unet_backward(params, &cache, &cot, None, true).expect("input grad requested");

    let two_over_a = T::from_f64(2.0) / a;
    let grad: Vec<T> = v
        .iter()
        .zip(&jv.data)
        .map(|(vv, jvv)| -two_over_a * (*vv - b * *jvv))
        .collect();
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(CoreError::Numerical(format!("non-finite measurement gradient at t = {t}")));
    }
    Ok((grad, r_norm, x0_hat))
}

/// One manifold-gradient correction: `xt - step_size / |r| * grad`, no-op when the
/// residual vanishes.
pub fn mcg_step(
    xt: &Image,
    y_model: &Measurements,
    ctx: &ConditioningContext,
    plan: &RadonPlan,
    denoiser: &Denoiser,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Image> {
    let op = PlanOp { plan, mask: &ctx.mask };
    let (grad, r_norm, _) = mcg_gradient(
        &xt.pixels,
        &y_model.values,
        &op,
        denoiser.params(),
        xt.width,
        t,
        sched,
    )?;
    if r_norm < 1e-12 {
        return Ok(xt.clone());
    }
    let eta = ctx.mcg_step_size / r_norm as f32;
    Ok(Image {
        width: xt.width,
        height: xt.height,
        pixels: xt.pixels.iter().zip(&grad).map(|(x, g)| x - eta * g).collect(),
    })
}

fn to_model_space(x: &Image) -> Image {
    x.map(|v| 2.0 * v - 1.0)
}

fn from_model_space(x: &Image) -> Image {
    x.map(|v| 0.5 * (v + 1.0))
}

/// Measurements of the model-space image: `A (2x - 1) = 2 y - A 1`.
fn model_space_measurements(y: &Measurements, mask: &SubsamplingMask, plan: &RadonPlan) -> Result<Measurements> {
    let w = plan.image_width();
    let ones = Image { width: w, height: w, pixels: vec![1.0; w * w] };
    let a_ones = subsample(&plan.apply(&ones)?, mask)?;
    Ok(Measurements {
        num_kept: y.num_kept,
        num_detectors: y.num_detectors,
        values: y.values.iter().zip(&a_ones.values).map(|(yv, ov)| 2.0 * yv - ov).collect(),
    })
}

/// Deterministic transfer from step `t` to `t_next` given a (combined) noise prediction:
/// reconstruct the clean estimate and re-noise it at the target level.
fn transfer(x: &Image, eps: &Image, t: usize, t_next: usize, sched: &NoiseSchedule) -> Image {
    let a_t = sched.marginal_scale(t) as f32;
    let b_t = sched.marginal_std(t) as f32;
    let a_n = sched.marginal_scale(t_next) as f32;
    let b_n = sched.marginal_std(t_next) as f32;
    Image {
        width: x.width,
        height: x.height,
        pixels: x
            .pixels
            .iter()
            .zip(&eps.pixels)
            .map(|(xv, ev)| {
                let x0 = (xv - b_t * ev) / a_t;
                a_n * x0 + b_n * ev
            })
            .collect(),
    }
}

/// Linear multistep combination of the stored noise predictions (newest first), with
/// lower orders during warmup.
fn plms_combine(history: &VecDeque<Image>) -> Image {
    let h: Vec<&Image> = history.iter().collect();
    let (w, ht) = (h[0].width, h[0].height);
    let mut out = vec![0.0f32; w * ht];
    let coeffs: &[f32] = match h.len() {
        1 => &[1.0],
        2 => &[3.0 / 2.0, -1.0 / 2.0],
        3 => &[23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0],
        _ => &[55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0],
    };
    for (c, e) in coeffs.iter().zip(&h) {
        for (o, v) in out.iter_mut().zip(&e.pixels) {
            *o += c * v;
        }
    }
    Image { width: w, height: ht, pixels: out }
}

/// Reconstruction mode tag used in cache records and score tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReconMode {
    Unconditional,
    Conditional,
}

impl ReconMode {
    pub fn tag(&self) -> &'static str {
        match self {
            ReconMode::Unconditional => "u",
            ReconMode::Conditional => "c",
        }
    }
}

/// Reconstruction engine: shared read-only weights, schedule and grid plus an evaluation
/// counter. Safe to share across worker threads.
pub struct ReconEngine<'a> {
    pub denoiser: &'a Denoiser,
    pub sched: &'a NoiseSchedule,
    pub grid: &'a StepGrid,
    pub sampler: SamplerKind,
    evals: AtomicU64,
}

struct Trajectory {
    t0: usize,
    x: Image,
    history: VecDeque<Image>,
    rng: ChaCha8Rng,
    done: Option<Image>,
}

impl<'a> ReconEngine<'a> {
    pub fn new(denoiser: &'a Denoiser, sched: &'a NoiseSchedule, grid: &'a StepGrid) -> Self {
        ReconEngine { denoiser, sched, grid, sampler: SamplerKind::Plms, evals: AtomicU64::new(0) }
    }

    /// Total denoiser evaluations performed through this engine.
    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    fn predict(&self, x: &Image, t: usize) -> Result<Image> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        self.denoiser.predict_epsilon(x, t)
    }

    /// Run the multi-scale fan: one partial reconstruction per `t0` in the grid's set
    /// (plus `extra_t0` when given), sharing the reverse sweep. Returns data-space
    /// reconstructions keyed by `t0`.
    fn fan(
        &self,
        x0_input: &Image,
        t0s: &[usize],
        ctx: Option<(&ConditioningContext, &RadonPlan, &Measurements)>,
        seed: u64,
    ) -> Result<Vec<(usize, Image)>> {
        for &t0 in t0s {
            if !self.grid.contains(t0) {
                return Err(CoreError::invalid(format!("t0 = {t0} not on the sampling grid")));
            }
        }
        let x0_model = to_model_space(x0_input);
        let mode = if ctx.is_some() { ReconMode::Conditional } else { ReconMode::Unconditional };
        #[allow(clippy::type_complexity)]
        let mut trajs: Vec<Trajectory> = t0s
            .iter()
            .map(|&t0| Trajectory {
                t0,
                x: Image::zeros(x0_input.width, x0_input.height),
                history: VecDeque::with_capacity(4),
                rng: rng::stream(seed, "trajectory", &[t0 as u64, mode.tag().as_bytes()[0] as u64]),
                done: None,
            })
            .collect();

        let spacing = self.grid.spacing();
        let t_start = *t0s.iter().max().expect("nonempty t0 set");
        let mut t = t_start;
        while t >= spacing {
            let t_next = t - spacing;
            for traj in trajs.iter_mut() {
                if traj.t0 == t {
                    // Activation: partial forward diffusion of the input.
                    let z = Image::from_pixels(
                        x0_input.width,
                        x0_input.height,
                        rng::standard_normal(&mut traj.rng, x0_input.len()),
                    )?;
                    traj.x = forward_diffuse(&x0_model, traj.t0, &z, self.sched)?;
                }
                if traj.t0 < t || traj.done.is_some() {
                    continue;
                }
                let eps = self.predict(&traj.x, t)?;
                let combined = match self.sampler {
                    SamplerKind::Plms => {
                        traj.history.push_front(eps);
                        if traj.history.len() > 4 {
                            traj.history.pop_back();
                        }
                        plms_combine(&traj.history)
                    }
                    SamplerKind::Ddim => eps,
                };
                traj.x = transfer(&traj.x, &combined, t, t_next, self.sched);
                if let Some((ctx, plan, y_model)) = ctx {
                    if ctx.lambda > 0.0 && !ctx.mask.is_empty() {
                        if ctx.mcg_in_multiscale && t_next >= 1 {
                            traj.x = mcg_step(&traj.x, y_model, ctx, plan, self.denoiser, t_next, self.sched)?;
                        }
                        let yt = sample_yt(y_model, &ctx.mask, plan, t_next, self.sched, &mut traj.rng)?;
                        traj.x = consistency_project_with(&traj.x, &yt, &ctx.mask, plan, ctx.lambda)?.0;
                    }
                }
                if !traj.x.all_finite() {
                    return Err(CoreError::Numerical(format!(
                        "reconstruction diverged at t = {t_next} (t0 = {})",
                        traj.t0
                    )));
                }
                if t_next == 0 {
                    traj.done = Some(from_model_space(&traj.x));
                }
            }
            t = t_next;
        }
        Ok(trajs
            .into_iter()
            .map(|tr| {
                let img = tr.done.expect("trajectory completed");
                (tr.t0, img)
            })
            .collect())
    }

    /// Partial unconditional reconstruction from start step `t0`.
    pub fn reconstruct_uncond(&self, x0_input: &Image, t0: usize, seed: u64) -> Result<Image> {
        Ok(self.fan(x0_input, &[t0], None, seed)?.pop().expect("one output").1)
    }

    /// All `t0`-set unconditional reconstructions of one input, sharing the sweep.
    pub fn multiscale_uncond(&self, x0_input: &Image, seed: u64) -> Result<Vec<(usize, Image)>> {
        self.fan(x0_input, self.grid.t0_set(), None, seed)
    }

    /// Partial conditional reconstruction: the input is the filtered backprojection of
    /// the embedded measurements, and every grid step alternates one denoise with one
    /// measurement-consistency projection (`lambda = 0` degenerates to the unconditional
    /// sampler applied to the same input).
    pub fn reconstruct_cond(&self, ctx: &ConditioningContext, t0: usize, seed: u64) -> Result<Image> {
        Ok(self.multiscale_cond_at(ctx, &[t0], seed)?.pop().expect("one output").1)
    }

    /// All `t0`-set conditional reconstructions of one measurement set.
    pub fn multiscale_cond(&self, ctx: &ConditioningContext, seed: u64) -> Result<Vec<(usize, Image)>> {
        self.multiscale_cond_at(ctx, self.grid.t0_set(), seed)
    }

    fn multiscale_cond_at(
        &self,
        ctx: &ConditioningContext,
        t0s: &[usize],
        seed: u64,
    ) -> Result<Vec<(usize, Image)>> {
        let plan = RadonPlan::new(&ctx.geometry, ctx.geometry.num_detectors)?;
        let x0_input = fbp_sparse(&ctx.measurements, &ctx.mask, &plan)?;
        if ctx.lambda == 0.0 || ctx.mask.is_empty() {
            // Projection degenerates; identical to the unconditional sampler on the
            // same input and seed stream.
            return self.fan(&x0_input, t0s, None, seed);
        }
        let y_model = model_space_measurements(&ctx.measurements, &ctx.mask, &plan)?;
        self.fan(&x0_input, t0s, Some((ctx, &plan, &y_model)), seed)
    }

    /// Full CT reconstruction: reverse diffusion from pure noise over every schedule
    /// step. One iteration = corrector (Langevin step), predictor (ancestral step),
    /// measurement-gradient correction, consistency projection. An empty mask degrades
    /// to unconditional generation.
    pub fn ct_reconstruct(&self, ctx: &ConditioningContext, seed: u64) -> Result<Image> {
        let plan = RadonPlan::new(&ctx.geometry, ctx.geometry.num_detectors)?;
        let w = plan.image_width();
        let conditioned = ctx.lambda > 0.0 && !ctx.mask.is_empty();
        let y_model = model_space_measurements(&ctx.measurements, &ctx.mask, &plan)?;
        let mut rng = rng::stream(seed, "ct-reconstruct", &[]);
        let mut x = Image::from_pixels(w, w, rng::standard_normal(&mut rng, w * w))?;
        let t_max = self.sched.steps();

        for t in (1..=t_max).rev() {
            // Corrector: one Langevin step with signal-to-noise ratio 0.16.
            let eps = self.predict(&x, t)?;
            let score = epsilon_to_score(&eps, t, self.sched)?;
            let z = Image::from_pixels(w, w, rng::standard_normal(&mut rng, w * w))?;
            let score_norm = score.pixels.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            let z_norm = z.pixels.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if score_norm > 0.0 {
                let snr = 0.16f64;
                let step = 2.0 * self.sched.alpha(t) * (snr * z_norm / score_norm).powi(2);
                let sqrt2step = (2.0 * step).sqrt() as f32;
                let step = step as f32;
                for ((xv, sv), zv) in x.pixels.iter_mut().zip(&score.pixels).zip(&z.pixels) {
                    *xv += step * sv + sqrt2step * zv;
                }
            }

            // Predictor: ancestral reverse step to t-1.
            let eps = self.predict(&x, t)?;
            let score = epsilon_to_score(&eps, t, self.sched)?;
            let z = Image::from_pixels(w, w, rng::standard_normal(&mut rng, w * w))?;
            x = ancestral_step(&x, t, &score, &z, self.sched)?;

            if conditioned {
                // Manifold-gradient correction at the new state.
                if t > 1 {
                    x = mcg_step(&x, &y_model, ctx, &plan, self.denoiser, t - 1, self.sched)?;
                }
                let yt = sample_yt(&y_model, &ctx.mask, &plan, t - 1, self.sched, &mut rng)?;
                x = consistency_project_with(&x, &yt, &ctx.mask, &plan, ctx.lambda)?.0;
            }
            if !x.all_finite() {
                return Err(CoreError::Numerical(format!("CT reconstruction diverged at step {t}")));
            }
        }
        Ok(from_model_space(&x))
    }
}

// ---------------------------------------------------------------------------
// Reconstruction cache
// ---------------------------------------------------------------------------

/// On-disk cache of reconstructions: one raw-float image per
/// `(entry id, t0, mode)`, scoped by a content key derived from the checkpoint, grid and
/// conditioning configuration so stale records can never be reused.
pub struct ReconCache {
    dir: PathBuf,
}

impl ReconCache {
    pub fn open(root: &std::path::Path, key: u64) -> Result<Self> {
        let dir = root.join(format!("{key:016x}"));
        std::fs::create_dir_all(&dir)?;
        Ok(ReconCache { dir })
    }

    pub fn dir(&self) -> &std::path::Path {
        &self.dir
    }

    fn path(&self, entry: &str, mode: &str, t0: usize) -> PathBuf {
        self.dir.join(format!("{entry}_{mode}_{t0:04}.tomo"))
    }

    pub fn get(&self, entry: &str, mode: &str, t0: usize) -> Option<Image> {
        read_image_raw(&self.path(entry, mode, t0)).ok()
    }

    pub fn put(&self, entry: &str, mode: &str, t0: usize, image: &Image) -> Result<()> {
        let tmp = self.path(entry, mode, t0).with_extension("tmp");
        write_image_raw(&tmp, image)?;
        std::fs::rename(&tmp, self.path(entry, mode, t0))?;
        Ok(())
    }
}

/// FNV-1a content key over heterogeneous parts; used to scope cache directories.
pub fn content_key(parts: &[u64]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for p in parts {
        for b in p.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::unet::UnetConfig;
    use crate::tomography::radon;

    fn test_sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 0.0015, 0.0195).unwrap()
    }

    fn test_denoiser() -> Denoiser {
        Denoiser::init(&UnetConfig::tiny(), 7)
    }

    fn test_image(seed: u64) -> Image {
        let mut r = rng::stream(seed, "sampler-test-image", &[]);
        let vals = rng::standard_normal(&mut r, 784);
        Image::from_pixels(28, 28, vals.iter().map(|v| (0.5 + 0.3 * v).clamp(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn default_grid_matches_protocol() {
        let g = StepGrid::default();
        assert_eq!(g.t0_set().len(), 12);
        assert_eq!(g.t0_set()[0], 150);
        assert_eq!(*g.t0_set().last().unwrap(), 920);
        assert_eq!(g.eval_count(150), 15);
        assert_eq!(g.total_evals(), 642);
    }

    #[test]
    fn grid_validation() {
        assert!(StepGrid::new(1000, 10, vec![150, 155]).is_err());
        assert!(StepGrid::new(1000, 10, vec![220, 150]).is_err());
        assert!(StepGrid::new(1000, 7, vec![14]).is_err());
        assert!(StepGrid::new(1000, 10, vec![1010]).is_err());
    }

    #[test]
    fn uncond_reconstruction_is_deterministic_and_counts_evals() {
        let sched = test_sched();
        let den = test_denoiser();
        let grid = StepGrid::default();
        let engine = ReconEngine::new(&den, &sched, &grid);
        let x = test_image(1);
        let a = engine.reconstruct_uncond(&x, 150, 42).unwrap();
        assert_eq!(engine.eval_count(), 15);
        let b = engine.reconstruct_uncond(&x, 150, 42).unwrap();
        assert_eq!(a.pixels, b.pixels);
        let c = engine.reconstruct_uncond(&x, 150, 43).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn multiscale_fan_matches_single_runs_and_eval_budget() {
        let sched = test_sched();
        let den = test_denoiser();
        let grid = StepGrid::default();
        let engine = ReconEngine::new(&den, &sched, &grid);
        let x = test_image(2);
        let fan = engine.multiscale_uncond(&x, 9).unwrap();
        assert_eq!(engine.eval_count(), 642);
        assert_eq!(fan.len(), 12);
        // The fan shares the sweep but each trajectory is driven by its own stream, so a
        // single-t0 run reproduces the fan entry bit-exactly.
        let single = engine.reconstruct_uncond(&x, 360, 9).unwrap();
        let from_fan = &fan.iter().find(|(t0, _)| *t0 == 360).unwrap().1;
        assert_eq!(single.pixels, from_fan.pixels);
    }

    #[test]
    fn t0_off_grid_is_rejected() {
        let sched = test_sched();
        let den = test_denoiser();
        let grid = StepGrid::default();
        let engine = ReconEngine::new(&den, &sched, &grid);
        assert!(engine.reconstruct_uncond(&test_image(3), 155, 1).is_err());
        // 1000 is on the grid even though it is not in the t0 set.
        assert!(engine.reconstruct_uncond(&test_image(3), 1000, 1).is_ok());
    }

    fn make_ctx(x: &Image, n_proj: usize, lambda: f32) -> ConditioningContext {
        let geometry = ProjectionGeometry::uniform(180, 28).unwrap();
        let mask = SubsamplingMask::uniform(n_proj, 180).unwrap();
        let y = subsample(&radon(x, &geometry).unwrap(), &mask).unwrap();
        ConditioningContext::new(y, mask, geometry).unwrap().with_lambda(lambda).unwrap()
    }

    #[test]
    fn sample_yt_limits() {
        let sched = test_sched();
        let x = test_image(4);
        let ctx = make_ctx(&x, 18, 1.0);
        let plan = RadonPlan::new(&ctx.geometry, 28).unwrap();
        // t = 0: exactly the measurements.
        let yt = sample_yt(&ctx.measurements, &ctx.mask, &plan, 0, &sched, &mut rng::stream(1, "t", &[])).unwrap();
        assert_eq!(yt.values, ctx.measurements.values);
        // y = 0 with fixed z: exactly b_t * A z.
        let zero = Measurements {
            num_kept: ctx.measurements.num_kept,
            num_detectors: 28,
            values: vec![0.0; ctx.measurements.values.len()],
        };
        let t = 500;
        let mut r1 = rng::stream(2, "z", &[]);
        let yt0 = sample_yt(&zero, &ctx.mask, &plan, t, &sched, &mut r1).unwrap();
        let mut r2 = rng::stream(2, "z", &[]);
        let z = Image::from_pixels(28, 28, rng::standard_normal(&mut r2, 784)).unwrap();
        let az = subsample(&plan.apply(&z).unwrap(), &ctx.mask).unwrap();
        let b = sched.marginal_std(t) as f32;
        for (got, want) in yt0.values.iter().zip(&az.values) {
            assert!((got - b * want).abs() < 1e-6);
        }
    }

    #[test]
    fn sample_yt_monte_carlo_mean() {
        let sched = test_sched();
        let x = test_image(5);
        let ctx = make_ctx(&x, 9, 1.0);
        let plan = RadonPlan::new(&ctx.geometry, 28).unwrap();
        let t = 500;
        let mut rng = rng::stream(11, "mc", &[]);
        let mut mean = vec![0.0f64; ctx.measurements.values.len()];
        let n = 10_000;
        for _ in 0..n {
            let yt = sample_yt(&ctx.measurements, &ctx.mask, &plan, t, &sched, &mut rng).unwrap();
            for (m, v) in mean.iter_mut().zip(&yt.values) {
                *m += *v as f64;
            }
        }
        let a = sched.marginal_scale(t);
        let y_norm: f64 = ctx.measurements.values.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let mut err = 0.0f64;
        for (m, y) in mean.iter().zip(&ctx.measurements.values) {
            err += (m / n as f64 - a * *y as f64).powi(2);
        }
        assert!(err.sqrt() / (a * y_norm) < 0.02, "relative mean error {}", err.sqrt() / (a * y_norm));
    }

    #[test]
    fn consistency_projection_lambda_semantics() {
        let sched = test_sched();
        let x = test_image(6);
        let ctx = make_ctx(&x, 18, 1.0);
        let plan = RadonPlan::new(&ctx.geometry, 28).unwrap();
        let state = test_image(7);
        let yt = sample_yt(&ctx.measurements, &ctx.mask, &plan, 100, &sched, &mut rng::stream(3, "p", &[])).unwrap();

        // lambda = 1: observed rows equal the embedded measurements bit-exactly.
        let (_, sino1) = consistency_project_with(&state, &yt, &ctx.mask, &plan, 1.0).unwrap();
        let yt_full = embed(&yt, &ctx.mask, &ctx.geometry).unwrap();
        for &a in ctx.mask.kept() {
            assert_eq!(sino1.row(a), yt_full.row(a));
        }

        // lambda = 0: composed sinogram equals the forward projection everywhere.
        let (img0, sino0) = consistency_project_with(&state, &yt, &ctx.mask, &plan, 0.0).unwrap();
        let rx = plan.apply(&state).unwrap();
        assert_eq!(sino0.values, rx.values);
        let direct = plan.fbp(&rx).unwrap();
        assert_eq!(img0.pixels, direct.pixels);

        // Unobserved rows always keep the forward projection.
        for a in 0..180 {
            if !ctx.mask.kept().contains(&a) {
                assert_eq!(sino1.row(a), rx.row(a));
            }
        }

        // Idempotence on the observed subspace at lambda = 1.
        let (img_once, s_once) = consistency_project_with(&state, &yt, &ctx.mask, &plan, 1.0).unwrap();
        let (_, s_twice) = consistency_project_with(&img_once, &yt, &ctx.mask, &plan, 1.0).unwrap();
        for &a in ctx.mask.kept() {
            assert_eq!(s_once.row(a), s_twice.row(a));
        }
    }

    #[test]
    fn cond_with_lambda_zero_equals_uncond_on_fbp_input() {
        let sched = test_sched();
        let den = test_denoiser();
        let grid = StepGrid::default();
        let engine = ReconEngine::new(&den, &sched, &grid);
        let x = test_image(8);
        let ctx = make_ctx(&x, 18, 0.0);
        let plan = RadonPlan::new(&ctx.geometry, 28).unwrap();
        let fbp_input = fbp_sparse(&ctx.measurements, &ctx.mask, &plan).unwrap();

        let cond = engine.reconstruct_cond(&ctx, 220, 77).unwrap();
        let uncond = engine.reconstruct_uncond(&fbp_input, 220, 77).unwrap();
        assert_eq!(cond.pixels, uncond.pixels);
    }

    #[test]
    fn cond_reconstruction_deterministic_under_seed() {
        let sched = test_sched();
        let den = test_denoiser();
        let grid = StepGrid::default();
        let engine = ReconEngine::new(&den, &sched, &grid);
        let x = test_image(9);
        let ctx = make_ctx(&x, 9, 1.0);
        let a = engine.reconstruct_cond(&ctx, 150, 5).unwrap();
        let b = engine.reconstruct_cond(&ctx, 150, 5).unwrap();
        assert_eq!(a.pixels, b.pixels);
    }

    /// Gradient of the measurement residual against central finite differences, using
    /// the f64 instantiation of the very same generic gradient code with a dense
    /// operator probe of the production transform.
    #[test]
    fn mcg_gradient_matches_finite_differences() {
        struct DenseOp {
            rows: usize,
            cols: usize,
            a: Vec<f64>,
        }
        impl MeasurementOp<f64> for DenseOp {
            fn apply(&self, image: &[f64]) -> Vec<f64> {
                (0..self.rows)
                    .map(|r| (0..self.cols).map(|c| self.a[r * self.cols + c] * image[c]).sum())
                    .collect()
            }
            fn apply_t(&self, meas: &[f64]) -> Vec<f64> {
                (0..self.cols)
                    .map(|c| (0..self.rows).map(|r| self.a[r * self.cols + c] * meas[r]).sum())
                    .collect()
            }
        }

        // Probe the production operator column by column.
        let geometry = ProjectionGeometry::uniform(12, 28).unwrap();
        let mask = SubsamplingMask::uniform(4, 12).unwrap();
        let plan = RadonPlan::new(&geometry, 28).unwrap();
        let op_f32 = PlanOp { plan: &plan, mask: &mask };
        let cols = 784;
        let rows = 4 * 28;
        let mut dense = vec![0.0f64; rows * cols];
        for c in 0..cols {
            let mut e = vec![0.0f32; cols];
            e[c] = 1.0;
            for (r, v) in op_f32.apply(&e).iter().enumerate() {
                dense[r * cols + c] = *v as f64;
            }
        }
        let op = DenseOp { rows, cols, a: dense };

        let cfg = UnetConfig::tiny();
        let mut params: UnetParams<f64> = UnetParams::<f64>::init(&cfg, &mut rng::stream(31, "init", &[]));
        for (name, t) in params.tensors_mut() {
            if t.data.iter().all(|v| *v == 0.0) {
                for (i, v) in t.data.iter_mut().enumerate() {
                    *v = 0.05 * ((i as f64 * 1.3 + name.len() as f64).sin());
                }
            }
        }
        let sched = test_sched();
        let t = 400;
        let mut r = rng::stream(32, "state", &[]);
        let xt: Vec<f64> = rng::standard_normal(&mut r, 784).iter().map(|v| *v as f64).collect();
        let y: Vec<f64> = rng::standard_normal(&mut r, rows).iter().map(|v| *v as f64 * 3.0).collect();

        let (grad, _, _) = mcg_gradient(&xt, &y, &op, &params, 28, t, &sched).unwrap();

        let loss = |x: &[f64]| -> f64 {
            let a = sched.marginal_scale(t);
            let b = sched.marginal_std(t);
            let xt_t = Tensor::from_vec(&[1, 1, 28, 28], x.to_vec());
            let (eps, _) = unet_forward(&params, &xt_t, &[t]);
            let x0: Vec<f64> = x.iter().zip(&eps.data).map(|(xv, ev)| (*xv - b * *ev) / a).collect();
            let ax = op.apply(&x0);
            y.iter().zip(&ax).map(|(yv, av)| (yv - av) * (yv - av)).sum()
        };

        let h = 1e-5;
        for idx in [10usize, 200, 391, 555, 770] {
            let mut xp = xt.clone();
            xp[idx] += h;
            let mut xm = xt.clone();
            xm[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            let an = grad[idx];
            let denom = fd.abs().max(an.abs()).max(1e-10);
            assert!(
                ((fd - an) / denom).abs() < 1e-3,
                "grad[{idx}]: fd {fd:.6e} vs analytic {an:.6e}"
            );
        }
    }

    #[test]
    fn mcg_zero_residual_is_identity() {
        let sched = test_sched();
        let den = test_denoiser();
        let x = test_image(12);
        let ctx = make_ctx(&x, 9, 1.0);
        let plan = RadonPlan::new(&ctx.geometry, 28).unwrap();
        // Construct measurements equal to A x0_hat(xt) so the residual vanishes.
        let state = to_model_space(&test_image(13));
        let t = 300;
        let eps = den.predict_epsilon(&state, t).unwrap();
        let a = sched.marginal_scale(t) as f32;
        let b = sched.marginal_std(t) as f32;
        let x0_hat = Image::from_pixels(
            28,
            28,
            state.pixels.iter().zip(&eps.pixels).map(|(x, e)| (x - b * e) / a).collect(),
        )
        .unwrap();
        let y = subsample(&plan.apply(&x0_hat).unwrap(), &ctx.mask).unwrap();
        let out = mcg_step(&state, &y, &ctx, &plan, &den, t, &sched).unwrap();
        assert_eq!(out.pixels, state.pixels);
    }

    /// A small enough gradient step decreases the measurement residual.
    #[test]
    fn mcg_step_descends_residual() {
        let sched = test_sched();
        let den = test_denoiser();
        let x = test_image(14);
        let mut ctx = make_ctx(&x, 18, 1.0);
        ctx.mcg_step_size = 0.05;
        let plan = RadonPlan::new(&ctx.geometry, 28).unwrap();
        let y_model = model_space_measurements(&ctx.measurements, &ctx.mask, &plan).unwrap();
        let state = to_model_space(&test_image(15));
        let t = 300;

        let residual = |s: &Image| -> f64 {
            let eps = den.predict_epsilon(s, t).unwrap();
            let a = sched.marginal_scale(t) as f32;
            let b = sched.marginal_std(t) as f32;
            let x0 = Image::from_pixels(
                28,
                28,
                s.pixels.iter().zip(&eps.pixels).map(|(x, e)| (x - b * e) / a).collect(),
            )
            .unwrap();
            let ax = subsample(&plan.apply(&x0).unwrap(), &ctx.mask).unwrap();
            y_model.values.iter().zip(&ax.values).map(|(y, a)| (*y as f64 - *a as f64).powi(2)).sum()
        };

        let before = residual(&state);
        let after = residual(&mcg_step(&state, &y_model, &ctx, &plan, &den, t, &sched).unwrap());
        assert!(after < before, "residual {after} !< {before}");
    }

    #[test]
    fn ct_reconstruct_with_empty_mask_is_unconditional_and_finite() {
        let sched = NoiseSchedule::linear(50, 0.0015, 0.0195).unwrap();
        let den = test_denoiser();
        let grid = StepGrid::new(50, 10, vec![20]).unwrap();
        let engine = ReconEngine::new(&den, &sched, &grid);
        let geometry = ProjectionGeometry::uniform(180, 28).unwrap();
        let ctx = ConditioningContext::new(
            Measurements { num_kept: 0, num_detectors: 28, values: vec![] },
            SubsamplingMask::empty(),
            geometry,
        )
        .unwrap();
        let out = engine.ct_reconstruct(&ctx, 3).unwrap();
        assert!(out.all_finite());
        let out2 = engine.ct_reconstruct(&ctx, 3).unwrap();
        assert_eq!(out.pixels, out2.pixels);
    }

    #[test]
    fn recon_cache_round_trip() {
        let root = std::env::temp_dir().join(format!("sinodiff-cache-test-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        let cache = ReconCache::open(&root, content_key(&[1, 2, 3])).unwrap();
        assert!(cache.get("img0", "u", 150).is_none());
        let img = test_image(20);
        cache.put("img0", "u", 150, &img).unwrap();
        assert_eq!(cache.get("img0", "u", 150).unwrap().pixels, img.pixels);
        // Different key scopes do not collide.
        let other = ReconCache::open(&root, content_key(&[9])).unwrap();
        assert!(other.get("img0", "u", 150).is_none());
    }
}
