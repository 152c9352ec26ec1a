//! The noise-prediction model: inference wrapper, epsilon-matching trainer and
//! checkpoint persistence.
//!
//! The network operates in model space (inputs rescaled to `[-1, 1]` before diffusion);
//! the trainer applies that rescaling internally, samplers are responsible for it at
//! inference time.

use crate::diffusion::NoiseSchedule;
use crate::error::{CoreError, Result};
use crate::image::Image;
use crate::nn::tensor::Tensor;
use crate::nn::unet::{unet_backward, unet_forward, UnetConfig, UnetParams};
use crate::rng;
use rayon::prelude::*;
use std::io::{Read, Write};
use std::path::Path;

/// Inference-side handle around a trained parameter set.
#[derive(Debug, Clone)]
pub struct Denoiser {
    params: UnetParams<f32>,
}

impl Denoiser {
    pub fn new(params: UnetParams<f32>) -> Self {
        Denoiser { params }
    }

    pub fn init(cfg: &UnetConfig, seed: u64) -> Self {
        Denoiser { params: UnetParams::init(cfg, &mut rng::stream(seed, "denoiser-init", &[])) }
    }

    pub fn config(&self) -> &UnetConfig {
        &self.params.cfg
    }

    pub fn params(&self) -> &UnetParams<f32> {
        &self.params
    }

    fn to_tensor(&self, xs: &[&Image]) -> Result<Tensor<f32>> {
        let (w, h) = (xs[0].width, xs[0].height);
        let mut data = Vec::with_capacity(xs.len() * w * h);
        for x in xs {
            if x.width != w || x.height != h {
                return Err(CoreError::dim("mixed image shapes in batch".to_string()));
            }
            data.extend_from_slice(&x.pixels);
        }
        Ok(Tensor::from_vec(&[xs.len(), 1, h, w], data))
    }

    /// Predict the noise component of a diffusion state. Deterministic in
    /// `(params, xt, t)`.
    pub fn predict_epsilon(&self, xt: &Image, t: usize) -> Result<Image> {
        Ok(self.predict_epsilon_batch(&[xt], &[t])?.pop().expect("one output"))
    }

    /// Batched prediction with a per-image step.
    pub fn predict_epsilon_batch(&self, xts: &[&Image], ts: &[usize]) -> Result<Vec<Image>> {
        if xts.is_empty() {
            return Ok(Vec::new());
        }
        if xts.len() != ts.len() {
            return Err(CoreError::dim("batch/step count mismatch".to_string()));
        }
        let x = self.to_tensor(xts)?;
        let (eps, _) = unet_forward(&self.params, &x, ts);
        let (w, h) = (xts[0].width, xts[0].height);
        Ok(eps
            .data
            .chunks(w * h)
            .map(|c| Image { width: w, height: h, pixels: c.to_vec() })
            .collect())
    }

    /// Vector-Jacobian product of the prediction at `(xt, t)` with an image-space
    /// cotangent: returns `J^T v` where `J = d eps / d xt`.
    pub fn input_vjp(&self, xt: &Image, t: usize, cotangent: &Image) -> Result<Image> {
        if xt.width != cotangent.width || xt.height != cotangent.height {
            return Err(CoreError::dim("cotangent shape mismatch".to_string()));
        }
        let x = self.to_tensor(&[xt])?;
        let (_, cache) = unet_forward(&self.params, &x, &[t]);
        let dout = Tensor::from_vec(&[1, 1, xt.height, xt.width], cotangent.pixels.clone());
        let dx = unet_backward(&self.params, &cache, &dout, None, true).expect("input grad requested");
        if !dx.all_finite() {
            return Err(CoreError::Numerical("non-finite input gradient".to_string()));
        }
        Ok(Image { width: xt.width, height: xt.height, pixels: dx.data })
    }
}

#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Exponential moving average decay for the inference weights; `None` disables EMA.
    pub ema_decay: Option<f32>,
    /// Images per forward/backward chunk inside a batch (gradient accumulation).
    pub chunk_size: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            epochs: 30,
            batch_size: 128,
            learning_rate: 2e-4,
            seed: 0,
            ema_decay: Some(0.999),
            chunk_size: 16,
        }
    }
}

/// Adam moment estimates, stored as parameter-shaped tensor sets.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: UnetParams<f32>,
    pub v: UnetParams<f32>,
}

impl AdamState {
    fn new(cfg: &UnetConfig) -> Self {
        AdamState { step: 0, m: UnetParams::zeros(cfg), v: UnetParams::zeros(cfg) }
    }
}

const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

/// Full mutable training state; this is what checkpoints persist.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: UnetParams<f32>,
    pub ema: Option<UnetParams<f32>>,
    pub adam: AdamState,
    pub epochs_trained: usize,
}

impl TrainState {
    pub fn init(cfg: &UnetConfig, seed: u64, ema: bool) -> Self {
        let model = UnetParams::init(cfg, &mut rng::stream(seed, "denoiser-init", &[]));
        TrainState {
            ema: ema.then(|| model.clone()),
            adam: AdamState::new(cfg),
            model,
            epochs_trained: 0,
        }
    }

    /// The weights used for sampling: EMA when maintained, raw otherwise.
    pub fn inference_params(&self) -> &UnetParams<f32> {
        self.ema.as_ref().unwrap_or(&self.model)
    }
}

/// Per-epoch mean epsilon-matching loss.
pub type LossLog = Vec<f64>;

fn adam_update(state: &mut TrainState, grads: &UnetParams<f32>, lr: f32, ema_decay: Option<f32>) {
    state.adam.step += 1;
    let t = state.adam.step as f32;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    let mut model = state.model.tensors_mut();
    let mut ms = state.adam.m.tensors_mut();
    let mut vs = state.adam.v.tensors_mut();
    let gs = grads.tensors();
    for i in 0..gs.len() {
        let g = &gs[i].1.data;
        let m = &mut ms[i].1.data;
        let v = &mut vs[i].1.data;
        let p = &mut model[i].1.data;
        for j in 0..g.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    if let (Some(decay), Some(ema)) = (ema_decay, state.ema.as_mut()) {
        // Bias-corrected moving average: the stored estimate is the debiased mean, so
        // short trainings are never contaminated by the random initialization.
        let d = decay as f64;
        let step = state.adam.step as i32;
        let prev_corr = 1.0 - d.powi(step - 1);
        let corr = 1.0 - d.powi(step);
        let keep = (d * prev_corr / corr) as f32;
        let add = ((1.0 - d) / corr) as f32;
        let mut es = ema.tensors_mut();
        for i in 0..es.len() {
            let p = &model[i].1.data;
            let e = &mut es[i].1.data;
            for j in 0..p.len() {
                e[j] = keep * e[j] + add * p[j];
            }
        }
    }
}

/// Train (or continue training) with the epsilon-matching objective:
/// minimize the per-pixel mean of `|eps_hat(x_t, t) - eps|^2` with `t` uniform on
/// `[1, T]`, Adam updates, and an optional EMA of the weights.
///
/// Deterministic under `cfg.seed`: the shuffle, step draws and noise draws derive from it
/// alone, and gradient accumulation sums fixed-size chunks in a fixed order.
pub fn train(
    dataset: &[Image],
    cfg: &TrainerConfig,
    sched: &NoiseSchedule,
    resume: Option<TrainState>,
) -> Result<(TrainState, LossLog)> {
    train_with_progress(dataset, cfg, sched, resume, &mut |_, _| {})
}

/// [`train`] with a per-epoch observer `(epoch index, mean loss)`, for streaming logs
/// and intermediate checkpointing by the caller.
pub fn train_with_progress(
    dataset: &[Image],
    cfg: &TrainerConfig,
    sched: &NoiseSchedule,
    resume: Option<TrainState>,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<(TrainState, LossLog)> {
    if dataset.is_empty() {
        return Err(CoreError::Dataset("empty training set".to_string()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.chunk_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(CoreError::invalid("trainer config values must be positive"));
    }
    let unet_cfg = resume.as_ref().map(|s| s.model.cfg).unwrap_or_default();
    let mut state = resume.unwrap_or_else(|| TrainState::init(&unet_cfg, cfg.seed, cfg.ema_decay.is_some()));
    let (w, h) = (dataset[0].width, dataset[0].height);
    let pixels = w * h;
    let t_max = sched.steps();

    // Model-space copies of the dataset.
    let model_space: Vec<Vec<f32>> = dataset
        .iter()
        .map(|img| img.pixels.iter().map(|v| 2.0 * v - 1.0).collect())
        .collect();

    let mut losses = Vec::with_capacity(cfg.epochs);
    let start_epoch = state.epochs_trained;
    for epoch in start_epoch..start_epoch + cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        shuffle(&mut order, &mut rng::stream(cfg.seed, "train-shuffle", &[epoch as u64]));

        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            // Draw all randomness for the batch up front, sequentially.
            let mut draw = rng::stream(cfg.seed, "train-batch", &[epoch as u64, batch_idx as u64]);
            let ts: Vec<usize> = (0..batch.len())
                .map(|_| 1 + (next_u64(&mut draw) % t_max as u64) as usize)
                .collect();
            let noises: Vec<Vec<f32>> = (0..batch.len()).map(|_| rng::standard_normal(&mut draw, pixels)).collect();

            // Forward/backward over fixed chunks, in parallel, reduced in order.
            let chunk_results: Vec<(UnetParams<f32>, f64)> = batch
                .par_chunks(cfg.chunk_size)
                .enumerate()
                .map(|(ci, chunk)| {
                    let base = ci * cfg.chunk_size;
                    let mut x = Tensor::zeros(&[chunk.len(), 1, h, w]);
                    let mut steps = Vec::with_capacity(chunk.len());
                    for (i, &idx) in chunk.iter().enumerate() {
                        let t = ts[base + i];
                        let a = sched.marginal_scale(t) as f32;
                        let b = sched.marginal_std(t) as f32;
                        let x0 = &model_space[idx];
                        let z = &noises[base + i];
                        for (j, (xv, zv)) in x0.iter().zip(z).enumerate() {
                            x.data[i * pixels + j] = a * xv + b * zv;
                        }
                        steps.push(t);
                    }
                    let (eps, cache) = unet_forward(&state.model, &x, &steps);
                    let mut dout = Tensor::zeros(&eps.shape);
                    let mut loss = 0.0f64;
                    let scale = 2.0 / (batch.len() * pixels) as f32;
                    for (i, _) in chunk.iter().enumerate() {
                        let z = &noises[base + i];
                        for j in 0..pixels {
                            let d = eps.data[i * pixels + j] - z[j];
                            loss += (d as f64) * (d as f64);
                            dout.data[i * pixels + j] = scale * d;
                        }
                    }
                    let mut grads = UnetParams::zeros(&state.model.cfg);
                    unet_backward(&state.model, &cache, &dout, Some(&mut grads), false);
                    (grads, loss)
                })
                .collect();

            let mut grads = UnetParams::zeros(&state.model.cfg);
            let mut batch_loss = 0.0f64;
            for (g, l) in chunk_results {
                for ((_, acc), (_, part)) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                    acc.axpy(1.0, part);
                }
                batch_loss += l;
            }
            batch_loss /= (batch.len() * pixels) as f64;
            if !batch_loss.is_finite() {
                return Err(CoreError::Numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            adam_update(&mut state, &grads, cfg.learning_rate, cfg.ema_decay);
            epoch_loss += batch_loss;
            batches += 1;
        }
        let mean_loss = epoch_loss / batches as f64;
        losses.push(mean_loss);
        state.epochs_trained = epoch + 1;
        on_epoch(epoch, mean_loss);
    }
    if !state.model.all_finite() {
        return Err(CoreError::Numerical("non-finite weights after training".to_string()));
    }
    Ok((state, losses))
}

fn next_u64(rng: &mut rand_chacha::ChaCha8Rng) -> u64 {
    use rand_chacha::rand_core::RngCore;
    rng.next_u64()
}

fn shuffle(order: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = (next_u64(rng) % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"TDNZ";
const CKPT_VERSION: u32 = 1;

/// Schedule metadata embedded in checkpoints; derived arrays are always recomputed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleMeta {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ScheduleMeta {
    pub fn of(sched: &NoiseSchedule) -> Self {
        let (beta_min, beta_max) = sched.beta_bounds();
        ScheduleMeta { steps: sched.steps(), beta_min, beta_max }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: TrainState,
    pub sched: ScheduleMeta,
    pub config_hash: u64,
}

impl Checkpoint {
    pub fn denoiser(&self) -> Denoiser {
        Denoiser::new(self.state.inference_params().clone())
    }
}

struct CkptWriter<W: Write> {
    w: W,
}

impl<W: Write> CkptWriter<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        self.w.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.w.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.w.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn tensor_set(&mut self, name: &str, params: &UnetParams<f32>) -> Result<()> {
        for (tname, t) in params.tensors() {
            let full = format!("{name}.{tname}");
            self.u32(full.len() as u32)?;
            self.w.write_all(full.as_bytes())?;
            self.u32(t.shape.len() as u32)?;
            for d in &t.shape {
                self.u32(*d as u32)?;
            }
            let mut bytes = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            self.w.write_all(&bytes)?;
        }
        Ok(())
    }
}

/// Serialize a full training state. Layout: magic, version, config hash, architecture
/// block, schedule block, epoch/step counters, section flags, then named tensors
/// (name length, name, rank, dims, little-endian f32 data) in fixed traversal order.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = CkptWriter { w: std::io::BufWriter::new(f) };
    w.w.write_all(CKPT_MAGIC)?;
    w.u32(CKPT_VERSION)?;
    w.u64(ckpt.config_hash)?;
    let cfg = &ckpt.state.model.cfg;
    w.u32(cfg.in_channels as u32)?;
    w.u32(cfg.base_channels as u32)?;
    w.u32(cfg.time_embed_dim as u32)?;
    w.u32(cfg.groups_cap as u32)?;
    w.u32(ckpt.sched.steps as u32)?;
    w.f64(ckpt.sched.beta_min)?;
    w.f64(ckpt.sched.beta_max)?;
    w.u64(ckpt.state.epochs_trained as u64)?;
    w.u64(ckpt.state.adam.step)?;
    w.u32(ckpt.state.ema.is_some() as u32)?;
    w.tensor_set("model", &ckpt.state.model)?;
    if let Some(ema) = &ckpt.state.ema {
        w.tensor_set("ema", ema)?;
    }
    w.tensor_set("adam_m", &ckpt.state.adam.m)?;
    w.tensor_set("adam_v", &ckpt.state.adam.v)?;
    Ok(())
}

struct CkptReader<R: Read> {
    r: R,
}

impl<R: Read> CkptReader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.r
            .read_exact(&mut buf)
            .map_err(|_| CoreError::Checkpoint("truncated checkpoint".to_string()))?;
        Ok(buf)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    fn tensor_set(&mut self, name: &str, params: &mut UnetParams<f32>) -> Result<()> {
        for (tname, t) in params.tensors_mut() {
            let expect = format!("{name}.{tname}");
            let nlen = self.u32()? as usize;
            if nlen > 4096 {
                return Err(CoreError::Checkpoint("implausible tensor name length".to_string()));
            }
            let got = String::from_utf8(self.bytes(nlen)?)
                .map_err(|_| CoreError::Checkpoint("bad tensor name".to_string()))?;
            if got != expect {
                return Err(CoreError::Checkpoint(format!(
                    "architecture mismatch: expected tensor {expect}, found {got}"
                )));
            }
            let rank = self.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(self.u32()? as usize);
            }
            if dims != t.shape {
                return Err(CoreError::Checkpoint(format!(
                    "architecture mismatch: tensor {expect} has shape {dims:?}, expected {:?}",
                    t.shape
                )));
            }
            let raw = self.bytes(t.data.len() * 4)?;
            for (v, c) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(c.try_into().unwrap());
            }
        }
        Ok(())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = std::fs::File::open(path)?;
    let mut r = CkptReader { r: std::io::BufReader::new(f) };
    if &r.bytes(4)?[..] != CKPT_MAGIC {
        return Err(CoreError::Checkpoint(format!("{}: bad checkpoint magic", path.display())));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(CoreError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let config_hash = r.u64()?;
    let cfg = UnetConfig {
        in_channels: r.u32()? as usize,
        base_channels: r.u32()? as usize,
        time_embed_dim: r.u32()? as usize,
        groups_cap: r.u32()? as usize,
    };
    let sched = ScheduleMeta { steps: r.u32()? as usize, beta_min: r.f64()?, beta_max: r.f64()? };
    let epochs_trained = r.u64()? as usize;
    let adam_step = r.u64()?;
    let has_ema = r.u32()? != 0;

    let mut model = UnetParams::zeros(&cfg);
    r.tensor_set("model", &mut model)?;
    let ema = if has_ema {
        let mut e = UnetParams::zeros(&cfg);
        r.tensor_set("ema", &mut e)?;
        Some(e)
    } else {
        None
    };
    let mut m = UnetParams::zeros(&cfg);
    r.tensor_set("adam_m", &mut m)?;
    let mut v = UnetParams::zeros(&cfg);
    r.tensor_set("adam_v", &mut v)?;

    let mut trailing = Vec::new();
    r.r.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(CoreError::Checkpoint(format!("{} trailing bytes in checkpoint", trailing.len())));
    }

    Ok(Checkpoint {
        state: TrainState {
            model,
            ema,
            adam: AdamState { step: adam_step, m, v },
            epochs_trained,
        },
        sched,
        config_hash,
    })
}
