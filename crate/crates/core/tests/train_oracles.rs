//! Trainer convergence oracles on a memorizable problem: overfit a small network to a
//! single repeated image and check noise prediction, posterior-mean denoising and
//! reconstruction faithfulness against recorded thresholds.

use sinodiff_core::denoiser::{train, Denoiser, TrainState, TrainerConfig};
use sinodiff_core::diffusion::{forward_diffuse, tweedie_denoise, NoiseSchedule};
use sinodiff_core::image::Image;
use sinodiff_core::nn::unet::UnetConfig;
use sinodiff_core::rng;
use sinodiff_core::samplers::{ReconEngine, StepGrid};

fn digit_like_image() -> Image {
    // Two strokes of a blobby pseudo-digit.
    let mut img = Image::zeros(28, 28);
    for t in 0..40 {
        let f = t as f64 / 39.0;
        let (x, y) = (8.0 + 10.0 * f, 5.0 + 17.0 * f);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (px, py) = ((x as i64 + dx) as usize, (y as i64 + dy) as usize);
                if px < 28 && py < 28 {
                    img.set(py, px, 1.0);
                }
            }
        }
        let (x2, y2) = (19.0 - 8.0 * f, 7.0 + 6.0 * f);
        let (px, py) = (x2 as usize, y2 as usize);
        img.set(py, px, 0.8);
    }
    img
}

fn overfit_config() -> UnetConfig {
    UnetConfig { in_channels: 1, base_channels: 8, time_embed_dim: 32, groups_cap: 4 }
}

fn overfit_single_image() -> (Denoiser, NoiseSchedule, Image) {
    let sched = NoiseSchedule::linear(1000, 0.0015, 0.0195).unwrap();
    let img = digit_like_image();
    let dataset = vec![img.clone(); 16];
    let cfg = TrainerConfig {
        epochs: 1000,
        batch_size: 16,
        learning_rate: 2e-3,
        seed: 21,
        ema_decay: Some(0.995),
        chunk_size: 16,
    };
    let state = TrainState::init(&overfit_config(), 21, true);
    let (state, losses) = train(&dataset, &cfg, &sched, Some(state)).unwrap();
    // The zero-predictor baseline sits at the mean squared noise norm, about 1.
    assert!(losses[0] > 0.8, "initial loss {}", losses[0]);
    assert!(
        losses.last().unwrap() < &(0.5 * losses[0]),
        "no convergence: {} -> {}",
        losses[0],
        losses.last().unwrap()
    );
    (Denoiser::new(state.inference_params().clone()), sched, img)
}

#[test]
fn single_image_overfit_oracles() {
    let (den, sched, img) = overfit_single_image();
    let model_img = img.map(|v| 2.0 * v - 1.0);

    // Noise prediction on fresh corruptions, averaged over the step range.
    // Recorded from this configuration: ~0.02 mean per-pixel error.
    let mut rng = rng::stream(99, "overfit-eval", &[]);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for t in (50..=950).step_by(100) {
        for _ in 0..4 {
            let z = Image::from_pixels(28, 28, rng::standard_normal(&mut rng, 784)).unwrap();
            let xt = forward_diffuse(&model_img, t, &z, &sched).unwrap();
            let eps = den.predict_epsilon(&xt, t).unwrap();
            total += eps.mse(&z).unwrap();
            count += 1;
        }
    }
    let mean_eps_mse = total / count as f64;
    assert!(mean_eps_mse < 0.05, "mean eps error {mean_eps_mse:.4}");

    // Posterior-mean denoising beats the raw noisy state at t = 150.
    let t = 150;
    let mut improved = 0;
    for trial in 0..5 {
        let z = Image::from_pixels(28, 28, rng::standard_normal(&mut rng, 784)).unwrap();
        let xt = forward_diffuse(&model_img, t, &z, &sched).unwrap();
        let eps = den.predict_epsilon(&xt, t).unwrap();
        let score = sinodiff_core::diffusion::epsilon_to_score(&eps, t, &sched).unwrap();
        let x0_hat = tweedie_denoise(&xt, t, &score, &sched).unwrap();
        let before = xt.mse(&model_img).unwrap();
        let after = x0_hat.mse(&model_img).unwrap();
        if after < before {
            improved += 1;
        } else {
            eprintln!("trial {trial}: {after:.4} !< {before:.4}");
        }
    }
    assert!(improved >= 4, "posterior mean improved only {improved}/5 trials");

    // Faithfulness at the smallest grid step: the reconstruction barely moves away from
    // a memorized clean input. Recorded threshold: MSE well under 0.01 in [0, 1] units.
    let grid = StepGrid::default();
    let engine = ReconEngine::new(&den, &sched, &grid);
    let rec = engine.reconstruct_uncond(&img, 10, 5).unwrap();
    let err = rec.mse(&img).unwrap();
    assert!(err < 0.01, "t0 = 10 reconstruction error {err:.5}");
}
