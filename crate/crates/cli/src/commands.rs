//! Subcommand implementations.

use crate::config::RunConfig;
use anyhow::{bail, Context, Result};
use sinodiff_core::data::{load_test, load_train, make_splits};
use sinodiff_core::denoiser::{self, load_checkpoint, save_checkpoint, Checkpoint, ScheduleMeta, TrainState};
use sinodiff_core::diffusion::NoiseSchedule;
use sinodiff_core::evaluation::{
    bootstrap_ci, build_test_set, roc_points, ExperimentPlan, ReportCell,
};
use sinodiff_core::image::write_pgm;
use sinodiff_core::pipeline::{
    ct_csv_header, ct_csv_row, parse_ct_row, read_score_csv, write_score_csv, Pipeline,
};
use sinodiff_core::samplers::content_key;
use sinodiff_core::samplers::{ConditioningContext, ReconEngine};
use sinodiff_core::scoring::ScoreRecord;
use sinodiff_core::tomography::{fbp_sparse, forward_project, ProjectionGeometry, RadonPlan, SubsamplingMask};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

fn require_dataset(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.data_dir();
    for file in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"] {
        let p = dir.join(file);
        if !p.exists() {
            bail!(
                "dataset file {} not found; set SINODIFF_DATA_DIR or paths.data_dir (see README)",
                p.display()
            );
        }
    }
    Ok(dir)
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir().join("checkpoint.tdnz")
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<()> {
    let data_dir = require_dataset(cfg)?;
    let out_dir = cfg.out_dir();
    std::fs::create_dir_all(&out_dir)?;
    let sched = NoiseSchedule::linear(cfg.schedule.steps, cfg.schedule.beta_min, cfg.schedule.beta_max)?;

    let train_set = load_train(&data_dir)?;
    let splits = make_splits(&train_set, cfg.id_digit, cfg.scoring.validation_size, cfg.seed)?;
    println!(
        "training digit {} on {} images ({} held out for validation)",
        cfg.id_digit,
        splits.train.len(),
        splits.validation.len()
    );

    let ckpt_path = checkpoint_path(cfg);
    let state = if resume {
        let ckpt = load_checkpoint(&ckpt_path).context("resume requested but checkpoint unusable")?;
        println!("resuming from epoch {}", ckpt.state.epochs_trained);
        ckpt.state
    } else {
        TrainState::init(&cfg.unet_config(), cfg.seed, cfg.trainer.ema_decay.is_some())
    };

    let t_start = std::time::Instant::now();
    let first_epoch = state.epochs_trained;
    let log_path = out_dir.join("train_loss.csv");
    if first_epoch == 0 && !log_path.exists() {
        std::fs::write(&log_path, "epoch,loss\n")?;
    }
    let mut epoch_clock = std::time::Instant::now();
    let (state, losses) = denoiser::train_with_progress(
        &splits.train,
        &cfg.trainer_config(),
        &sched,
        Some(state),
        &mut |epoch, loss| {
            println!("epoch {epoch:>3}: loss {loss:.5} ({:.0}s)", epoch_clock.elapsed().as_secs_f64());
            epoch_clock = std::time::Instant::now();
            if let Ok(mut f) = std::fs::OpenOptions::new().append(true).open(&log_path) {
                let _ = writeln!(f, "{epoch},{loss:.6}");
            }
        },
    )?;
    println!("trained {} epochs in {:.1}s", losses.len(), t_start.elapsed().as_secs_f64());

    let ckpt = Checkpoint {
        state,
        sched: ScheduleMeta::of(&sched),
        config_hash: cfg.config_hash(),
    };
    save_checkpoint(&ckpt_path, &ckpt)?;
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

struct LoadedModel {
    denoiser: sinodiff_core::denoiser::Denoiser,
    sched: NoiseSchedule,
}

fn load_model(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<LoadedModel> {
    let path = checkpoint.unwrap_or_else(|| checkpoint_path(cfg));
    let ckpt = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    let expect = ScheduleMeta {
        steps: cfg.schedule.steps,
        beta_min: cfg.schedule.beta_min,
        beta_max: cfg.schedule.beta_max,
    };
    if ckpt.sched != expect {
        bail!(
            "checkpoint schedule {:?} does not match configuration {:?}",
            ckpt.sched,
            expect
        );
    }
    if ckpt.state.model.cfg != cfg.unet_config() {
        bail!("checkpoint architecture does not match configuration");
    }
    Ok(LoadedModel { denoiser: ckpt.denoiser(), sched: ckpt.sched.build()? })
}

pub fn score(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let data_dir = require_dataset(cfg)?;
    let out_dir = cfg.out_dir();
    let scores_dir = out_dir.join("scores");
    std::fs::create_dir_all(&scores_dir)?;
    let model = load_model(cfg, checkpoint)?;
    let grid = cfg.step_grid()?;
    let opts = cfg.pipeline_options()?;

    let train_set = load_train(&data_dir)?;
    let splits = make_splits(&train_set, cfg.id_digit, cfg.scoring.validation_size, cfg.seed)?;
    let test_pool = load_test(&data_dir)?;

    let cache_dir = cfg.cache_dir();
    std::fs::create_dir_all(&cache_dir)?;
    let pipe = Pipeline::new(&model.denoiser, &model.sched, &grid, opts, Some(&cache_dir), &splits.train)?;

    println!("fitting validation statistics on {} full-view images", splits.validation.len());
    let t0 = std::time::Instant::now();
    let tables = pipe.validation_tables(&splits.validation)?;
    let stats = pipe.fit_stats(&tables)?;
    println!("validation pass done in {:.1}s ({} evaluations)", t0.elapsed().as_secs_f64(), pipe.eval_count());

    let mut audit = String::new();
    let per_mode = grid.total_evals();
    audit.push_str(&format!(
        "evaluations per image per mode: {per_mode} (grid log); weighted variants reuse both modes\n"
    ));

    for case in cfg.sparsity_cases()? {
        let mut plan = ExperimentPlan::new(cfg.id_digit, case, cfg.plan.per_cell, cfg.seed)?;
        plan.noise_std = cfg.conditioning.noise_std;
        plan.full_angles = cfg.plan.full_angles;
        let entries = build_test_set(&plan, &test_pool)?;
        println!("{} sparsity: scoring {} entries", case.tag(), entries.len());
        let before = pipe.eval_count();
        let t0 = std::time::Instant::now();
        let records = pipe.score_entries(&entries, &stats)?;
        let spent = pipe.eval_count() - before;
        println!(
            "  done in {:.1}s, {spent} evaluations ({:.0} per entry)",
            t0.elapsed().as_secs_f64(),
            spent as f64 / entries.len() as f64
        );
        audit.push_str(&format!(
            "{}: {} entries, {} evaluations, {:.1} per entry ({} expected on a cold cache)\n",
            case.tag(),
            entries.len(),
            spent,
            spent as f64 / entries.len() as f64,
            2 * per_mode
        ));
        let path = scores_dir.join(format!("mnist{}_{}.csv", cfg.id_digit, case.tag()));
        write_score_csv(&path, &records, grid.t0_set(), cfg.config_hash())?;
        println!("  scores written to {}", path.display());

        if cfg.plan.ct_per_cell > 0 {
            println!("  CT reconstructions ({} per cell per side)", cfg.plan.ct_per_cell);
            let quality = pipe.ct_ssim(&entries, cfg.plan.ct_per_cell)?;
            let path = scores_dir.join(format!("ct_mnist{}_{}.csv", cfg.id_digit, case.tag()));
            let mut body = format!("# content_key={:016x}\n{}\n", cfg.config_hash(), ct_csv_header());
            for q in &quality {
                body.push_str(&ct_csv_row(q));
                body.push('\n');
            }
            std::fs::write(&path, body)?;
            println!("  CT quality written to {}", path.display());
        }
    }
    std::fs::write(scores_dir.join("audit.txt"), audit)?;
    Ok(())
}

#[allow(clippy::type_complexity)]
fn pooled_cells(records: &[ScoreRecord], seed: u64) -> Result<(Vec<ReportCell>, BTreeMap<(String, u8), Vec<(f64, f64)>>)> {
    let mut kinds: Vec<String> = records.iter().map(|r| r.kind_tag.clone()).collect();
    kinds.sort();
    kinds.dedup();
    let mut ood_digits: Vec<u8> = records.iter().filter(|r| r.is_ood).map(|r| r.digit).collect();
    ood_digits.sort_unstable();
    ood_digits.dedup();

    let mut cells = Vec::new();
    let mut roc = BTreeMap::new();
    for kind in &kinds {
        let id_scores: Vec<f64> = records
            .iter()
            .filter(|r| &r.kind_tag == kind && !r.is_ood)
            .map(|r| r.score)
            .collect();
        for &digit in &ood_digits {
            let ood_scores: Vec<f64> = records
                .iter()
                .filter(|r| &r.kind_tag == kind && r.is_ood && r.digit == digit)
                .map(|r| r.score)
                .collect();
            let kind_hash = content_key(&kind.bytes().map(|b| b as u64).collect::<Vec<_>>());
            let cell_seed = content_key(&[seed, digit as u64, kind_hash]);
            let result = bootstrap_ci(&id_scores, &ood_scores, 1000, cell_seed)?;
            cells.push(ReportCell { kind_tag: kind.clone(), ood_digit: digit, result });
            roc.insert((kind.clone(), digit), roc_points(&id_scores, &ood_scores));
        }
    }
    Ok((cells, roc))
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let out_dir = cfg.out_dir();
    let scores_dir = out_dir.join("scores");
    let reports_dir = out_dir.join("reports");
    let grid = cfg.step_grid()?;
    let mut found = 0;
    for case in cfg.sparsity_cases()? {
        let path = scores_dir.join(format!("mnist{}_{}.csv", cfg.id_digit, case.tag()));
        if !path.exists() {
            continue;
        }
        found += 1;
        let (records, key) = read_score_csv(&path, grid.t0_set().len())?;
        if key != cfg.config_hash() {
            bail!(
                "{} was produced under config hash {key:016x}, current is {:016x}; refusing stale reuse",
                path.display(),
                cfg.config_hash()
            );
        }
        let (cells, roc) = pooled_cells(&records, cfg.seed)?;
        sinodiff_core::evaluation::emit_report(&reports_dir, cfg.id_digit, case, &cells, &roc)?;
        println!(
            "report for {} sparsity written under {}",
            case.tag(),
            reports_dir.join(format!("{}", cfg.id_digit)).join(case.tag()).display()
        );

        let ct_path = scores_dir.join(format!("ct_mnist{}_{}.csv", cfg.id_digit, case.tag()));
        if ct_path.exists() {
            let body = std::fs::read_to_string(&ct_path)?;
            let quality: Vec<_> = body
                .lines()
                .skip(2)
                .filter(|l| !l.is_empty())
                .map(parse_ct_row)
                .collect::<sinodiff_core::Result<Vec<_>>>()?;
            let mut summary = String::from("n_proj,mean_ssim_id,mean_ssim_ood,count_id,count_ood\n");
            let mut counts: Vec<usize> = quality.iter().map(|q| q.n_proj).collect();
            counts.sort_unstable();
            counts.dedup();
            for n_proj in counts {
                let id: Vec<f64> =
                    quality.iter().filter(|q| q.n_proj == n_proj && !q.is_ood).map(|q| q.ssim).collect();
                let ood: Vec<f64> =
                    quality.iter().filter(|q| q.n_proj == n_proj && q.is_ood).map(|q| q.ssim).collect();
                let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
                summary.push_str(&format!(
                    "{n_proj},{:.4},{:.4},{},{}\n",
                    mean(&id),
                    mean(&ood),
                    id.len(),
                    ood.len()
                ));
            }
            let dest = reports_dir.join(format!("{}", cfg.id_digit)).join(case.tag()).join("ssim_summary.csv");
            std::fs::write(&dest, summary)?;
            println!("SSIM summary written to {}", dest.display());
        }
    }
    if found == 0 {
        bail!("no score tables under {}; run `sinodiff score` first", scores_dir.display());
    }
    Ok(())
}

pub fn reconstruct(cfg: &RunConfig, digit: Option<u8>, index: usize, n_proj: usize, ct: bool) -> Result<()> {
    let data_dir = require_dataset(cfg)?;
    let model = load_model(cfg, None)?;
    let grid = cfg.step_grid()?;
    let out_dir = cfg.out_dir().join("strip");
    std::fs::create_dir_all(&out_dir)?;

    let digit = digit.unwrap_or(cfg.id_digit);
    let pool = load_test(&data_dir)?;
    let images = pool.images_of_digit(digit);
    if index >= images.len() {
        bail!("digit {digit} has only {} test images", images.len());
    }
    let image = &images[index];

    let geometry = ProjectionGeometry::uniform(cfg.plan.full_angles, image.width)?;
    let mask = SubsamplingMask::uniform(n_proj, cfg.plan.full_angles)?;
    let y = forward_project(image, &mask, &geometry)?;
    let plan = RadonPlan::new(&geometry, image.width)?;
    let fbp_input = fbp_sparse(&y, &mask, &plan)?;

    let mut engine = ReconEngine::new(&model.denoiser, &model.sched, &grid);
    engine.sampler = cfg.sampler_kind()?;
    let mut ctx = ConditioningContext::new(y, mask, geometry)?.with_lambda(cfg.conditioning.lambda)?;
    ctx.mcg_step_size = cfg.conditioning.mcg_step_size;
    ctx.mcg_in_multiscale = cfg.conditioning.mcg_in_multiscale;

    write_pgm(&out_dir.join("ground_truth.pgm"), image)?;
    write_pgm(&out_dir.join("input_fbp.pgm"), &fbp_input)?;

    let uncond = engine.multiscale_uncond(&fbp_input, cfg.seed)?;
    for (t0, img) in &uncond {
        write_pgm(&out_dir.join(format!("u_t{t0:04}.pgm")), img)?;
    }
    let cond = engine.multiscale_cond(&ctx, cfg.seed)?;
    for (t0, img) in &cond {
        write_pgm(&out_dir.join(format!("c_t{t0:04}.pgm")), img)?;
    }
    println!(
        "strip written to {} ({} evaluations for {} reconstructions)",
        out_dir.display(),
        engine.eval_count(),
        uncond.len() + cond.len()
    );
    if ct {
        let t0 = std::time::Instant::now();
        let rec = engine.ct_reconstruct(&ctx, cfg.seed)?;
        write_pgm(&out_dir.join("ct_t1000.pgm"), &rec)?;
        println!("CT reconstruction done in {:.1}s", t0.elapsed().as_secs_f64());
    }
    Ok(())
}
