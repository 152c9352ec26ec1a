//! End-to-end scoring pipeline: cached multi-scale reconstructions, validation
//! statistics, per-image score records and CT-reconstruction quality summaries.
//!
//! This is the engine behind the command-line stages; the heavy artifacts (partial
//! reconstructions) are cached on disk per entry, start step and mode, scoped by a
//! content key over the checkpoint weights and the sampling configuration, so rerunning
//! a stage performs no redundant model evaluations.

use crate::denoiser::Denoiser;
use crate::diffusion::NoiseSchedule;
use crate::error::{CoreError, Result};
use crate::evaluation::{ssim, TestEntry};
use crate::image::Image;
use crate::samplers::{
    content_key, ConditioningContext, ReconCache, ReconEngine, ReconMode, SamplerKind, StepGrid,
};
use crate::scoring::{
    combine_errors, compute_weight, fit_validation_stats, image_errors, multi_scale_score,
    ErrorScheme, ImageErrors, ScoreRecord, StatKind, ValidationStats, WeightedStatsPolicy,
};
use crate::tomography::{
    fbp_sparse, forward_project, subsample, Measurements, ProjectionGeometry, RadonPlan,
    SubsamplingMask,
};
use crate::scoring;
use rayon::prelude::*;

/// Sampling and scoring options shared across a run.
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub lambda: f32,
    pub mcg_step_size: f32,
    pub mcg_in_multiscale: bool,
    pub sampler: SamplerKind,
    /// Multiplier applied to the measurement-distance weight before clamping to [0, 1].
    pub w_scale: f64,
    pub stats_policy: WeightedStatsPolicy,
    pub seed: u64,
    pub full_angles: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            lambda: 1.0,
            mcg_step_size: 1.0,
            mcg_in_multiscale: false,
            sampler: SamplerKind::Plms,
            w_scale: 1.0,
            stats_policy: WeightedStatsPolicy::PerImageWeight,
            seed: 0,
            full_angles: 180,
        }
    }
}

/// A scoring pipeline bound to one trained model.
pub struct Pipeline<'a> {
    pub engine: ReconEngine<'a>,
    pub opts: PipelineOptions,
    cache: Option<ReconCache>,
    plan: RadonPlan,
    mean_image: Image,
}

/// Content key scoping cached reconstructions: checkpoint weights plus everything that
/// changes sampler outputs.
pub fn pipeline_cache_key(denoiser: &Denoiser, sched: &NoiseSchedule, grid: &StepGrid, opts: &PipelineOptions) -> u64 {
    let mut parts: Vec<u64> = Vec::new();
    for (_, t) in denoiser.params().tensors() {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for v in &t.data {
            h ^= v.to_bits() as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        parts.push(h);
    }
    parts.push(sched.steps() as u64);
    parts.push(sched.beta_bounds().0.to_bits());
    parts.push(sched.beta_bounds().1.to_bits());
    parts.push(grid.spacing() as u64);
    parts.push(grid.t_max() as u64);
    for &t0 in grid.t0_set() {
        parts.push(t0 as u64);
    }
    parts.push(opts.lambda.to_bits() as u64);
    parts.push(opts.mcg_step_size.to_bits() as u64);
    parts.push(opts.mcg_in_multiscale as u64);
    parts.push(match opts.sampler {
        SamplerKind::Plms => 0,
        SamplerKind::Ddim => 1,
    });
    parts.push(opts.seed);
    parts.push(opts.full_angles as u64);
    content_key(&parts)
}

fn entry_seed(global: u64, entry_id: &str) -> u64 {
    let parts: Vec<u64> = entry_id.bytes().map(|b| b as u64).collect();
    content_key(&[global, 0x5eed, content_key(&parts)])
}

impl<'a> Pipeline<'a> {
    pub fn new(
        denoiser: &'a Denoiser,
        sched: &'a NoiseSchedule,
        grid: &'a StepGrid,
        opts: PipelineOptions,
        cache_root: Option<&std::path::Path>,
        train_images: &[Image],
    ) -> Result<Self> {
        let mean_image = scoring::training_mean_image(train_images)?;
        let geometry = ProjectionGeometry::uniform(opts.full_angles, mean_image.width)?;
        let plan = RadonPlan::new(&geometry, mean_image.width)?;
        let mut engine = ReconEngine::new(denoiser, sched, grid);
        engine.sampler = opts.sampler;
        let cache = match cache_root {
            Some(root) => Some(ReconCache::open(root, pipeline_cache_key(denoiser, sched, grid, &opts))?),
            None => None,
        };
        Ok(Pipeline { engine, opts, cache, plan, mean_image })
    }

    pub fn plan(&self) -> &RadonPlan {
        &self.plan
    }

    pub fn mean_image(&self) -> &Image {
        &self.mean_image
    }

    pub fn eval_count(&self) -> u64 {
        self.engine.eval_count()
    }

    fn cached_fan(&self, entry_id: &str, mode: ReconMode) -> Option<Vec<(usize, Image)>> {
        let cache = self.cache.as_ref()?;
        let mut out = Vec::with_capacity(self.engine.grid.t0_set().len());
        for &t0 in self.engine.grid.t0_set() {
            out.push((t0, cache.get(entry_id, mode.tag(), t0)?));
        }
        Some(out)
    }

    fn store_fan(&self, entry_id: &str, mode: ReconMode, fan: &[(usize, Image)]) -> Result<()> {
        if let Some(cache) = &self.cache {
            for (t0, img) in fan {
                cache.put(entry_id, mode.tag(), *t0, img)?;
            }
        }
        Ok(())
    }

    fn conditioning(&self, y: &Measurements, mask: &SubsamplingMask) -> Result<ConditioningContext> {
        let mut ctx = ConditioningContext::new(y.clone(), mask.clone(), self.plan.geometry().clone())?
            .with_lambda(self.opts.lambda)?;
        ctx.mcg_step_size = self.opts.mcg_step_size;
        ctx.mcg_in_multiscale = self.opts.mcg_in_multiscale;
        Ok(ctx)
    }

    /// Multi-scale reconstructions of one entry in both modes, cache-first.
    #[allow(clippy::type_complexity)]
    pub fn reconstruct_entry(
        &self,
        entry_id: &str,
        y: &Measurements,
        mask: &SubsamplingMask,
    ) -> Result<(Vec<(usize, Image)>, Vec<(usize, Image)>)> {
        let seed = entry_seed(self.opts.seed, entry_id);
        let ctx = self.conditioning(y, mask)?;
        let uncond = match self.cached_fan(entry_id, ReconMode::Unconditional) {
            Some(fan) => fan,
            None => {
                let input = fbp_sparse(y, mask, &self.plan)?;
                let fan = self.engine.multiscale_uncond(&input, seed)?;
                self.store_fan(entry_id, ReconMode::Unconditional, &fan)?;
                fan
            }
        };
        let cond = match self.cached_fan(entry_id, ReconMode::Conditional) {
            Some(fan) => fan,
            None => {
                let fan = self.engine.multiscale_cond(&ctx, seed)?;
                self.store_fan(entry_id, ReconMode::Conditional, &fan)?;
                fan
            }
        };
        Ok((uncond, cond))
    }

    /// Error table (all six schemes) plus measurement-distance weight for one entry.
    pub fn entry_errors(&self, entry_id: &str, y: &Measurements, mask: &SubsamplingMask) -> Result<ImageErrors> {
        let (uncond, cond) = self.reconstruct_entry(entry_id, y, mask)?;
        let a_mu = mean_projection(&self.mean_image, mask, &self.plan)?;
        let w = compute_weight(y, &a_mu)?;
        image_errors(y, mask, &self.plan, &uncond, &cond, w)
    }

    /// Validation tables over full-view in-distribution images (parallel across images).
    pub fn validation_tables(&self, validation: &[Image]) -> Result<Vec<ImageErrors>> {
        let full_mask = SubsamplingMask::full(self.opts.full_angles);
        validation
            .par_iter()
            .enumerate()
            .map(|(i, img)| {
                let y = forward_project(img, &full_mask, self.plan.geometry())?;
                self.entry_errors(&format!("val-i{i:05}-full"), &y, &full_mask)
            })
            .collect()
    }

    pub fn fit_stats(&self, tables: &[ImageErrors]) -> Result<ValidationStats> {
        fit_validation_stats(tables, self.opts.stats_policy)
    }

    /// Score every entry under every scheme and weighting variant.
    pub fn score_entries(&self, entries: &[TestEntry], stats: &ValidationStats) -> Result<Vec<ScoreRecord>> {
        let tables: Vec<(usize, ImageErrors)> = entries
            .par_iter()
            .enumerate()
            .map(|(i, e)| Ok((i, self.entry_errors(&e.id, &e.measurements, &e.mask)?)))
            .collect::<Result<Vec<_>>>()?;

        let mut records = Vec::new();
        for (i, table) in tables {
            let e = &entries[i];
            let mut push = |kind_tag: String, errors: Vec<f64>, score: f64, w: f64| {
                records.push(ScoreRecord {
                    image_id: e.id.clone(),
                    is_ood: e.is_ood,
                    digit: e.digit,
                    n_proj: e.n_proj,
                    kind_tag,
                    w,
                    errors,
                    score,
                });
            };
            for scheme in ErrorScheme::all() {
                let errors = table.errors[&scheme].clone();
                let score = multi_scale_score(&errors, stats, StatKind::Scheme(scheme))?;
                push(scheme.tag(), errors, score, table.w);
            }
            for kind in StatKind::weighted_kinds() {
                let StatKind::Weighted { gamma, averaging } = kind else { unreachable!() };
                let w_eff = if averaging { 0.5 } else { (table.w * self.opts.w_scale).clamp(0.0, 1.0) };
                let cond = &table.errors[&ErrorScheme { domain: gamma, mode: ReconMode::Conditional }];
                let uncond = &table.errors[&ErrorScheme { domain: gamma, mode: ReconMode::Unconditional }];
                let combined = combine_errors(cond, uncond, w_eff);
                let score = multi_scale_score(&combined, stats, kind)?;
                push(kind.tag(), combined, score, table.w);
            }
        }
        Ok(records)
    }

    /// Full CT reconstruction of one entry (cache tag `ct` at the terminal step).
    pub fn ct_reconstruct_entry(&self, entry: &TestEntry) -> Result<Image> {
        let t_max = self.engine.sched.steps();
        if let Some(cache) = &self.cache {
            if let Some(img) = cache.get(&entry.id, "ct", t_max) {
                return Ok(img);
            }
        }
        let ctx = self.conditioning(&entry.measurements, &entry.mask)?;
        let out = self.engine.ct_reconstruct(&ctx, entry_seed(self.opts.seed, &entry.id))?;
        if let Some(cache) = &self.cache {
            cache.put(&entry.id, "ct", t_max, &out)?;
        }
        Ok(out)
    }

    /// CT reconstructions and SSIM against the hidden ground truth for a balanced subset
    /// of the test set: `id_per_cell` ID images and `id_per_cell` OOD images (spread over
    /// the OOD digits) per projection count.
    pub fn ct_ssim(&self, entries: &[TestEntry], id_per_cell: usize) -> Result<Vec<CtQuality>> {
        let subset = select_ct_subset(entries, id_per_cell);
        subset
            .par_iter()
            .map(|&e| {
                let rec = self.ct_reconstruct_entry(e)?;
                Ok(CtQuality {
                    image_id: e.id.clone(),
                    is_ood: e.is_ood,
                    digit: e.digit,
                    n_proj: e.n_proj,
                    ssim: ssim(&e.image, &rec)?,
                })
            })
            .collect()
    }
}

/// SSIM of one CT reconstruction against its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CtQuality {
    pub image_id: String,
    pub is_ood: bool,
    pub digit: u8,
    pub n_proj: usize,
    pub ssim: f64,
}

pub fn ct_csv_header() -> &'static str {
    "image_id,label,digit,n_proj,ssim"
}

pub fn ct_csv_row(q: &CtQuality) -> String {
    format!(
        "{},{},{},{},{:.9e}",
        q.image_id,
        if q.is_ood { "ood" } else { "id" },
        q.digit,
        q.n_proj,
        q.ssim
    )
}

pub fn parse_ct_row(line: &str) -> Result<CtQuality> {
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != 5 {
        return Err(CoreError::Dataset("bad ct quality row".to_string()));
    }
    Ok(CtQuality {
        image_id: f[0].to_string(),
        is_ood: f[1] == "ood",
        digit: f[2].parse().map_err(|_| CoreError::Dataset("bad digit".to_string()))?,
        n_proj: f[3].parse().map_err(|_| CoreError::Dataset("bad n_proj".to_string()))?,
        ssim: f[4].parse().map_err(|_| CoreError::Dataset("bad ssim".to_string()))?,
    })
}

/// Balanced CT subset: per projection count, the first `per_cell` ID entries and
/// `per_cell` OOD entries taken round-robin across the OOD digits.
pub fn select_ct_subset(entries: &[TestEntry], per_cell: usize) -> Vec<&TestEntry> {
    let mut counts: Vec<usize> = entries.iter().map(|e| e.n_proj).collect();
    counts.sort_unstable();
    counts.dedup();
    let mut out = Vec::new();
    for n_proj in counts {
        let id: Vec<&TestEntry> = entries.iter().filter(|e| e.n_proj == n_proj && !e.is_ood).collect();
        out.extend(id.into_iter().take(per_cell));
        let mut digits: Vec<u8> = entries
            .iter()
            .filter(|e| e.n_proj == n_proj && e.is_ood)
            .map(|e| e.digit)
            .collect();
        digits.sort_unstable();
        digits.dedup();
        let mut picked = 0usize;
        let mut cursor = vec![0usize; digits.len()];
        'outer: while picked < per_cell {
            let mut advanced = false;
            for (di, &d) in digits.iter().enumerate() {
                let pool: Vec<&TestEntry> = entries
                    .iter()
                    .filter(|e| e.n_proj == n_proj && e.is_ood && e.digit == d)
                    .collect();
                if cursor[di] < pool.len() {
                    out.push(pool[cursor[di]]);
                    cursor[di] += 1;
                    picked += 1;
                    advanced = true;
                    if picked >= per_cell {
                        break 'outer;
                    }
                }
            }
            if !advanced {
                break;
            }
        }
    }
    out
}

/// Write a score CSV with a provenance header comment carrying the cache content key.
pub fn write_score_csv(path: &std::path::Path, records: &[ScoreRecord], t0s: &[usize], key: u64) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# content_key={key:016x}")?;
    writeln!(f, "{}", scoring::score_csv_header(t0s))?;
    for r in records {
        writeln!(f, "{}", scoring::score_csv_row(r))?;
    }
    Ok(())
}

/// Read a score CSV; returns the records and the embedded content key.
pub fn read_score_csv(path: &std::path::Path, n_t0: usize) -> Result<(Vec<ScoreRecord>, u64)> {
    let body = std::fs::read_to_string(path)?;
    let mut lines = body.lines();
    let key_line = lines.next().ok_or_else(|| CoreError::Dataset("empty score csv".to_string()))?;
    let key = key_line
        .strip_prefix("# content_key=")
        .and_then(|s| u64::from_str_radix(s, 16).ok())
        .ok_or_else(|| CoreError::Dataset("missing content key header".to_string()))?;
    let _header = lines.next();
    let mut records = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        records.push(scoring::parse_score_row(line, n_t0)?);
    }
    Ok((records, key))
}

/// Convenience hook used by the weighting scheme: projection of the training mean under
/// an arbitrary mask.
pub fn mean_projection(mean_image: &Image, mask: &SubsamplingMask, plan: &RadonPlan) -> Result<Measurements> {
    subsample(&plan.apply(mean_image)?, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::data::LabeledImageSet;
    use crate::evaluation::{build_test_set, ExperimentPlan, SparsityCase};
    use crate::nn::unet::UnetConfig;

    fn toy_pool() -> LabeledImageSet {
        let digits = [1u8, 3, 4, 5, 6, 7, 8, 9];
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        let mut r = rng::stream(5, "toy-pool", &[]);
        for &d in &digits {
            for _ in 0..20 {
                pixels.extend(
                    rng::standard_normal(&mut r, 784)
                        .iter()
                        .map(|v| (0.3 + 0.25 * v).clamp(0.0, 1.0)),
                );
                labels.push(d);
            }
        }
        LabeledImageSet::new(28, 28, pixels, labels).unwrap()
    }

    /// End-to-end smoke test on a tiny model and grid, exercising the cache contract:
    /// a second pass over the same inputs performs zero model evaluations.
    #[test]
    fn pipeline_caches_reconstructions() {
        let sched = NoiseSchedule::linear(100, 0.0015, 0.0195).unwrap();
        let den = Denoiser::init(&UnetConfig::tiny(), 3);
        let grid = StepGrid::new(100, 10, vec![20, 50]).unwrap();
        let opts = PipelineOptions { seed: 11, ..Default::default() };
        let cache_root = std::env::temp_dir().join(format!("sinodiff-pipe-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&cache_root);

        let pool = toy_pool();
        let train: Vec<Image> = pool.images_of_digit(4);
        let plan = ExperimentPlan::new(4, SparsityCase::Moderate, 2, 7).unwrap();
        let entries = build_test_set(&plan, &pool).unwrap();

        let pipe = Pipeline::new(&den, &sched, &grid, opts.clone(), Some(&cache_root), &train).unwrap();
        let validation: Vec<Image> = pool.images_of_digit(4).into_iter().take(4).collect();
        let tables = pipe.validation_tables(&validation).unwrap();
        let stats = pipe.fit_stats(&tables).unwrap();
        let records = pipe.score_entries(&entries, &stats).unwrap();
        assert_eq!(records.len(), entries.len() * 10);
        let evals_first = pipe.eval_count();
        assert!(evals_first > 0);

        // Warm cache: a fresh pipeline performs zero evaluations.
        let pipe2 = Pipeline::new(&den, &sched, &grid, opts, Some(&cache_root), &train).unwrap();
        let tables2 = pipe2.validation_tables(&validation).unwrap();
        let stats2 = pipe2.fit_stats(&tables2).unwrap();
        let records2 = pipe2.score_entries(&entries, &stats2).unwrap();
        assert_eq!(pipe2.eval_count(), 0);
        for (a, b) in records.iter().zip(&records2) {
            assert_eq!(a, b);
        }

        // A different lambda changes the content key, so nothing is reused.
        let opts3 = PipelineOptions { lambda: 0.5, seed: 11, ..Default::default() };
        let pipe3 = Pipeline::new(&den, &sched, &grid, opts3, Some(&cache_root), &train).unwrap();
        let _ = pipe3.validation_tables(&validation[..2]).unwrap();
        assert!(pipe3.eval_count() > 0);
    }

    #[test]
    fn score_csv_round_trip_with_key() {
        let rec = ScoreRecord {
            image_id: "d4-i00001-p18".to_string(),
            is_ood: false,
            digit: 4,
            n_proj: 18,
            kind_tag: "sinogram_c".to_string(),
            w: 0.5,
            errors: vec![0.1, 0.2],
            score: 1.25,
        };
        let dir = std::env::temp_dir().join(format!("sinodiff-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("scores.csv");
        write_score_csv(&path, &[rec.clone()], &[150, 220], 0xdeadbeef).unwrap();
        let (records, key) = read_score_csv(&path, 2).unwrap();
        assert_eq!(key, 0xdeadbeef);
        assert_eq!(records, vec![rec]);
    }

    #[test]
    fn ct_subset_is_balanced() {
        let pool = toy_pool();
        let plan = ExperimentPlan::new(4, SparsityCase::High, 6, 3).unwrap();
        let entries = build_test_set(&plan, &pool).unwrap();
        let subset = select_ct_subset(&entries, 3);
        // 3 ID + 3 OOD per projection count.
        assert_eq!(subset.len(), 18);
        for n_proj in [6, 5, 4] {
            let cell: Vec<_> = subset.iter().filter(|e| e.n_proj == n_proj).collect();
            assert_eq!(cell.iter().filter(|e| !e.is_ood).count(), 3);
            let ood: Vec<u8> = cell.iter().filter(|e| e.is_ood).map(|e| e.digit).collect();
            assert_eq!(ood.len(), 3);
            // One from each OOD digit.
            let mut sorted = ood.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 3);
        }
    }
}
