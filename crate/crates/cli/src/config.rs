//! Run configuration: one TOML file covering every stage. Unknown keys are rejected so
//! typos fail loudly instead of silently falling back to defaults.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sinodiff_core::denoiser::TrainerConfig;
use sinodiff_core::evaluation::SparsityCase;
use sinodiff_core::nn::unet::UnetConfig;
use sinodiff_core::pipeline::PipelineOptions;
use sinodiff_core::samplers::{content_key, SamplerKind, StepGrid};
use sinodiff_core::scoring::WeightedStatsPolicy;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { steps: 1000, beta_min: 0.0015, beta_max: 0.0195 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub base_channels: usize,
    pub time_embed_dim: usize,
    pub groups_cap: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { base_channels: 32, time_embed_dim: 128, groups_cap: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub ema_decay: Option<f32>,
    pub chunk_size: usize,
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            epochs: 30,
            batch_size: 128,
            learning_rate: 2e-4,
            ema_decay: Some(0.999),
            chunk_size: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub spacing: usize,
    pub t_max: usize,
    /// Empty list means the default twelve start steps 150, 220, ..., 920.
    pub t0_set: Vec<usize>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { spacing: 10, t_max: 1000, t0_set: Vec::new() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditioningSection {
    pub lambda: f32,
    pub mcg_step_size: f32,
    pub mcg_in_multiscale: bool,
    pub noise_std: f32,
    /// "plms" or "ddim".
    pub sampler: String,
}

impl Default for ConditioningSection {
    fn default() -> Self {
        ConditioningSection {
            lambda: 1.0,
            mcg_step_size: 1.0,
            mcg_in_multiscale: false,
            noise_std: 0.0,
            sampler: "plms".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringSection {
    pub w_scale: f64,
    /// "per_image_w" or "conditional_only".
    pub weighted_stats: String,
    pub validation_size: usize,
}

impl Default for ScoringSection {
    fn default() -> Self {
        ScoringSection { w_scale: 1.0, weighted_stats: "per_image_w".to_string(), validation_size: 200 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    /// "moderate", "high", or "both".
    pub sparsity: String,
    pub per_cell: usize,
    pub full_angles: usize,
    /// CT reconstructions per cell for the SSIM summary; 0 disables the (costly) stage.
    pub ct_per_cell: usize,
}

impl Default for PlanSection {
    fn default() -> Self {
        PlanSection { sparsity: "both".to_string(), per_cell: 200, full_angles: 180, ct_per_cell: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Dataset directory holding the IDX files; the SINODIFF_DATA_DIR environment
    /// variable overrides it.
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub id_digit: u8,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub trainer: TrainerSection,
    pub grid: GridSection,
    pub conditioning: ConditioningSection,
    pub scoring: ScoringSection,
    pub plan: PlanSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            id_digit: 4,
            schedule: Default::default(),
            model: Default::default(),
            trainer: Default::default(),
            grid: Default::default(),
            conditioning: Default::default(),
            scoring: Default::default(),
            plan: Default::default(),
            paths: Default::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&body).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conditioning.lambda) {
            bail!("conditioning.lambda must lie in [0, 1]");
        }
        if self.sampler_kind().is_err() || self.stats_policy().is_err() || self.sparsity_cases().is_err() {
            self.sampler_kind()?;
            self.stats_policy()?;
            self.sparsity_cases()?;
        }
        if self.scoring.validation_size < 2 {
            bail!("scoring.validation_size must be at least 2");
        }
        Ok(())
    }

    /// Stable hash of the full configuration, embedded in artifacts to refuse stale
    /// reuse.
    pub fn config_hash(&self) -> u64 {
        let canonical = toml::to_string(self).expect("config serializes");
        let parts: Vec<u64> = canonical.bytes().map(|b| b as u64).collect();
        content_key(&parts)
    }

    pub fn unet_config(&self) -> UnetConfig {
        UnetConfig {
            in_channels: 1,
            base_channels: self.model.base_channels,
            time_embed_dim: self.model.time_embed_dim,
            groups_cap: self.model.groups_cap,
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            epochs: self.trainer.epochs,
            batch_size: self.trainer.batch_size,
            learning_rate: self.trainer.learning_rate,
            seed: self.seed,
            ema_decay: self.trainer.ema_decay,
            chunk_size: self.trainer.chunk_size,
        }
    }

    pub fn step_grid(&self) -> Result<StepGrid> {
        let t0s = if self.grid.t0_set.is_empty() {
            if self.grid.t_max == 1000 && self.grid.spacing == 10 {
                return Ok(StepGrid::default());
            }
            bail!("grid.t0_set must be given explicitly for a nondefault grid");
        } else {
            self.grid.t0_set.clone()
        };
        Ok(StepGrid::new(self.grid.t_max, self.grid.spacing, t0s)?)
    }

    pub fn sampler_kind(&self) -> Result<SamplerKind> {
        match self.conditioning.sampler.as_str() {
            "plms" => Ok(SamplerKind::Plms),
            "ddim" => Ok(SamplerKind::Ddim),
            other => bail!("unknown sampler {other:?} (expected \"plms\" or \"ddim\")"),
        }
    }

    pub fn stats_policy(&self) -> Result<WeightedStatsPolicy> {
        match self.scoring.weighted_stats.as_str() {
            "per_image_w" => Ok(WeightedStatsPolicy::PerImageWeight),
            "conditional_only" => Ok(WeightedStatsPolicy::ConditionalOnly),
            other => bail!("unknown weighted_stats policy {other:?}"),
        }
    }

    pub fn sparsity_cases(&self) -> Result<Vec<SparsityCase>> {
        match self.plan.sparsity.as_str() {
            "moderate" => Ok(vec![SparsityCase::Moderate]),
            "high" => Ok(vec![SparsityCase::High]),
            "both" => Ok(vec![SparsityCase::Moderate, SparsityCase::High]),
            other => bail!("unknown sparsity case {other:?}"),
        }
    }

    pub fn pipeline_options(&self) -> Result<PipelineOptions> {
        Ok(PipelineOptions {
            lambda: self.conditioning.lambda,
            mcg_step_size: self.conditioning.mcg_step_size,
            mcg_in_multiscale: self.conditioning.mcg_in_multiscale,
            sampler: self.sampler_kind()?,
            w_scale: self.scoring.w_scale,
            stats_policy: self.stats_policy()?,
            seed: self.seed,
            full_angles: self.plan.full_angles,
        })
    }

    /// Dataset root: environment variable first, then the config, then `data/mnist`.
    pub fn data_dir(&self) -> PathBuf {
        if let Ok(v) = std::env::var("SINODIFF_DATA_DIR") {
            return PathBuf::from(v);
        }
        self.paths.data_dir.clone().unwrap_or_else(|| PathBuf::from("data/mnist"))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from(format!("runs/mnist{}", self.id_digit)))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.paths.cache_dir.clone().unwrap_or_else(|| self.out_dir().join("cache"))
    }
}
