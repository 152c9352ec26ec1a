//! Reconstruction-error computation across comparison domains, validation statistics,
//! Z-score aggregation and the conditional/unconditional weighting scheme.
//!
//! Errors compare the measurements against a reconstruction in one of three domains:
//! directly against the filtered backprojection of the measurements (image domain),
//! between sparse sinograms (projection domain), or between filtered backprojections of
//! sparse sinograms. Per-image errors at each reconstruction start step are turned into
//! Z-scores against full-view in-distribution validation statistics and averaged.

use crate::error::{CoreError, Result};
use crate::image::{mean_sq_diff, Image};
use crate::samplers::ReconMode;
use crate::tomography::{fbp_sparse, subsample, Measurements, RadonPlan, SubsamplingMask};
use std::collections::BTreeMap;

/// Comparison domain for the reconstruction error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ErrorDomain {
    /// `d(fbp(embed(y)), x_hat)`.
    ImageVsFbpInput,
    /// `d(y, A x_hat)`.
    Sinogram,
    /// `d(fbp(embed(y)), fbp(embed(A x_hat)))`.
    FbpOfSinogram,
}

impl ErrorDomain {
    pub const ALL: [ErrorDomain; 3] =
        [ErrorDomain::ImageVsFbpInput, ErrorDomain::Sinogram, ErrorDomain::FbpOfSinogram];

    pub fn tag(&self) -> &'static str {
        match self {
            ErrorDomain::ImageVsFbpInput => "image",
            ErrorDomain::Sinogram => "sinogram",
            ErrorDomain::FbpOfSinogram => "fbp",
        }
    }
}

/// One of the six comparison schemes: a domain crossed with the reconstruction mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ErrorScheme {
    pub domain: ErrorDomain,
    pub mode: ReconMode,
}

impl ErrorScheme {
    pub fn all() -> Vec<ErrorScheme> {
        let mut v = Vec::with_capacity(6);
        for domain in ErrorDomain::ALL {
            for mode in [ReconMode::Unconditional, ReconMode::Conditional] {
                v.push(ErrorScheme { domain, mode });
            }
        }
        v
    }

    pub fn tag(&self) -> String {
        format!("{}_{}", self.domain.tag(), self.mode.tag())
    }
}

/// Mean-squared reconstruction error in the selected domain. Reconstructions are clamped
/// to `[0, 1]` before forward projection so sinograms stay nonnegative; the image-domain
/// comparison uses the reconstruction as produced. Image-domain references use the
/// sparse-view filtered backprojection (observed rows weighted by their own angular
/// spacing), matching the reconstruction inputs.
pub fn recon_error(
    domain: ErrorDomain,
    y: &Measurements,
    mask: &SubsamplingMask,
    plan: &RadonPlan,
    x_hat: &Image,
) -> Result<f64> {
    if y.num_kept != mask.len() {
        return Err(CoreError::dim("measurements do not match mask".to_string()));
    }
    match domain {
        ErrorDomain::ImageVsFbpInput => {
            let reference = fbp_sparse(y, mask, plan)?;
            if reference.width != x_hat.width || reference.height != x_hat.height {
                return Err(CoreError::dim("reconstruction shape mismatch".to_string()));
            }
            Ok(mean_sq_diff(&reference.pixels, &x_hat.pixels))
        }
        ErrorDomain::Sinogram => {
            let ax = subsample(&plan.apply(&x_hat.clamped(0.0, 1.0))?, mask)?;
            Ok(mean_sq_diff(&y.values, &ax.values))
        }
        ErrorDomain::FbpOfSinogram => {
            let reference = fbp_sparse(y, mask, plan)?;
            let ax = subsample(&plan.apply(&x_hat.clamped(0.0, 1.0))?, mask)?;
            let back = fbp_sparse(&ax, mask, plan)?;
            Ok(mean_sq_diff(&reference.pixels, &back.pixels))
        }
    }
}

/// Per-image error table: one error per scheme and reconstruction start step, plus the
/// measurement-distance weight of this image.
#[derive(Debug, Clone)]
pub struct ImageErrors {
    pub t0s: Vec<usize>,
    /// Keyed by scheme, aligned with `t0s`.
    pub errors: BTreeMap<ErrorScheme, Vec<f64>>,
    pub w: f64,
}

/// Compute the full six-scheme error table for one image from its multi-scale
/// reconstructions (unconditional and conditional, aligned on the same `t0` list).
pub fn image_errors(
    y: &Measurements,
    mask: &SubsamplingMask,
    plan: &RadonPlan,
    recons_u: &[(usize, Image)],
    recons_c: &[(usize, Image)],
    w: f64,
) -> Result<ImageErrors> {
    let t0s: Vec<usize> = recons_u.iter().map(|(t0, _)| *t0).collect();
    let t0s_c: Vec<usize> = recons_c.iter().map(|(t0, _)| *t0).collect();
    if t0s != t0s_c {
        return Err(CoreError::dim("conditional/unconditional t0 sets differ".to_string()));
    }
    let mut errors = BTreeMap::new();
    for scheme in ErrorScheme::all() {
        let recons = match scheme.mode {
            ReconMode::Unconditional => recons_u,
            ReconMode::Conditional => recons_c,
        };
        let per_t0: Result<Vec<f64>> = recons
            .iter()
            .map(|(_, img)| recon_error(scheme.domain, y, mask, plan, img))
            .collect();
        errors.insert(scheme, per_t0?);
    }
    Ok(ImageErrors { t0s, errors, w })
}

/// Statistic cell identifier: a base scheme, or a weighted conditional/unconditional
/// combination in one of the two comparison domains the weighting applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StatKind {
    Scheme(ErrorScheme),
    /// `(1 - w) d_c + w d_u`; `averaging` pins `w = 0.5`.
    Weighted { gamma: ErrorDomain, averaging: bool },
}

impl StatKind {
    pub fn tag(&self) -> String {
        match self {
            StatKind::Scheme(s) => s.tag(),
            StatKind::Weighted { gamma, averaging } => {
                let kind = if *averaging { "averaged" } else { "weighted" };
                format!("{}_{kind}", gamma.tag())
            }
        }
    }

    /// The weighted variants combine errors in the projection domain or after mapping
    /// both sides to the image domain.
    pub fn weighted_kinds() -> [StatKind; 4] {
        [
            StatKind::Weighted { gamma: ErrorDomain::Sinogram, averaging: false },
            StatKind::Weighted { gamma: ErrorDomain::FbpOfSinogram, averaging: false },
            StatKind::Weighted { gamma: ErrorDomain::Sinogram, averaging: true },
            StatKind::Weighted { gamma: ErrorDomain::FbpOfSinogram, averaging: true },
        ]
    }
}

/// Per-(cell, t0) mean and standard deviation of validation reconstruction errors.
#[derive(Debug, Clone)]
pub struct ValidationStats {
    pub t0s: Vec<usize>,
    pub cells: BTreeMap<StatKind, Vec<(f64, f64)>>,
}

/// How the weighted-combination validation statistics are fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightedStatsPolicy {
    /// Combine each validation image's errors with its own measurement-distance weight.
    PerImageWeight,
    /// Fit on conditional errors only (`w = 0`).
    ConditionalOnly,
}

/// Combine conditional and unconditional per-`t0` errors with weight `w` on the
/// unconditional side.
pub fn combine_errors(cond: &[f64], uncond: &[f64], w: f64) -> Vec<f64> {
    cond.iter().zip(uncond).map(|(c, u)| (1.0 - w) * c + w * u).collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregate validation error tables into per-(cell, t0) statistics. Requires at least
/// two images; degenerate (zero-spread) cells are rejected.
pub fn fit_validation_stats(tables: &[ImageErrors], policy: WeightedStatsPolicy) -> Result<ValidationStats> {
    if tables.len() < 2 {
        return Err(CoreError::invalid("validation statistics need at least 2 images"));
    }
    let t0s = tables[0].t0s.clone();
    for t in tables {
        if t.t0s != t0s {
            return Err(CoreError::dim("validation tables disagree on t0 set".to_string()));
        }
    }
    let mut cells = BTreeMap::new();
    for scheme in ErrorScheme::all() {
        let mut per_t0 = Vec::with_capacity(t0s.len());
        for (i, t0) in t0s.iter().enumerate() {
            let vals: Vec<f64> = tables.iter().map(|t| t.errors[&scheme][i]).collect();
            let (mean, std) = mean_std(&vals);
            if !std.is_finite() || std <= 0.0 {
                return Err(CoreError::DegenerateStats(format!(
                    "zero spread in validation errors for {} at t0 = {t0}",
                    scheme.tag()
                )));
            }
            per_t0.push((mean, std));
        }
        cells.insert(StatKind::Scheme(scheme), per_t0);
    }
    for kind in StatKind::weighted_kinds() {
        let StatKind::Weighted { gamma, averaging } = kind else { unreachable!() };
        let cond_scheme = ErrorScheme { domain: gamma, mode: ReconMode::Conditional };
        let uncond_scheme = ErrorScheme { domain: gamma, mode: ReconMode::Unconditional };
        let mut per_t0 = Vec::with_capacity(t0s.len());
        for (i, t0) in t0s.iter().enumerate() {
            let vals: Vec<f64> = tables
                .iter()
                .map(|t| {
                    let w = if averaging {
                        0.5
                    } else {
                        match policy {
                            WeightedStatsPolicy::PerImageWeight => t.w,
                            WeightedStatsPolicy::ConditionalOnly => 0.0,
                        }
                    };
                    (1.0 - w) * t.errors[&cond_scheme][i] + w * t.errors[&uncond_scheme][i]
                })
                .collect();
            let (mean, std) = mean_std(&vals);
            if !std.is_finite() || std <= 0.0 {
                return Err(CoreError::DegenerateStats(format!(
                    "zero spread in weighted validation errors ({}) at t0 = {t0}",
                    kind.tag()
                )));
            }
            per_t0.push((mean, std));
        }
        cells.insert(kind, per_t0);
    }
    Ok(ValidationStats { t0s, cells })
}

/// Multi-scale score: the mean across start steps of the per-step Z-score of the error
/// against the validation statistics of the given cell.
pub fn multi_scale_score(errors: &[f64], stats: &ValidationStats, kind: StatKind) -> Result<f64> {
    let cell = stats
        .cells
        .get(&kind)
        .ok_or_else(|| CoreError::Missing(format!("no validation stats for {}", kind.tag())))?;
    if errors.len() != cell.len() {
        return Err(CoreError::dim(format!(
            "error vector has {} entries, stats expect {}",
            errors.len(),
            cell.len()
        )));
    }
    let mut acc = 0.0f64;
    for (e, (mean, std)) in errors.iter().zip(cell) {
        acc += (e - mean) / std;
    }
    Ok(acc / errors.len() as f64)
}

/// Forward projection of the pixel-wise mean of the training set.
pub fn training_mean_projection(
    train_images: &[Image],
    mask: &SubsamplingMask,
    plan: &RadonPlan,
) -> Result<Measurements> {
    let mean = training_mean_image(train_images)?;
    subsample(&plan.apply(&mean)?, mask)
}

/// Pixel-wise mean image of a set.
pub fn training_mean_image(train_images: &[Image]) -> Result<Image> {
    if train_images.is_empty() {
        return Err(CoreError::Dataset("empty training set".to_string()));
    }
    let (w, h) = (train_images[0].width, train_images[0].height);
    let mut acc = vec![0.0f64; w * h];
    for img in train_images {
        if img.width != w || img.height != h {
            return Err(CoreError::dim("mixed image sizes".to_string()));
        }
        for (a, v) in acc.iter_mut().zip(&img.pixels) {
            *a += *v as f64;
        }
    }
    let n = train_images.len() as f64;
    Image::from_pixels(w, h, acc.into_iter().map(|v| (v / n) as f32).collect())
}

/// Normalized squared distance between the measurements and the forward-projected
/// training mean: `w = |y - A mu|^2 / (|y|^2 + |A mu|^2)`, in `[0, 1]` for nonnegative
/// inputs.
pub fn compute_weight(y: &Measurements, a_mu: &Measurements) -> Result<f64> {
    if y.values.len() != a_mu.values.len() {
        return Err(CoreError::dim("weight inputs differ in shape".to_string()));
    }
    let mut num = 0.0f64;
    let mut ny = 0.0f64;
    let mut nm = 0.0f64;
    for (a, b) in y.values.iter().zip(&a_mu.values) {
        let (a, b) = (*a as f64, *b as f64);
        num += (a - b) * (a - b);
        ny += a * a;
        nm += b * b;
    }
    if ny + nm == 0.0 {
        return Err(CoreError::invalid("weight undefined for two zero inputs"));
    }
    Ok(num / (ny + nm))
}

/// Weighted multi-scale score: per start step, combine the conditional and unconditional
/// errors (computed under the chosen comparison domain) with weight `w` on the
/// unconditional side, then Z-score against the matching weighted validation cell.
pub fn weighted_score(
    cond_errors: &[f64],
    uncond_errors: &[f64],
    stats: &ValidationStats,
    w: f64,
    gamma: ErrorDomain,
    averaging: bool,
) -> Result<f64> {
    if cond_errors.len() != uncond_errors.len() {
        return Err(CoreError::dim("misaligned error vectors".to_string()));
    }
    let combined = combine_errors(cond_errors, uncond_errors, w);
    multi_scale_score(&combined, stats, StatKind::Weighted { gamma, averaging })
}

/// One scored image: identity, per-`t0` errors and the aggregated score for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub image_id: String,
    /// True provenance label, used only by evaluation.
    pub is_ood: bool,
    pub digit: u8,
    pub n_proj: usize,
    pub kind_tag: String,
    pub w: f64,
    pub errors: Vec<f64>,
    pub score: f64,
}

/// CSV header for score tables; `e<t0>` columns follow the grid's start-step set.
pub fn score_csv_header(t0s: &[usize]) -> String {
    let mut s = String::from("image_id,label,digit,n_proj,scheme,w");
    for t0 in t0s {
        s.push_str(&format!(",e{t0}"));
    }
    s.push_str(",score");
    s
}

pub fn score_csv_row(r: &ScoreRecord) -> String {
    let mut s = format!(
        "{},{},{},{},{},{:.9e}",
        r.image_id,
        if r.is_ood { "ood" } else { "id" },
        r.digit,
        r.n_proj,
        r.kind_tag,
        r.w
    );
    for e in &r.errors {
        s.push_str(&format!(",{e:.9e}"));
    }
    s.push_str(&format!(",{:.9e}", r.score));
    s
}

/// Parse one data row written by [`score_csv_row`].
pub fn parse_score_row(line: &str, n_t0: usize) -> Result<ScoreRecord> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 6 + n_t0 + 1 {
        return Err(CoreError::Dataset(format!(
            "score row has {} fields, expected {}",
            fields.len(),
            6 + n_t0 + 1
        )));
    }
    let parse = |s: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|_| CoreError::Dataset(format!("bad number {s:?}")))
    };
    Ok(ScoreRecord {
        image_id: fields[0].to_string(),
        is_ood: match fields[1] {
            "ood" => true,
            "id" => false,
            other => return Err(CoreError::Dataset(format!("bad label {other:?}"))),
        },
        digit: fields[2].parse().map_err(|_| CoreError::Dataset("bad digit".to_string()))?,
        n_proj: fields[3].parse().map_err(|_| CoreError::Dataset("bad n_proj".to_string()))?,
        kind_tag: fields[4].to_string(),
        w: parse(fields[5])?,
        errors: fields[6..6 + n_t0].iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?,
        score: parse(fields[6 + n_t0])?,
    })
}
