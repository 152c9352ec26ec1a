//! Test-set construction, ROC/AUC with bootstrap confidence intervals, SSIM and report
//! emission.

use crate::data::LabeledImageSet;
use crate::error::{CoreError, Result};
use crate::image::Image;
use crate::rng;
use crate::tomography::{forward_project, Measurements, ProjectionGeometry, SubsamplingMask};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Sparsity regime of a test set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SparsityCase {
    Moderate,
    High,
}

impl SparsityCase {
    pub fn projection_counts(&self) -> [usize; 3] {
        match self {
            SparsityCase::Moderate => [18, 12, 9],
            SparsityCase::High => [6, 5, 4],
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            SparsityCase::Moderate => "moderate",
            SparsityCase::High => "high",
        }
    }
}

/// The in-distribution digit and its three visually confusable counterparts.
pub fn ood_digits_for(id_digit: u8) -> Result<[u8; 3]> {
    match id_digit {
        4 => Ok([6, 7, 9]),
        7 => Ok([1, 4, 9]),
        8 => Ok([3, 5, 9]),
        other => Err(CoreError::invalid(format!(
            "no OOD digit mapping for training digit {other}"
        ))),
    }
}

/// One experiment: an ID digit, its OOD digits, a sparsity case and the per-cell count.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub id_digit: u8,
    pub ood_digits: [u8; 3],
    pub sparsity: SparsityCase,
    pub per_cell: usize,
    pub seed: u64,
    /// Optional Gaussian measurement noise added to simulated projections.
    pub noise_std: f32,
    /// Full acquisition geometry the masks subsample.
    pub full_angles: usize,
}

impl ExperimentPlan {
    pub fn new(id_digit: u8, sparsity: SparsityCase, per_cell: usize, seed: u64) -> Result<Self> {
        Ok(ExperimentPlan {
            id_digit,
            ood_digits: ood_digits_for(id_digit)?,
            sparsity,
            per_cell,
            seed,
            noise_std: 0.0,
            full_angles: 180,
        })
    }
}

/// One simulated acquisition: the hidden image, its provenance and its measurements.
#[derive(Debug, Clone)]
pub struct TestEntry {
    pub id: String,
    pub image: Image,
    pub digit: u8,
    pub is_ood: bool,
    pub n_proj: usize,
    pub mask: SubsamplingMask,
    pub measurements: Measurements,
}

/// Build the labeled test set: for each projection count, `per_cell` ID images and
/// `per_cell` OOD images spread evenly over the three OOD digits, all drawn without
/// replacement from the held-out pool, with measurements simulated through the masked
/// Radon transform (plus optional noise). Deterministic under the plan seed.
pub fn build_test_set(plan: &ExperimentPlan, pool: &LabeledImageSet) -> Result<Vec<TestEntry>> {
    let geometry = ProjectionGeometry::uniform(plan.full_angles, pool.width)?;
    let mut by_digit: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &label) in pool.labels.iter().enumerate() {
        by_digit.entry(label).or_default().push(i);
    }
    // Per-digit draw cursors over a seeded shuffle keep cells disjoint.
    let mut shuffled: BTreeMap<u8, (Vec<usize>, usize)> = BTreeMap::new();
    for (digit, mut idxs) in by_digit {
        let mut r = rng::stream(plan.seed, "testset-shuffle", &[digit as u64]);
        shuffle(&mut idxs, &mut r);
        shuffled.insert(digit, (idxs, 0));
    }
    let mut take = |digit: u8, n: usize| -> Result<Vec<usize>> {
        let (idxs, cursor) = shuffled
            .get_mut(&digit)
            .ok_or_else(|| CoreError::Dataset(format!("no images of digit {digit} in pool")))?;
        if *cursor + n > idxs.len() {
            return Err(CoreError::Dataset(format!(
                "insufficient images of digit {digit}: need {n} more, have {}",
                idxs.len() - *cursor
            )));
        }
        let out = idxs[*cursor..*cursor + n].to_vec();
        *cursor += n;
        Ok(out)
    };

    let mut entries = Vec::new();
    for &n_proj in &plan.sparsity.projection_counts() {
        let mask = SubsamplingMask::uniform(n_proj, plan.full_angles)?;
        let mut cell: Vec<(usize, u8, bool)> = Vec::new();
        for idx in take(plan.id_digit, plan.per_cell)? {
            cell.push((idx, plan.id_digit, false));
        }
        // Spread the OOD cell evenly: remainder goes to the first digits.
        let base = plan.per_cell / 3;
        let rem = plan.per_cell % 3;
        for (k, &digit) in plan.ood_digits.iter().enumerate() {
            let n = base + usize::from(k < rem);
            for idx in take(digit, n)? {
                cell.push((idx, digit, true));
            }
        }
        let mut noise_rng = rng::stream(plan.seed, "testset-noise", &[n_proj as u64]);
        for (idx, digit, is_ood) in cell {
            let image = pool.image(idx);
            let mut measurements = forward_project(&image, &mask, &geometry)?;
            if plan.noise_std > 0.0 {
                for v in measurements.values.iter_mut() {
                    *v += plan.noise_std * rng::standard_normal(&mut noise_rng, 1)[0];
                }
            }
            entries.push(TestEntry {
                id: format!("d{digit}-i{idx:05}-p{n_proj}"),
                image,
                digit,
                is_ood,
                n_proj,
                mask: mask.clone(),
                measurements,
            });
        }
    }
    Ok(entries)
}

fn shuffle(order: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand_chacha::rand_core::RngCore;
    for i in (1..order.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
}

/// Area under the ROC curve, in percent, where higher scores mean more
/// out-of-distribution. Rank-based with the midrank convention for ties.
pub fn auc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(CoreError::invalid("auc needs nonempty score lists"));
    }
    let n = id_scores.len();
    let m = ood_scores.len();
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(ood_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    // Midranks over tie groups; sum ranks of the OOD population.
    let mut rank_sum_ood = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + j + 1) as f64 / 2.0; // 1-based average rank of the tie group
        for item in &all[i..j] {
            if item.1 {
                rank_sum_ood += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_ood - (m * (m + 1)) as f64 / 2.0;
    Ok(100.0 * u / (n as f64 * m as f64))
}

/// AUC point estimate with a percentile bootstrap confidence interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AucResult {
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_bootstrap: usize,
}

/// Resample both score lists with replacement `n` times and report the 2.5 and 97.5
/// percentiles of the recomputed AUC.
pub fn bootstrap_ci(id_scores: &[f64], ood_scores: &[f64], n: usize, seed: u64) -> Result<AucResult> {
    use rand_chacha::rand_core::RngCore;
    let point = auc(id_scores, ood_scores)?;
    let mut rng = rng::stream(seed, "bootstrap", &[]);
    let mut samples = Vec::with_capacity(n);
    let mut id_buf = vec![0.0; id_scores.len()];
    let mut ood_buf = vec![0.0; ood_scores.len()];
    for _ in 0..n {
        for v in id_buf.iter_mut() {
            *v = id_scores[(rng.next_u64() % id_scores.len() as u64) as usize];
        }
        for v in ood_buf.iter_mut() {
            *v = ood_scores[(rng.next_u64() % ood_scores.len() as u64) as usize];
        }
        samples.push(auc(&id_buf, &ood_buf)?);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pick = |q: f64| -> f64 {
        let pos = q * (samples.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        samples[lo] * (1.0 - frac) + samples[hi] * frac
    };
    Ok(AucResult { auc: point, ci_low: pick(0.025), ci_high: pick(0.975), n_bootstrap: n })
}

/// ROC curve points (false positive rate, true positive rate) sweeping the threshold,
/// for external plotting.
pub fn roc_points(id_scores: &[f64], ood_scores: &[f64]) -> Vec<(f64, f64)> {
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(ood_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let (n, m) = (id_scores.len() as f64, ood_scores.len() as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / n, tp as f64 / m));
        i = j;
    }
    points
}

const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 1.0;

fn gaussian_kernel() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            k[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Structural similarity index with a 7x7 Gaussian window (sigma 1.5) and stability
/// constants from dynamic range 1.0, averaged over all fully-interior windows.
pub fn ssim(x: &Image, x_hat: &Image) -> Result<f64> {
    if x.width != x_hat.width || x.height != x_hat.height {
        return Err(CoreError::dim("ssim shape mismatch".to_string()));
    }
    if x.width < SSIM_WINDOW || x.height < SSIM_WINDOW {
        return Err(CoreError::invalid("image smaller than ssim window"));
    }
    let kernel = gaussian_kernel();
    let c1 = (SSIM_K1 * SSIM_L).powi(2);
    let c2 = (SSIM_K2 * SSIM_L).powi(2);
    let (w, h) = (x.width, x.height);
    let half = SSIM_WINDOW / 2;
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for cy in half..h - half {
        for cx in half..w - half {
            let (mut ma, mut mb) = (0.0f64, 0.0f64);
            let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let kw = kernel[ky * SSIM_WINDOW + kx];
                    let a = x.get(cy + ky - half, cx + kx - half) as f64;
                    let b = x_hat.get(cy + ky - half, cx + kx - half) as f64;
                    ma += kw * a;
                    mb += kw * b;
                    va += kw * a * a;
                    vb += kw * b * b;
                    cov += kw * a * b;
                }
            }
            va -= ma * ma;
            vb -= mb * mb;
            cov -= ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            acc += s;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// One AUC table cell: scheme row, OOD-digit column.
#[derive(Debug, Clone)]
pub struct ReportCell {
    pub kind_tag: String,
    pub ood_digit: u8,
    pub result: AucResult,
}

/// Write the report directory for one (ID digit, sparsity case):
/// `auc_table.csv`, per-cell ROC point lists under `roc/`, and an aligned-text summary.
/// Regeneration from the same inputs is byte-identical.
pub fn emit_report(
    dir: &Path,
    id_digit: u8,
    case: SparsityCase,
    cells: &[ReportCell],
    roc: &BTreeMap<(String, u8), Vec<(f64, f64)>>,
) -> Result<()> {
    let base = dir.join(format!("{id_digit}")).join(case.tag());
    std::fs::create_dir_all(base.join("roc"))?;

    let mut kinds: Vec<String> = cells.iter().map(|c| c.kind_tag.clone()).collect();
    kinds.sort();
    kinds.dedup();
    let mut digits: Vec<u8> = cells.iter().map(|c| c.ood_digit).collect();
    digits.sort();
    digits.dedup();

    let cell = |kind: &str, digit: u8| -> Option<&ReportCell> {
        cells.iter().find(|c| c.kind_tag == kind && c.ood_digit == digit)
    };

    let mut csv = String::from("scheme");
    for d in &digits {
        csv.push_str(&format!(",auc_vs_{d},ci_low_vs_{d},ci_high_vs_{d}"));
    }
    csv.push('\n');
    let mut txt = format!("ID digit {id_digit}, {} sparsity\n\n", case.tag());
    txt.push_str(&format!("{:<22}", "scheme"));
    for d in &digits {
        txt.push_str(&format!("{:>24}", format!("vs MNIST{d}")));
    }
    txt.push('\n');

    let mut missing = Vec::new();
    for kind in &kinds {
        csv.push_str(kind);
        txt.push_str(&format!("{kind:<22}"));
        for &d in &digits {
            match cell(kind, d) {
                Some(c) => {
                    csv.push_str(&format!(
                        ",{:.2},{:.2},{:.2}",
                        c.result.auc, c.result.ci_low, c.result.ci_high
                    ));
                    txt.push_str(&format!(
                        "{:>24}",
                        format!("{:.2} [{:.1}, {:.1}]", c.result.auc, c.result.ci_low, c.result.ci_high)
                    ));
                }
                None => missing.push(format!("{kind} vs {d}")),
            }
        }
        csv.push('\n');
        txt.push('\n');
    }
    if !missing.is_empty() {
        return Err(CoreError::Missing(format!("report cells missing: {}", missing.join(", "))));
    }

    std::fs::write(base.join("auc_table.csv"), csv)?;
    let mut f = std::fs::File::create(base.join("summary.txt"))?;
    f.write_all(txt.as_bytes())?;

    for ((kind, digit), points) in roc {
        let mut s = String::from("fpr,tpr\n");
        for (fpr, tpr) in points {
            s.push_str(&format!("{fpr:.6},{tpr:.6}\n"));
        }
        std::fs::write(base.join("roc").join(format!("{kind}_{digit}.csv")), s)?;
    }
    Ok(())
}
