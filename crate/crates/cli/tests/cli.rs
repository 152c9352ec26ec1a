//! End-to-end exercise of the command-line pipeline on a tiny synthetic dataset and a
//! deliberately small model/grid, checking artifact layout, cache behaviour and error
//! surfacing.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_sinodiff")
}

fn write_idx(dir: &Path, name: &str, magic: u32, dims: &[u32], payload: &[u8]) {
    let mut bytes = magic.to_be_bytes().to_vec();
    for d in dims {
        bytes.extend_from_slice(&d.to_be_bytes());
    }
    bytes.extend_from_slice(payload);
    std::fs::write(dir.join(name), bytes).unwrap();
}

/// Blob-per-digit synthetic dataset: digit d is a Gaussian bump whose position and width
/// depend on d, plus per-image jitter, so classes are separable and errors have spread.
fn synth_digit_image(digit: u8, jitter: u64) -> Vec<u8> {
    let mut out = vec![0u8; 28 * 28];
    let cx = 6.0 + (digit as f64 % 5.0) * 4.0 + (jitter % 3) as f64;
    let cy = 6.0 + (digit as f64 / 5.0).floor() * 10.0 + (jitter / 3 % 3) as f64;
    let sigma = 2.0 + (digit as f64) * 0.2;
    for y in 0..28 {
        for x in 0..28 {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let v = (255.0 * (-d2 / (2.0 * sigma * sigma)).exp()).round();
            out[y * 28 + x] = v as u8;
        }
    }
    out
}

fn write_dataset(dir: &Path, per_digit_train: usize, per_digit_test: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let digits: Vec<u8> = vec![1, 3, 4, 5, 6, 7, 8, 9];
    let build = |per: usize| -> (Vec<u8>, Vec<u8>) {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for &d in &digits {
            for j in 0..per {
                pixels.extend(synth_digit_image(d, j as u64));
                labels.push(d);
            }
        }
        (pixels, labels)
    };
    let (train_px, train_lb) = build(per_digit_train);
    write_idx(dir, "train-images-idx3-ubyte", 0x803, &[train_lb.len() as u32, 28, 28], &train_px);
    write_idx(dir, "train-labels-idx1-ubyte", 0x801, &[train_lb.len() as u32], &train_lb);
    let (test_px, test_lb) = build(per_digit_test);
    write_idx(dir, "t10k-images-idx3-ubyte", 0x803, &[test_lb.len() as u32, 28, 28], &test_px);
    write_idx(dir, "t10k-labels-idx1-ubyte", 0x801, &[test_lb.len() as u32], &test_lb);
}

fn tiny_config(root: &Path) -> PathBuf {
    let cfg = format!(
        r#"
seed = 9
id_digit = 4

[schedule]
steps = 60

[model]
base_channels = 2
time_embed_dim = 16
groups_cap = 2

[trainer]
epochs = 1
batch_size = 16
learning_rate = 1e-3
chunk_size = 8

[grid]
spacing = 10
t_max = 60
t0_set = [20, 40]

[scoring]
validation_size = 3

[plan]
sparsity = "moderate"
per_cell = 2
full_angles = 36
ct_per_cell = 0

[paths]
data_dir = "{data}"
out_dir = "{out}"
"#,
        data = root.join("data").display(),
        out = root.join("run").display()
    );
    let path = root.join("tiny.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(bin()).args(args).output().expect("spawn sinodiff")
}

fn assert_ok(out: &std::process::Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline_on_synthetic_data() {
    let root = std::env::temp_dir().join(format!("sinodiff-cli-e2e-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    write_dataset(&root.join("data"), 24, 12);
    let cfg = tiny_config(&root);
    let cfg = cfg.to_str().unwrap();

    // Train writes a checkpoint and a loss log.
    let out = run(&["--config", cfg, "train"]);
    assert_ok(&out, "train");
    assert!(root.join("run/checkpoint.tdnz").exists());
    let log = std::fs::read_to_string(root.join("run/train_loss.csv")).unwrap();
    assert!(log.starts_with("epoch,loss"));
    assert_eq!(log.lines().count(), 2);

    // Resume continues the epoch counter.
    let out = run(&["--config", cfg, "train", "--resume"]);
    assert_ok(&out, "train --resume");
    let log = std::fs::read_to_string(root.join("run/train_loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");
    assert!(log.lines().nth(2).unwrap().starts_with("1,"), "{log}");

    // Score produces CSVs and an audit; a second run hits the cache with zero evals.
    let out = run(&["--config", cfg, "score"]);
    assert_ok(&out, "score");
    let scores_path = root.join("run/scores/mnist4_moderate.csv");
    assert!(scores_path.exists());
    let body = std::fs::read_to_string(&scores_path).unwrap();
    // 2 ID + 2 OOD per projection count, 3 counts, 10 scheme/weighting rows each.
    assert_eq!(body.lines().count(), 2 + 12 * 10, "{body}");

    let out = run(&["--config", cfg, "score"]);
    assert_ok(&out, "score (warm cache)");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("0 evaluations"), "cache not effective:\n{stdout}");

    // Evaluate renders report tables and ROC files.
    let out = run(&["--config", cfg, "evaluate"]);
    assert_ok(&out, "evaluate");
    assert!(root.join("run/reports/4/moderate/auc_table.csv").exists());
    assert!(root.join("run/reports/4/moderate/summary.txt").exists());
    assert!(root.join("run/reports/4/moderate/roc/sinogram_c_6.csv").exists());

    // Reconstruct dumps the start-step strip as PGM files.
    let out = run(&["--config", cfg, "reconstruct", "--digit", "6", "--n-proj", "5"]);
    assert_ok(&out, "reconstruct");
    for name in ["ground_truth.pgm", "input_fbp.pgm", "u_t0020.pgm", "u_t0040.pgm", "c_t0020.pgm", "c_t0040.pgm"] {
        assert!(root.join("run/strip").join(name).exists(), "{name} missing");
    }
}

#[test]
fn missing_dataset_fails_before_compute() {
    let root = std::env::temp_dir().join(format!("sinodiff-cli-nodata-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let cfg = tiny_config(&root);
    let out = run(&["--config", cfg.to_str().unwrap(), "train"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("not found"), "unhelpful error: {stderr}");
}

#[test]
fn evaluate_refuses_stale_scores() {
    let root = std::env::temp_dir().join(format!("sinodiff-cli-stale-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    write_dataset(&root.join("data"), 24, 12);
    let cfg_path = tiny_config(&root);
    let cfg = cfg_path.to_str().unwrap();
    assert_ok(&run(&["--config", cfg, "train"]), "train");
    assert_ok(&run(&["--config", cfg, "score"]), "score");

    // Change the configuration (different seed): evaluate must refuse the old tables.
    let out = run(&["--config", cfg, "--seed", "1234", "evaluate"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("stale"), "{stderr}");
}
