// temporary probe: small-cell AUC sanity check on the trained digit-4 model
use sinodiff_core::data::{load_test, load_train, make_splits};
use sinodiff_core::denoiser::load_checkpoint;
use sinodiff_core::evaluation::{auc, build_test_set, ExperimentPlan, SparsityCase};
use sinodiff_core::pipeline::{Pipeline, PipelineOptions};
use sinodiff_core::samplers::StepGrid;
use std::path::Path;

fn main() {
    let t_start = std::time::Instant::now();
    let ckpt = load_checkpoint(Path::new("target/acceptance/m4/checkpoint.tdnz")).unwrap();
    let denoiser = ckpt.denoiser();
    let sched = ckpt.sched.build().unwrap();
    let grid = StepGrid::default();
    let opts = PipelineOptions { seed: 42, ..Default::default() };

    let dir = Path::new("data/mnist");
    let train_set = load_train(dir).unwrap();
    let splits = make_splits(&train_set, 4, 100, 42).unwrap();
    let test_pool = load_test(dir).unwrap();
    let cache_root = Path::new("target/acceptance/cache/m4");
    let pipe = Pipeline::new(&denoiser, &sched, &grid, opts, Some(cache_root), &splits.train).unwrap();

    let val: Vec<_> = splits.validation[..16].to_vec();
    eprintln!("[probe] validation x{} ...", val.len());
    let tables = pipe.validation_tables(&val).unwrap();
    let stats = pipe.fit_stats(&tables).unwrap();
    eprintln!("[probe] validation done at {:.0}s", t_start.elapsed().as_secs_f64());

    let plan = ExperimentPlan::new(4, SparsityCase::Moderate, 12, 42).unwrap();
    let entries = build_test_set(&plan, &test_pool).unwrap();
    eprintln!("[probe] scoring {} entries ...", entries.len());
    let records = pipe.score_entries(&entries, &stats).unwrap();
    eprintln!("[probe] scoring done at {:.0}s ({} evals)", t_start.elapsed().as_secs_f64(), pipe.eval_count());

    for kind in ["sinogram_c", "sinogram_u", "fbp_c", "fbp_u", "image_c", "image_u", "fbp_weighted", "sinogram_weighted"] {
        let id: Vec<f64> = records.iter().filter(|r| r.kind_tag == kind && !r.is_ood).map(|r| r.score).collect();
        for d in [6u8, 7, 9] {
            let ood: Vec<f64> = records
                .iter()
                .filter(|r| r.kind_tag == kind && r.is_ood && r.digit == d)
                .map(|r| r.score)
                .collect();
            print!("  {kind} vs {d}: {:.1}", auc(&id, &ood).unwrap());
        }
        println!();
    }
}
