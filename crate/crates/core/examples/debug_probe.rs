// temporary debug probe
use sinodiff_core::data::{load_test, load_train, make_splits};
use sinodiff_core::denoiser::load_checkpoint;
use sinodiff_core::image::{write_pgm, Image};
use sinodiff_core::pipeline::{Pipeline, PipelineOptions};
use sinodiff_core::samplers::StepGrid;
use sinodiff_core::scoring::{recon_error, ErrorDomain};
use sinodiff_core::tomography::{embed, forward_project, ProjectionGeometry, SubsamplingMask};
use std::path::Path;

fn main() {
    let ckpt = load_checkpoint(Path::new("target/acceptance/m4/checkpoint.tdnz")).unwrap();
    let denoiser = ckpt.denoiser();
    let sched = ckpt.sched.build().unwrap();
    let grid = StepGrid::default();
    let opts = PipelineOptions { seed: 42, ..Default::default() };
    let dir = Path::new("data/mnist");
    let train_set = load_train(dir).unwrap();
    let splits = make_splits(&train_set, 4, 100, 42).unwrap();
    let test_pool = load_test(dir).unwrap();
    let pipe = Pipeline::new(&denoiser, &sched, &grid, opts, None, &splits.train).unwrap();

    let geometry = ProjectionGeometry::uniform(180, 28).unwrap();
    let mask = SubsamplingMask::uniform(18, 180).unwrap();

    let show = |img: &Image, label: &str| {
        println!("--- {label}");
        for y in (0..28).step_by(2) {
            let mut line = String::new();
            for x in 0..28 {
                let v = img.get(y, x);
                line.push(if v > 0.75 { '#' } else if v > 0.5 { '+' } else if v > 0.25 { '.' } else { ' ' });
            }
            println!("{line}");
        }
    };

    for (digit, idx) in [(4u8, 0usize), (6u8, 0)] {
        let img = &test_pool.images_of_digit(digit)[idx];
        let y = forward_project(img, &mask, &geometry).unwrap();
        let entry = format!("dbg-d{digit}");
        let (uncond, cond) = pipe.reconstruct_entry(&entry, &y, &mask).unwrap();
        show(img, &format!("digit {digit} ground truth"));
        let fbp_in = pipe.plan().fbp(&embed(&y, &mask, &geometry).unwrap()).unwrap();
        show(&fbp_in, &format!("digit {digit} fbp input (18 proj)"));
        show(&cond[0].1, &format!("digit {digit} cond t0=150"));
        show(&cond[6].1, &format!("digit {digit} cond t0=570"));
        show(&cond[11].1, &format!("digit {digit} cond t0=920"));
        show(&uncond[6].1, &format!("digit {digit} uncond t0=570"));
        print!("sinogram_c errors per t0:");
        for (t0, rec) in &cond {
            let e = recon_error(ErrorDomain::Sinogram, &y, &mask, pipe.plan(), rec).unwrap();
            print!(" {t0}:{e:.5}");
        }
        println!();
        write_pgm(Path::new(&format!("/tmp/dbg_{digit}_cond570.pgm")), &cond[6].1).unwrap();
    }
}
