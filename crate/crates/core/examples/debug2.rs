// temporary: isolate sampler behavior on clean full-view input
use sinodiff_core::data::load_test;
use sinodiff_core::denoiser::load_checkpoint;
use sinodiff_core::image::Image;
use sinodiff_core::samplers::{ReconEngine, SamplerKind, StepGrid};
use std::path::Path;

fn show(img: &Image, label: &str) {
    println!("--- {label} (min {:.2} max {:.2})",
        img.pixels.iter().cloned().fold(f32::INFINITY, f32::min),
        img.pixels.iter().cloned().fold(f32::NEG_INFINITY, f32::max));
    for y in (0..28).step_by(2) {
        let mut line = String::new();
        for x in 0..28 {
            let v = img.get(y, x);
            line.push(if v > 0.75 { '#' } else if v > 0.5 { '+' } else if v > 0.25 { '.' } else { ' ' });
        }
        println!("{line}");
    }
}

fn main() {
    let ckpt = load_checkpoint(Path::new("target/acceptance/m4/checkpoint.tdnz")).unwrap();
    let den = ckpt.denoiser();
    let sched = ckpt.sched.build().unwrap();
    let grid = StepGrid::default();
    let pool = load_test(Path::new("data/mnist")).unwrap();
    let img = &pool.images_of_digit(4)[0];
    show(img, "clean digit 4");

    for kind in [SamplerKind::Plms, SamplerKind::Ddim] {
        let mut engine = ReconEngine::new(&den, &sched, &grid);
        engine.sampler = kind;
        for t0 in [150usize, 570, 920] {
            let rec = engine.reconstruct_uncond(img, t0, 7).unwrap();
            show(&rec, &format!("{kind:?} uncond t0={t0} from clean input"));
        }
    }
}
