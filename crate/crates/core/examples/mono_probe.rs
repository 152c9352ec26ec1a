// temporary probe
use sinodiff_core::data::load_test;
use sinodiff_core::tomography::{fbp, radon, ProjectionGeometry};

fn main() {
    let pool = load_test(std::path::Path::new("data/mnist")).unwrap();
    let mut means = vec![0.0f64; 5];
    let mut per_image_ok = 0;
    for i in 0..10 {
        let img = pool.image(i * 37);
        let mut mses = Vec::new();
        for (k, na) in [4usize, 9, 18, 90, 180].iter().enumerate() {
            let g = ProjectionGeometry::uniform(*na, 28).unwrap();
            let rec = fbp(&radon(&img, &g).unwrap(), &g).unwrap();
            let mse = img.mse(&rec).unwrap();
            means[k] += mse / 10.0;
            mses.push(mse);
        }
        let mono = mses.windows(2).all(|w| w[1] < w[0]);
        per_image_ok += mono as usize;
        println!("img {i}: 90={:.6} 180={:.6} mono={mono}", mses[3], mses[4]);
    }
    println!("means: {means:?}");
    println!("mean mono: {}", means.windows(2).all(|w| w[1] < w[0]));
    println!("per-image mono: {per_image_ok}/10");
}
