// temporary probe
use sinodiff_core::data::load_test;
use sinodiff_core::tomography::{fbp, radon, ProjectionGeometry};

fn main() {
    let pool = load_test(std::path::Path::new("data/mnist")).unwrap();
    let counts = [4usize, 9, 18, 90, 180];
    let c = 13.5f64;
    let mut per_image_mono = 0;
    let mut means = vec![0.0f64; counts.len()];
    for i in 0..10 {
        let img = pool.image(i * 37);
        let mut mses = Vec::new();
        for (k, na) in counts.iter().enumerate() {
            let g = ProjectionGeometry::uniform(*na, 28).unwrap();
            let rec = fbp(&radon(&img, &g).unwrap(), &g).unwrap();
            // MSE restricted to the inscribed circle (the measured region).
            let mut acc = 0.0f64;
            let mut n = 0usize;
            for y in 0..28 {
                for x in 0..28 {
                    let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
                    if d <= c {
                        let diff = (img.get(y, x) - rec.get(y, x)) as f64;
                        acc += diff * diff;
                        n += 1;
                    }
                }
            }
            let mse = acc / n as f64;
            means[k] += mse / 10.0;
            mses.push(mse);
        }
        let mono = mses.windows(2).all(|w| w[1] < w[0]);
        per_image_mono += mono as usize;
        println!("img {i}: 90={:.7} 180={:.7} mono={mono}", mses[3], mses[4]);
    }
    println!("circle-masked means: {means:?}");
    println!("per-image mono: {per_image_mono}/10");
}
