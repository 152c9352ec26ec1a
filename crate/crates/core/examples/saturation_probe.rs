// temporary probe
use sinodiff_core::data::load_test;
use sinodiff_core::tomography::{fbp, radon, ProjectionGeometry};

fn main() {
    let pool = load_test(std::path::Path::new("data/mnist")).unwrap();
    let counts = [4usize, 9, 18, 30, 44, 60, 90, 120, 150, 180];
    let mut means = vec![0.0f64; counts.len()];
    for i in 0..10 {
        let img = pool.image(i * 37);
        for (k, na) in counts.iter().enumerate() {
            let g = ProjectionGeometry::uniform(*na, 28).unwrap();
            let rec = fbp(&radon(&img, &g).unwrap(), &g).unwrap();
            means[k] += img.mse(&rec).unwrap() / 10.0;
        }
    }
    for (na, m) in counts.iter().zip(&means) {
        println!("{na:>4} angles: mean MSE {m:.7}");
    }
}
