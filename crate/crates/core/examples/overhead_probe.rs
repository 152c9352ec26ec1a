// temporary overhead probe
fn main() {
    // silu cost on typical activation sizes: level1 maps are 1x32x28x28 = 25088 elems
    let n = 25088;
    let x: Vec<f32> = (0..n).map(|i| ((i as f32)*0.001).sin()*4.0).collect();
    let mut y = vec![0.0f32; n];
    let t0 = std::time::Instant::now();
    let iters = 2000;
    for _ in 0..iters {
        for i in 0..n { let s = 1.0/(1.0+(-x[i]).exp()); y[i] = x[i]*s; }
        std::hint::black_box(&y);
    }
    let dt = t0.elapsed().as_secs_f64()/iters as f64;
    println!("silu libm {n} elems: {:.3} ms", dt*1e3);

    // fast exp2-based
    #[inline(always)]
    fn exp_fast(x: f32) -> f32 {
        let x = x.max(-87.0).min(87.0);
        let z = x * std::f32::consts::LOG2_E;
        let zi = z.floor();
        let zf = z - zi;
        // 2^zf on [0,1): degree-5 minimax-ish
        let p = 1.0 + zf * (0.693147182 + zf * (0.240226507 + zf * (0.0555041086 + zf * (0.00961812910 + zf * 0.00133335581))));
        f32::from_bits((((zi as i32 + 127) as u32) << 23)) * p
    }
    let t0 = std::time::Instant::now();
    for _ in 0..iters {
        for i in 0..n { let s = 1.0/(1.0+exp_fast(-x[i])); y[i] = x[i]*s; }
        std::hint::black_box(&y);
    }
    println!("silu fast: {:.3} ms", t0.elapsed().as_secs_f64()/iters as f64*1e3);
    // accuracy
    let mut max_rel = 0.0f32;
    for i in 0..n {
        let a = 1.0/(1.0+(-x[i]).exp());
        let b = 1.0/(1.0+exp_fast(-x[i]));
        max_rel = max_rel.max(((a-b)/a).abs());
    }
    println!("sigmoid max rel err: {max_rel:.2e}");
}
