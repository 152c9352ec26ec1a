// temporary perf probe
use sinodiff_core::nn::{unet::*, Tensor};
use sinodiff_core::rng::stream;

fn main() {
    let cfg = UnetConfig::default();
    let p: UnetParams<f32> = UnetParams::init(&cfg, &mut stream(1, "init", &[]));
    println!("params: {}", p.param_count());
    for batch in [1usize, 4, 12, 16] {
        let x = Tensor::from_vec(&[batch, 1, 28, 28], (0..batch*784).map(|i| (i as f32*0.01).sin()).collect());
        let steps: Vec<usize> = (0..batch).map(|i| 10*(i+1)).collect();
        let t0 = std::time::Instant::now();
        let iters = 200usize.max(40/batch);
        for _ in 0..iters { let _ = unet_forward(&p, &x, &steps); }
        let dt = t0.elapsed().as_secs_f64();
        let per_eval = dt / (iters*batch) as f64;
        println!("batch {batch}: {:.2} ms/eval, {:.1} evals/s", per_eval*1e3, 1.0/per_eval);
    }
    // forward+backward (training step cost)
    let batch = 16;
    let x = Tensor::from_vec(&[batch, 1, 28, 28], (0..batch*784).map(|i| (i as f32*0.01).sin()).collect());
    let steps: Vec<usize> = (0..batch).map(|i| 10*(i+1)).collect();
    let t0 = std::time::Instant::now();
    let iters = 50;
    for _ in 0..iters {
        let (eps, cache) = unet_forward(&p, &x, &steps);
        let mut grads = UnetParams::<f32>::zeros(&cfg);
        let dout = eps.clone();
        unet_backward(&p, &cache, &dout, Some(&mut grads), false);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("fwd+bwd batch 16: {:.2} ms/image", dt/(iters*batch) as f64*1e3);
    // VJP cost
    let t0 = std::time::Instant::now();
    for _ in 0..iters {
        let (eps, cache) = unet_forward(&p, &x, &steps);
        let dout = eps.clone();
        unet_backward(&p, &cache, &dout, None, true);
    }
    println!("fwd+vjp batch 16: {:.2} ms/image", t0.elapsed().as_secs_f64()/(iters*batch) as f64*1e3);
}
