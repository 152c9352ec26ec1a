// temporary gemm probe
fn main() {
    for (m, k, n) in [(32usize, 288usize, 784usize), (32, 288, 3136), (64, 576, 196), (64, 576, 784), (32, 64*9, 784)] {
        let a = vec![1.0f32; m*k];
        let b = vec![1.0f32; k*n];
        let mut c = vec![0.0f32; m*n];
        let t0 = std::time::Instant::now();
        let iters = 300;
        for _ in 0..iters {
            unsafe { matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0, c.as_mut_ptr(), n as isize, 1); }
        }
        let dt = t0.elapsed().as_secs_f64()/iters as f64;
        let gflops = (2.0*m as f64*k as f64*n as f64)/dt/1e9;
        println!("{m}x{k}x{n}: {:.3} ms, {gflops:.1} GFLOP/s", dt*1e3);
    }
}
