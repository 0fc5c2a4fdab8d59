//! Per-shape GEMM timings for the shapes the trainer issues.

use refold_core::blas::Scalar;

fn time_gemm(label: &str, ta: bool, tb: bool, m: usize, n: usize, k: usize) {
    let (ar, ac) = if ta { (k, m) } else { (m, k) };
    let (br, bc) = if tb { (n, k) } else { (k, n) };
    let a = vec![0.5f32; ar * ac];
    let b = vec![0.25f32; br * bc];
    let mut c = vec![0.0f32; m * n];
    let reps = 200;
    f32::gemm(ta, tb, m, n, k, 1.0, &a, ac, &b, bc, 0.0, &mut c, n);
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        f32::gemm(ta, tb, m, n, k, 1.0, &a, ac, &b, bc, 0.0, &mut c, n);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let gf = 2.0 * m as f64 * n as f64 * k as f64 / dt / 1e9;
    println!("{label}: {:.3} ms  {:.1} GFLOP/s", dt * 1e3, gf);
}

fn main() {
    refold_core::init();
    println!("coretype={:?}", std::env::var("OPENBLAS_CORETYPE"));
    time_gemm("fwd full  (4096,192,192) B^T", false, true, 4096, 192, 192);
    time_gemm("fwd chunk (512,192,192) B^T ", false, true, 512, 192, 192);
    time_gemm("fwd chunk (512,192,192) noT ", false, false, 512, 192, 192);
    time_gemm("dW chunk  (192,192,512) A^T ", true, false, 192, 192, 512);
    time_gemm("dW full   (192,192,4096) A^T", true, false, 192, 192, 4096);
    time_gemm("dgrad chunk (512,192,192)   ", false, false, 512, 192, 192);
    time_gemm("enc chunk (512,192,34) B^T  ", false, true, 512, 192, 34);
}
