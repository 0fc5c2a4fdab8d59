//! Throughput of the hand-tiled kernels on the training shape mix.

use refold_core::nn::kernels::{self, Epilogue, PackedB};

fn fill(len: usize, seed: u32) -> Vec<f32> {
    let mut s = seed;
    (0..len)
        .map(|_| {
            s = s.wrapping_mul(1664525).wrapping_add(1013904223);
            (s >> 8) as f32 / (1 << 24) as f32 - 0.5
        })
        .collect()
}

fn bench(label: &str, m: usize, n: usize, k: usize, ta: bool, reps: usize) {
    let a = fill(m * k, 1);
    let b = fill(k * n, 2);
    let mut c = vec![0.0f32; m * n];
    let (ars, aks) = if ta { (1, m) } else { (k, 1) };
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        kernels::sgemm_strided(m, n, k, &a, ars, aks, &b, n, &mut c, n, Epilogue::Store);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!(
        "{label:<30} {:8.1} us {:7.1} GF/s",
        dt * 1e6,
        2.0 * (m * n * k) as f64 / dt / 1e9
    );
}

fn bench_packed(label: &str, m: usize, n: usize, k: usize, ta: bool, pack_each: bool, reps: usize) {
    let a = fill(m * k, 1);
    let b = fill(k * n, 2);
    let mut c = vec![0.0f32; m * n];
    let (ars, aks) = if ta { (1, m) } else { (k, 1) };
    let mut pb = PackedB::new();
    pb.pack(&b, n, k, n);
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        if pack_each {
            pb.pack(&b, n, k, n);
        }
        kernels::sgemm_packed(m, n, k, &a, ars, aks, &pb, &mut c, n, Epilogue::Store);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!(
        "{label:<30} {:8.1} us {:7.1} GF/s",
        dt * 1e6,
        2.0 * (m * n * k) as f64 / dt / 1e9
    );
}

fn main() {
    if !kernels::available() {
        println!("AVX-512 unavailable");
        return;
    }
    let reps = 3000;
    bench("fwd    (256,192,192)", 256, 192, 192, false, reps);
    bench("fwd    (512,192,192)", 512, 192, 192, false, reps);
    bench("fwd    (1024,192,192)", 1024, 192, 192, false, reps);
    bench("fwd    (4096,192,192)", 4096, 192, 192, false, reps / 4);
    bench("dW     (192,192,256) A^T", 192, 192, 256, true, reps);
    bench("dW     (192,192,512) A^T", 192, 192, 512, true, reps);
    bench("dW     (192,192,4096) A^T", 192, 192, 4096, true, reps / 4);
    bench("enc    (256,192,34)", 256, 192, 34, false, reps);
    bench("dW0    (192,34,256) A^T", 192, 34, 256, true, reps);
    bench("head   (256,3,192)", 256, 3, 192, false, reps);
    bench("headW  (3,192,256) A^T", 3, 192, 256, true, reps);
    bench("headd  (256,192,3)", 256, 192, 3, false, reps);
    println!("--- packed B ---");
    bench_packed("fwd    (256,192,192) pk", 256, 192, 192, false, false, reps);
    bench_packed("fwd    (512,192,192) pk", 512, 192, 192, false, false, reps);
    bench_packed("fwd    (4096,192,192) pk", 4096, 192, 192, false, false, reps / 4);
    bench_packed("dW     (192,192,256) Tpk+", 192, 192, 256, true, true, reps);
    bench_packed("dW     (192,192,512) Tpk+", 192, 192, 512, true, true, reps);
    bench_packed("headd  (256,192,3) pk", 256, 192, 3, false, false, reps);
    println!("--- k-split probe ---");
    bench_packed("fwd    (512,192,96) pk", 512, 192, 96, false, false, reps);
    bench_packed("fwd    (512,192,48) pk", 512, 192, 48, false, false, reps);
    bench_packed("fwd    (512,64,192) pk", 512, 64, 192, false, false, reps);
    bench_packed("fwd    (512,128,192) pk", 512, 128, 192, false, false, reps);
}
