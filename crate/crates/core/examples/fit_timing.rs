//! Times the dataset trainer at the image-field shape: 4096 samples through
//! a 192-channel net. Prints ms/iteration and a projection for the full
//! 250x100 schedule.

use refold_core::nn::train::{fit_dataset, FitSchedule};
use refold_core::nn::{Activation, Mlp, NetworkConfig};

fn main() {
    refold_core::init();
    let n = 64usize;
    let mut points = Vec::with_capacity(n * n * 2);
    let mut targets = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let px = (x as f64 + 0.5) / n as f64;
            let py = (y as f64 + 0.5) / n as f64;
            points.push(px as f32);
            points.push(py as f32);
            targets.push((0.5 + 0.4 * (6.0 * px).sin()) as f32);
            targets.push((0.5 + 0.4 * (5.0 * py).cos()) as f32);
            targets.push((0.5 + 0.3 * (4.0 * (px + py)).sin()) as f32);
        }
    }
    let cfg = NetworkConfig::new(2, 3)
        .with_channels(192)
        .with_activation(Activation::Sigmoid);
    let mut mlp = Mlp::<f32>::init(cfg, 0).unwrap();
    let iters = 300usize;
    let sched = FitSchedule::new(1, iters, 0.001);
    let t0 = std::time::Instant::now();
    let log = fit_dataset(&mut mlp, &points, &targets, &sched, "bench", None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "{} iters in {:.2} s -> {:.2} ms/iter, projected 25000 iters = {:.0} s (loss {:.5})",
        iters,
        dt,
        dt / iters as f64 * 1e3,
        dt / iters as f64 * 25000.0,
        log[0]
    );
}
