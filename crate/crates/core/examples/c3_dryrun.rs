//! Scratch harness for the image-fidelity gate: full-schedule fit of the
//! 64x64 smooth fixture, wall time and PSNR. TODO(remove): delete once the
//! acceptance suite pins its numbers.

use refold_core::fields::{train_image_field, ImageField};
use refold_core::fixtures::smooth_image;

fn main() {
    refold_core::init();
    for seed in [11u64, 29] {
        let img = smooth_image(64, 64, seed);
        let t0 = std::time::Instant::now();
        let field = train_image_field(&img, &ImageField::default_schedule(), seed).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let psnr = field.psnr_vs(&img).unwrap();
        println!("seed {seed}: psnr {psnr:.2} dB in {secs:.1} s");
    }
}
