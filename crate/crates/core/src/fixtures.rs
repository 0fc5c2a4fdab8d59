//! Deterministic synthetic inputs used by tests, benchmarks, and the
//! `fixtures` CLI subcommand. Everything here is a pure function of its
//! arguments, so fixture-based tests rerun byte-identically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::image::RasterImage;

/// Smooth low-frequency color mixture. Each channel is a seeded sum of
/// sinusoids rescaled into [0.08, 0.92]; there are no sharp edges, so a
/// coordinate network can fit it to high fidelity.
pub fn smooth_image(width: usize, height: usize, seed: u64) -> RasterImage {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // Per channel: 4 plane waves with frequencies up to 3 cycles per side.
    let mut waves = [[
        [0.0f64; 4], // amplitude
        [0.0; 4],    // fx
        [0.0; 4],    // fy
        [0.0; 4],    // phase
    ]; 3];
    for w in waves.iter_mut() {
        for j in 0..4 {
            w[0][j] = rng.random_range(0.3..1.0) / (j + 1) as f64;
            w[1][j] = rng.random_range(-3.0..3.0);
            w[2][j] = rng.random_range(-3.0..3.0);
            w[3][j] = rng.random_range(0.0..std::f64::consts::TAU);
        }
    }
    let raw = |c: usize, u: f64, v: f64| -> f64 {
        let w = &waves[c];
        (0..4)
            .map(|j| w[0][j] * (std::f64::consts::TAU * (w[1][j] * u + w[2][j] * v) + w[3][j]).sin())
            .sum()
    };
    // Rescale each channel over the actual pixel grid.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64;
            let v = (y as f64 + 0.5) / height as f64;
            for c in 0..3 {
                let s = raw(c, u, v);
                lo[c] = lo[c].min(s);
                hi[c] = hi[c].max(s);
            }
        }
    }
    RasterImage::from_fn(width, height, |x, y| {
        let u = (x as f64 + 0.5) / width as f64;
        let v = (y as f64 + 0.5) / height as f64;
        let mut px = [0.0; 3];
        for c in 0..3 {
            let span = (hi[c] - lo[c]).max(1e-9);
            px[c] = 0.08 + 0.84 * (raw(c, u, v) - lo[c]) / span;
        }
        px
    })
}

/// Textured vertical stripe on a flat background. The stripe spans the
/// middle quarter of the width (columns [3w/8, 5w/8)) and carries a
/// two-pixel checker so its interior, not just its edges, holds energy;
/// the background is featureless and free to compress.
pub fn stripe_image(width: usize, height: usize) -> RasterImage {
    let lo = 3 * width / 8;
    let hi = 5 * width / 8;
    RasterImage::from_fn(width, height, |x, y| {
        if (lo..hi).contains(&x) {
            let t = if (x / 2 + y / 2) % 2 == 0 { 0.15 } else { -0.15 };
            [0.75 + t, 0.55 - t, 0.2]
        } else {
            [0.25, 0.25, 0.28]
        }
    })
}

/// Mask selecting the stripe painted by [`stripe_image`]: white inside the
/// stripe columns, black elsewhere.
pub fn stripe_mask(width: usize, height: usize) -> RasterImage {
    let lo = 3 * width / 8;
    let hi = 5 * width / 8;
    RasterImage::from_fn(width, height, |x, _| {
        if (lo..hi).contains(&x) {
            [1.0, 1.0, 1.0]
        } else {
            [0.0, 0.0, 0.0]
        }
    })
}

/// Textured square object on a flat background. The square is centered at
/// (cx, cy) in unit coordinates with the given half-size.
pub fn square_image(width: usize, height: usize, cx: f64, cy: f64, half: f64) -> RasterImage {
    RasterImage::from_fn(width, height, |x, y| {
        let u = (x as f64 + 0.5) / width as f64;
        let v = (y as f64 + 0.5) / height as f64;
        if (u - cx).abs() < half && (v - cy).abs() < half {
            let t = if (x / 2 + y / 2) % 2 == 0 { 0.12 } else { -0.12 };
            [0.2, 0.65 + t, 0.8 - t]
        } else {
            [0.3, 0.3, 0.3]
        }
    })
}

/// Mask matching [`square_image`] with the same placement arguments.
pub fn square_mask(width: usize, height: usize, cx: f64, cy: f64, half: f64) -> RasterImage {
    RasterImage::from_fn(width, height, |x, y| {
        let u = (x as f64 + 0.5) / width as f64;
        let v = (y as f64 + 0.5) / height as f64;
        if (u - cx).abs() < half && (v - cy).abs() < half {
            [1.0, 1.0, 1.0]
        } else {
            [0.0, 0.0, 0.0]
        }
    })
}

/// Horizontal luminance ramp, equal in all channels.
pub fn ramp_image(width: usize, height: usize) -> RasterImage {
    RasterImage::from_fn(width, height, |x, _| {
        let v = (x as f64 + 0.5) / width as f64;
        [v, v, v]
    })
}

/// Uniform random pixels; the workhorse for oracle comparisons.
pub fn random_image(width: usize, height: usize, seed: u64) -> RasterImage {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut data = vec![0.0; width * height * 3];
    for v in data.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    RasterImage::from_data(width, height, data).expect("buffer sized to fit")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(smooth_image(16, 16, 9).data(), smooth_image(16, 16, 9).data());
        assert_eq!(random_image(8, 6, 3).data(), random_image(8, 6, 3).data());
        assert_ne!(random_image(8, 6, 3).data(), random_image(8, 6, 4).data());
    }

    #[test]
    fn smooth_image_spans_a_healthy_range() {
        let img = smooth_image(64, 64, 1);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in img.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        assert!(lo >= 0.05 && hi <= 0.95, "range [{lo}, {hi}]");
        assert!(hi - lo > 0.5, "too flat: [{lo}, {hi}]");
    }

    #[test]
    fn stripe_geometry_and_mask_agree() {
        let img = stripe_image(64, 32);
        let mask = stripe_mask(64, 32);
        for y in 0..32 {
            for x in 0..64 {
                let inside = (24..40).contains(&x);
                assert_eq!(mask.get(x, y)[0] > 0.5, inside);
                let px = img.get(x, y);
                if inside {
                    assert!(px[0] > 0.5, "stripe pixel {x},{y} too dark");
                } else {
                    assert_eq!(px, [0.25, 0.25, 0.28]);
                }
            }
        }
    }

    #[test]
    fn stripe_interior_carries_energy() {
        let img = stripe_image(64, 32);
        let e = crate::fields::discrete_energy(&img);
        // The checker has flat 2x2 cells, so average over the interior
        // rather than probing one pixel.
        let inside: f64 =
            (25..38).map(|x| e[16 * 64 + x]).sum::<f64>() / 13.0;
        let outside = e[16 * 64 + 8];
        assert!(inside > 0.1, "interior mean energy {inside}");
        assert_eq!(outside, 0.0);
    }

    #[test]
    fn square_sits_where_asked() {
        let img = square_image(32, 32, 0.5, 0.5, 0.2);
        let mask = square_mask(32, 32, 0.5, 0.5, 0.2);
        assert!(mask.get(16, 16)[0] > 0.5);
        assert!(mask.get(2, 2)[0] < 0.5);
        assert_eq!(img.get(2, 2), [0.3, 0.3, 0.3]);
        assert!(img.get(16, 16) != [0.3, 0.3, 0.3]);
    }

    #[test]
    fn ramp_is_monotone_in_x() {
        let img = ramp_image(16, 4);
        for x in 1..16 {
            assert!(img.get(x, 0)[0] > img.get(x - 1, 0)[0]);
        }
    }
}
