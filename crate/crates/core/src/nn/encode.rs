//! Sinusoidal positional encoding of low-dimensional coordinates.
//!
//! Coordinate networks fit high-frequency content poorly when fed raw
//! positions; lifting each coordinate through a bank of sin/cos pairs at
//! octave-spaced frequencies fixes that. The layout per point is
//!
//! ```text
//! [p_0 .. p_{d-1},
//!  sin(pi p_0), cos(pi p_0), .. sin(pi p_{d-1}), cos(pi p_{d-1}),   (k = 0)
//!  sin(2 pi p_0), cos(2 pi p_0), ..                                 (k = 1)
//!  ...                                                              (k = bands-1)]
//! ```
//!
//! i.e. the raw coordinates followed by one sin/cos block per frequency
//! `2^k * pi`.

use crate::blas::Scalar;

/// Encoded width for `dim` input coordinates and `bands` frequencies.
pub fn encoded_dim(dim: usize, bands: usize) -> usize {
    dim * (1 + 2 * bands)
}

/// Band count suited to `resolution` equally spaced training samples per
/// unit length: the largest count whose top frequency `2^(bands-1)·pi` has
/// a period of at least two sample spacings, clamped to `[2, 8]`.
///
/// Training constrains a network only at its sample points; bands at or
/// above the sampling limit keep their randomly initialized weights (or
/// trade off ambiguously against other features) and show up as arbitrary
/// oscillation — with far larger derivative noise — between samples. Fits
/// meant to be queried off-grid should cap their bands here rather than
/// using the config default.
pub fn bands_for(resolution: usize) -> usize {
    let mut bands = 1;
    while bands < 8 && (1usize << bands) <= resolution / 2 {
        bands += 1;
    }
    bands.max(2)
}

/// Encodes a batch of points (`batch` rows of `dim` coordinates) into
/// `out`, which must hold `batch * encoded_dim(dim, bands)` values.
pub fn encode_batch<F: Scalar>(points: &[F], dim: usize, bands: usize, out: &mut [F]) {
    let batch = points.len() / dim;
    assert_eq!(points.len(), batch * dim, "point buffer not a multiple of dim");
    let width = encoded_dim(dim, bands);
    assert_eq!(out.len(), batch * width, "encode output buffer has wrong size");

    for (p, row) in points.chunks_exact(dim).zip(out.chunks_exact_mut(width)) {
        row[..dim].copy_from_slice(p);
        for k in 0..bands {
            let freq = F::from_f64((1u64 << k) as f64 * std::f64::consts::PI);
            for (i, &x) in p.iter().enumerate() {
                let a = freq * x;
                let base = dim + 2 * (k * dim + i);
                row[base] = a.sin();
                row[base + 1] = a.cos();
            }
        }
    }
}

/// Convenience single-point wrapper around [`encode_batch`].
pub fn encode<F: Scalar>(point: &[F], bands: usize) -> Vec<F> {
    let mut out = vec![F::zero(); encoded_dim(point.len(), bands)];
    encode_batch(point, point.len(), bands, &mut out);
    out
}

/// Pulls a gradient w.r.t. encoded values back to a gradient w.r.t. the raw
/// coordinates. `d_encoded` is `batch x encoded_dim`, `points` the matching
/// raw coordinates, and the result is accumulated into `d_points`
/// (`batch x dim`).
pub fn encode_backward<F: Scalar>(
    points: &[F],
    dim: usize,
    bands: usize,
    d_encoded: &[F],
    d_points: &mut [F],
) {
    let width = encoded_dim(dim, bands);
    let batch = points.len() / dim;
    assert_eq!(d_encoded.len(), batch * width);
    assert_eq!(d_points.len(), batch * dim);

    for ((p, de), dp) in points
        .chunks_exact(dim)
        .zip(d_encoded.chunks_exact(width))
        .zip(d_points.chunks_exact_mut(dim))
    {
        for i in 0..dim {
            dp[i] = dp[i] + de[i];
        }
        for k in 0..bands {
            let freq = F::from_f64((1u64 << k) as f64 * std::f64::consts::PI);
            for (i, &x) in p.iter().enumerate() {
                let a = freq * x;
                let base = dim + 2 * (k * dim + i);
                // d sin(f x)/dx = f cos(f x); d cos(f x)/dx = -f sin(f x)
                dp[i] = dp[i] + freq * (a.cos() * de[base] - a.sin() * de[base + 1]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn scalar_two_bands_layout() {
        let e = encode(&[0.25f64], 2);
        let pi = std::f64::consts::PI;
        let expect = [
            0.25,
            (pi * 0.25).sin(),
            (pi * 0.25).cos(),
            (2.0 * pi * 0.25).sin(),
            (2.0 * pi * 0.25).cos(),
        ];
        assert_eq!(e.len(), expect.len());
        for (got, want) in e.iter().zip(expect) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_point_encodes_to_alternating_pattern() {
        // sin(0) = 0, cos(0) = 1 at every band.
        let e = encode(&[0.0f64, 0.0], 3);
        assert_eq!(e.len(), encoded_dim(2, 3));
        assert_eq!(&e[..2], &[0.0, 0.0]);
        for pair in e[2..].chunks_exact(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
    }

    #[test]
    fn width_formula() {
        assert_eq!(encoded_dim(2, 8), 34);
        assert_eq!(encoded_dim(3, 8), 51);
        assert_eq!(encoded_dim(1, 0), 1);
    }

    #[test]
    fn band_budget_tracks_resolution() {
        assert_eq!(bands_for(2), 2);
        assert_eq!(bands_for(8), 3);
        assert_eq!(bands_for(16), 4);
        assert_eq!(bands_for(64), 6);
        assert_eq!(bands_for(256), 8);
        // Never exceeds the config default even on huge grids.
        assert_eq!(bands_for(100_000), 8);
        // Top band period stays at or above two sample spacings.
        for n in 2..300usize {
            let b = bands_for(n);
            assert!(b >= 2 && b <= 8);
            if b > 2 {
                assert!(1usize << (b - 1) <= n / 2);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = [0.3f64, -0.1, 0.7];
        let bands = 4;
        let width = encoded_dim(3, bands);
        // Arbitrary downstream gradient.
        let de: Vec<f64> = (0..width).map(|i| 0.1 * (i as f64) - 0.4).collect();
        let mut dp = [0.0f64; 3];
        encode_backward(&p, 3, bands, &de, &mut dp);

        let h = 1e-6;
        for i in 0..3 {
            let mut plus = p;
            plus[i] += h;
            let mut minus = p;
            minus[i] -= h;
            let ep = encode(&plus, bands);
            let em = encode(&minus, bands);
            let fd: f64 = ep
                .iter()
                .zip(&em)
                .zip(&de)
                .map(|((a, b), g)| (a - b) / (2.0 * h) * g)
                .sum();
            assert_abs_diff_eq!(dp[i], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn batch_variant_agrees_with_single_points() {
        let pts = [0.1f64, 0.9, -0.3, 0.5];
        let mut out = vec![0.0; 2 * encoded_dim(2, 5)];
        encode_batch(&pts, 2, 5, &mut out);
        let first = encode(&pts[..2], 5);
        let second = encode(&pts[2..], 5);
        assert_eq!(&out[..first.len()], first.as_slice());
        assert_eq!(&out[first.len()..], second.as_slice());
    }
}
