//! Discrete seam carving: the dynamic-programming baseline the field-based
//! retargeter is compared against.
//!
//! A vertical seam is one column index per row with steps of at most one
//! column between adjacent rows. Carving removes the seam of least total
//! energy and repeats, recomputing the energy map after every removal;
//! expansion finds the cheapest set of disjoint seams in one sweep and
//! duplicates them.

use crate::error::{Error, Result};
use crate::image::RasterImage;
use crate::Axis;

/// Per-pixel energy: the L1 norm of the forward-difference gradient summed
/// over channels, with the difference clamped to zero on the far edges.
pub fn energy_map(img: &RasterImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut e = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let here = img.get(x, y);
            let mut v = 0.0;
            if x + 1 < w {
                let right = img.get(x + 1, y);
                for c in 0..3 {
                    v += (right[c] - here[c]).abs();
                }
            }
            if y + 1 < h {
                let down = img.get(x, y + 1);
                for c in 0..3 {
                    v += (down[c] - here[c]).abs();
                }
            }
            e[y * w + x] = v;
        }
    }
    e
}

/// The total energy of a seam, accumulated top-down (the same association
/// the DP uses, so equal seams give bit-equal costs).
pub fn seam_cost(energy: &[f64], w: usize, seam: &[usize]) -> f64 {
    seam.iter()
        .enumerate()
        .fold(0.0, |acc, (y, &x)| acc + energy[y * w + x])
}

/// True when the seam has one entry per row, stays in bounds and never
/// moves more than one column between rows.
pub fn seam_is_monotone(seam: &[usize], w: usize) -> bool {
    if seam.is_empty() {
        return false;
    }
    seam.iter().all(|&x| x < w)
        && seam.windows(2).all(|p| p[0].abs_diff(p[1]) <= 1)
}

/// The minimum-energy vertical seam by dynamic programming. Ties prefer
/// the smallest column index at every choice, making the result
/// deterministic. Returns the seam (top to bottom) and its total energy.
pub fn min_vertical_seam(energy: &[f64], w: usize, h: usize) -> (Vec<usize>, f64) {
    assert!(w > 0 && h > 0 && energy.len() == w * h);
    // m holds cumulative costs for the previous row; parents remember the
    // chosen predecessor column.
    let mut m = energy[..w].to_vec();
    let mut next = vec![0.0; w];
    let mut parent = vec![0usize; w * h];
    for y in 1..h {
        for x in 0..w {
            let lo = x.saturating_sub(1);
            let hi = (x + 1).min(w - 1);
            let mut best = lo;
            for cand in lo + 1..=hi {
                if m[cand] < m[best] {
                    best = cand;
                }
            }
            parent[y * w + x] = best;
            next[x] = m[best] + energy[y * w + x];
        }
        std::mem::swap(&mut m, &mut next);
    }
    let mut end = 0;
    for x in 1..w {
        if m[x] < m[end] {
            end = x;
        }
    }
    let cost = m[end];
    let mut seam = vec![0usize; h];
    seam[h - 1] = end;
    for y in (1..h).rev() {
        seam[y - 1] = parent[y * w + seam[y]];
    }
    (seam, cost)
}

/// Brute-force minimum seam: walks every monotone path. Exponential in
/// height, usable only on tiny grids; kept as the independent check of the
/// dynamic program.
pub fn exhaustive_min_seam(energy: &[f64], w: usize, h: usize) -> (Vec<usize>, f64) {
    assert!(w > 0 && h > 0 && energy.len() == w * h);
    let mut best_cost = f64::INFINITY;
    let mut best: Vec<usize> = Vec::new();
    let mut path = vec![0usize; h];
    fn walk(
        energy: &[f64],
        w: usize,
        h: usize,
        y: usize,
        acc: f64,
        path: &mut Vec<usize>,
        best_cost: &mut f64,
        best: &mut Vec<usize>,
    ) {
        if y == h {
            if acc < *best_cost {
                *best_cost = acc;
                best.clone_from(path);
            }
            return;
        }
        let (lo, hi) = if y == 0 {
            (0, w - 1)
        } else {
            let p = path[y - 1];
            (p.saturating_sub(1), (p + 1).min(w - 1))
        };
        for x in lo..=hi {
            path[y] = x;
            walk(energy, w, h, y + 1, acc + energy[y * w + x], path, best_cost, best);
        }
    }
    walk(energy, w, h, 0, 0.0, &mut path, &mut best_cost, &mut best);
    (best, best_cost)
}

/// Removes one vertical seam, returning an image one column narrower.
pub fn remove_vertical_seam(img: &RasterImage, seam: &[usize]) -> RasterImage {
    let (w, h) = (img.width(), img.height());
    assert_eq!(seam.len(), h);
    let mut out = RasterImage::new(w - 1, h);
    for y in 0..h {
        let cut = seam[y];
        let mut ox = 0;
        for x in 0..w {
            if x != cut {
                out.set(ox, y, img.get(x, y));
                ox += 1;
            }
        }
    }
    out
}

fn transposed(img: &RasterImage) -> RasterImage {
    let (w, h) = (img.width(), img.height());
    RasterImage::from_fn(h, w, |x, y| img.get(y, x))
}

/// Removes `n` minimum seams across `axis`, recomputing the energy map
/// after every removal.
pub fn carve(img: &RasterImage, axis: Axis, n: usize) -> Result<RasterImage> {
    let mut work = match axis {
        Axis::X => img.clone(),
        Axis::Y => transposed(img),
    };
    if n >= work.width() {
        return Err(Error::argument(format!(
            "cannot remove {} seams from {} columns",
            n,
            work.width()
        )));
    }
    for _ in 0..n {
        let e = energy_map(&work);
        let (seam, _) = min_vertical_seam(&e, work.width(), work.height());
        work = remove_vertical_seam(&work, &seam);
    }
    Ok(match axis {
        Axis::X => work,
        Axis::Y => transposed(&work),
    })
}

/// Finds the `n` cheapest disjoint seams in one sweep (removing each from
/// a working copy without recomputing energies) and duplicates them in the
/// original, the inserted pixel averaging the seam pixel with its next
/// neighbor. Returns the widened image.
pub fn expand(img: &RasterImage, axis: Axis, n: usize) -> Result<RasterImage> {
    let src = match axis {
        Axis::X => img.clone(),
        Axis::Y => transposed(img),
    };
    let (w, h) = (src.width(), src.height());
    if n >= w {
        return Err(Error::argument(format!(
            "cannot duplicate {} seams from {} columns; expansion is limited to less than 2x",
            n, w
        )));
    }
    // Seam search runs on a shrinking energy copy; col_of maps working
    // columns back to original indices so the seams stay expressed in
    // original coordinates.
    let mut energy = energy_map(&src);
    let mut col_of: Vec<Vec<usize>> = (0..h).map(|_| (0..w).collect()).collect();
    let mut cur_w = w;
    let mut seams: Vec<Vec<usize>> = Vec::with_capacity(n);
    for _ in 0..n {
        let (seam, _) = min_vertical_seam(&energy, cur_w, h);
        seams.push(seam.iter().enumerate().map(|(y, &x)| col_of[y][x]).collect());
        let mut next = vec![0.0; (cur_w - 1) * h];
        for y in 0..h {
            let cut = seam[y];
            let row = &energy[y * cur_w..(y + 1) * cur_w];
            let dst = &mut next[y * (cur_w - 1)..(y + 1) * (cur_w - 1)];
            dst[..cut].copy_from_slice(&row[..cut]);
            dst[cut..].copy_from_slice(&row[cut + 1..]);
            col_of[y].remove(cut);
        }
        energy = next;
        cur_w -= 1;
    }

    // Insert duplicates right of each seam pixel, widest-first per row so
    // earlier insertions do not shift later ones.
    let mut out = RasterImage::new(w + n, h);
    for y in 0..h {
        let mut cuts: Vec<usize> = seams.iter().map(|s| s[y]).collect();
        cuts.sort_unstable();
        let mut ox = 0;
        let mut ci = 0;
        for x in 0..w {
            out.set(ox, y, src.get(x, y));
            ox += 1;
            while ci < cuts.len() && cuts[ci] == x {
                let right = if x + 1 < w { src.get(x + 1, y) } else { src.get(x, y) };
                let here = src.get(x, y);
                let avg = [
                    0.5 * (here[0] + right[0]),
                    0.5 * (here[1] + right[1]),
                    0.5 * (here[2] + right[2]),
                ];
                out.set(ox, y, avg);
                ox += 1;
                ci += 1;
            }
        }
    }
    Ok(match axis {
        Axis::X => out,
        Axis::Y => transposed(&out),
    })
}
