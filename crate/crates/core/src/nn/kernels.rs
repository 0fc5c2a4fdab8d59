//! Hand-tiled f32 matrix kernels for the training hot path.
//!
//! The generic [`Scalar::gemm`](crate::blas::Scalar) route pays for operand
//! packing and dispatch on every call, which dominates once the per-layer
//! matrices are small enough to stay cache-resident. These kernels read both
//! operands in place (row-major, arbitrary row/column strides for the left
//! operand, so a transposed read costs nothing) and fuse the bias-plus-
//! activation epilogue into the output store.
//!
//! Everything here is specialised to f32 with AVX-512, detected at runtime;
//! callers fall back to the BLAS route when [`available`] is false, so the
//! numerical contract of the network code never depends on this module.

#![allow(clippy::too_many_arguments)]

#[cfg(target_arch = "x86_64")]
use core::arch::x86_64::*;
use std::any::TypeId;

use crate::blas::Scalar;

/// Epilogue applied while storing a finished output tile.
#[derive(Clone, Copy)]
pub enum Epilogue<'a> {
    /// `C = acc`.
    Store,
    /// `C += acc`.
    Add,
    /// `C = acc + bias` (bias indexed by output column).
    Bias { bias: &'a [f32] },
    /// `C = leaky(acc + bias)`: `max(z, slope * z)`.
    BiasLeaky { bias: &'a [f32], slope: f32 },
    /// `C = C + acc + bias`.
    AddBias { bias: &'a [f32] },
    /// `C = leaky(C + acc + bias)`.
    AddBiasLeaky { bias: &'a [f32], slope: f32 },
}

/// Depth of one reduction block: 96 rows of a 64-wide panel is 24 KiB, which
/// leaves the other half of L1d for the left operand and the output tile.
/// Deeper reductions re-stream the panel from L2 on every row of tiles, which
/// costs roughly 15% of throughput at `k = 192`.
const KB: usize = 96;

/// Splits a reduction of depth `k` into L1-sized blocks and yields
/// `(k_offset, block_len, block_epilogue)` for each, rewriting the caller's
/// epilogue so intermediate blocks accumulate and only the last one applies
/// bias and activation.
fn k_blocks<'a>(k: usize, epi: Epilogue<'a>) -> impl Iterator<Item = (usize, usize, Epilogue<'a>)> {
    let nb = if k > KB + KB / 2 { k.div_ceil(KB) } else { 1 };
    (0..nb).map(move |j| {
        let ko = j * KB;
        let kl = if j + 1 == nb { k - ko } else { KB };
        let e = if nb == 1 {
            epi
        } else if j == 0 {
            match epi {
                Epilogue::Store | Epilogue::Bias { .. } | Epilogue::BiasLeaky { .. } => {
                    Epilogue::Store
                }
                _ => Epilogue::Add,
            }
        } else if j + 1 < nb {
            Epilogue::Add
        } else {
            match epi {
                Epilogue::Store | Epilogue::Add => Epilogue::Add,
                Epilogue::Bias { bias } | Epilogue::AddBias { bias } => Epilogue::AddBias { bias },
                Epilogue::BiasLeaky { bias, slope } | Epilogue::AddBiasLeaky { bias, slope } => {
                    Epilogue::AddBiasLeaky { bias, slope }
                }
            }
        };
        (ko, kl, e)
    })
}

/// True when the fast path can run on this machine.
pub fn available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        static AVX512: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
        *AVX512.get_or_init(|| std::arch::is_x86_feature_detected!("avx512f"))
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Reinterprets a scalar slice as f32 when that is its concrete type.
pub fn f32_view<F: Scalar>(x: &[F]) -> Option<&[f32]> {
    if TypeId::of::<F>() == TypeId::of::<f32>() {
        // Same type, so layout and lifetime are unchanged.
        Some(unsafe { std::slice::from_raw_parts(x.as_ptr() as *const f32, x.len()) })
    } else {
        None
    }
}

/// Mutable variant of [`f32_view`].
pub fn f32_view_mut<F: Scalar>(x: &mut [F]) -> Option<&mut [f32]> {
    if TypeId::of::<F>() == TypeId::of::<f32>() {
        Some(unsafe { std::slice::from_raw_parts_mut(x.as_mut_ptr() as *mut f32, x.len()) })
    } else {
        None
    }
}

/// Right-hand operand repacked into contiguous 64-column panels
/// (zero-padded), so the inner loop streams it sequentially instead of
/// striding across cache lines. Reusable across calls to avoid allocation.
#[derive(Clone, Debug, Default)]
pub struct PackedB {
    data: Vec<f32>,
    k: usize,
    n: usize,
}

impl PackedB {
    pub fn new() -> Self {
        Self::default()
    }

    fn reserve(&mut self, k: usize, n: usize) {
        self.k = k;
        self.n = n;
        self.data.clear();
        self.data.resize(n.div_ceil(64) * k * 64, 0.0);
    }

    /// Packs `b` (`k x n` row-major, row stride `ldb`).
    pub fn pack(&mut self, b: &[f32], ldb: usize, k: usize, n: usize) {
        assert!(k > 0 && n > 0 && ldb >= n);
        assert!((k - 1) * ldb + n <= b.len());
        self.reserve(k, n);
        let panels = n.div_ceil(64);
        for p in 0..panels {
            let w = 64.min(n - p * 64);
            let dst = &mut self.data[p * k * 64..];
            for t in 0..k {
                let src = &b[t * ldb + p * 64..t * ldb + p * 64 + w];
                dst[t * 64..t * 64 + w].copy_from_slice(src);
            }
        }
    }

    /// Packs the transpose of `w` (`rows x cols` row-major), i.e. the logical
    /// operand is `wᵀ` with `k = cols`, `n = rows`.
    pub fn pack_transpose(&mut self, w: &[f32], rows: usize, cols: usize) {
        assert!(rows > 0 && cols > 0 && rows * cols <= w.len());
        self.reserve(cols, rows);
        let panels = rows.div_ceil(64);
        for p in 0..panels {
            let wdt = 64.min(rows - p * 64);
            let dst = &mut self.data[p * cols * 64..];
            for j in 0..wdt {
                let src_row = &w[(p * 64 + j) * cols..(p * 64 + j + 1) * cols];
                for (t, &v) in src_row.iter().enumerate() {
                    dst[t * 64 + j] = v;
                }
            }
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.k, self.n)
    }
}

/// [`sgemm_strided`] with a pre-packed right operand. Requires `n` to be a
/// multiple of 64 (all panel stores are full-width).
pub fn sgemm_packed(
    m: usize,
    n: usize,
    k: usize,
    a: &[f32],
    a_rstride: usize,
    a_kstride: usize,
    pb: &PackedB,
    c: &mut [f32],
    ldc: usize,
    epi: Epilogue<'_>,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert_eq!((pb.k, pb.n), (k, n), "packed operand dimension mismatch");
    assert_eq!(n % 64, 0, "packed path requires column panels of 64");
    assert!(k > 0, "empty inner dimension");
    assert!(
        (m - 1) * a_rstride + (k - 1) * a_kstride < a.len(),
        "left operand out of bounds"
    );
    assert!((m - 1) * ldc + n <= c.len(), "output out of bounds");
    match epi {
        Epilogue::Bias { bias }
        | Epilogue::BiasLeaky { bias, .. }
        | Epilogue::AddBias { bias }
        | Epilogue::AddBiasLeaky { bias, .. } => {
            assert_eq!(bias.len(), n, "bias length must match output columns")
        }
        _ => {}
    }
    assert!(available(), "sgemm_packed requires AVX-512");
    #[cfg(target_arch = "x86_64")]
    unsafe {
        for p in 0..n / 64 {
            let base = p * k * 64;
            for (ko, kl, be) in k_blocks(k, epi) {
                let panel = &pb.data[base + ko * 64..base + (ko + kl) * 64];
                let ab = &a[ko * a_kstride..];
                let mut i0 = 0;
                while i0 < m {
                    let mr = 6.min(m - i0);
                    match mr {
                        6 => tile_6x64(i0, p * 64, 0, kl, ab, a_rstride, a_kstride, panel, 64, c, ldc, be),
                        5 => tile::<5, 4>(i0, p * 64, 0, kl, ab, a_rstride, a_kstride, panel, 64, c, ldc, 0xffff, be),
                        4 => tile::<4, 4>(i0, p * 64, 0, kl, ab, a_rstride, a_kstride, panel, 64, c, ldc, 0xffff, be),
                        3 => tile::<3, 4>(i0, p * 64, 0, kl, ab, a_rstride, a_kstride, panel, 64, c, ldc, 0xffff, be),
                        2 => tile::<2, 4>(i0, p * 64, 0, kl, ab, a_rstride, a_kstride, panel, 64, c, ldc, 0xffff, be),
                        1 => tile::<1, 4>(i0, p * 64, 0, kl, ab, a_rstride, a_kstride, panel, 64, c, ldc, 0xffff, be),
                        _ => unreachable!(),
                    }
                    i0 += mr;
                }
            }
        }
    }
    #[cfg(not(target_arch = "x86_64"))]
    unreachable!();
}

/// `C[m x n] (+)= A[m x k] . B[k x n]`, all row-major.
///
/// The left operand is addressed as `a[r * a_rstride + t * a_kstride]`, so a
/// logically transposed `A` is expressed by swapping the two strides instead
/// of copying. `B` rows are read directly at stride `ldb`.
pub fn sgemm_strided(
    m: usize,
    n: usize,
    k: usize,
    a: &[f32],
    a_rstride: usize,
    a_kstride: usize,
    b: &[f32],
    ldb: usize,
    c: &mut [f32],
    ldc: usize,
    epi: Epilogue<'_>,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k > 0, "empty inner dimension");
    assert!(
        (m - 1) * a_rstride + (k - 1) * a_kstride < a.len(),
        "left operand out of bounds"
    );
    assert!((k - 1) * ldb + n <= b.len(), "right operand out of bounds");
    assert!((m - 1) * ldc + n <= c.len(), "output out of bounds");
    match epi {
        Epilogue::Bias { bias }
        | Epilogue::BiasLeaky { bias, .. }
        | Epilogue::AddBias { bias }
        | Epilogue::AddBiasLeaky { bias, .. } => {
            assert_eq!(bias.len(), n, "bias length must match output columns")
        }
        _ => {}
    }
    assert!(available(), "sgemm_strided requires AVX-512");
    #[cfg(target_arch = "x86_64")]
    unsafe {
        sgemm_avx512(m, n, k, a, a_rstride, a_kstride, b, ldb, c, ldc, epi)
    }
    #[cfg(not(target_arch = "x86_64"))]
    unreachable!();
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn sgemm_avx512(
    m: usize,
    n: usize,
    k: usize,
    a: &[f32],
    a_rstride: usize,
    a_kstride: usize,
    b: &[f32],
    ldb: usize,
    c: &mut [f32],
    ldc: usize,
    epi: Epilogue<'_>,
) {
    const MR: usize = 6;
    const NP: usize = 64;
    let mut n0 = 0;
    while n0 < n {
        let w = NP.min(n - n0);
        let nv = w.div_ceil(16);
        let rem = w % 16;
        let tail: u16 = if rem == 0 { 0xffff } else { (1u16 << rem) - 1 };
        for (ko, k, epi) in k_blocks(k, epi) {
            let a = &a[ko * a_kstride..];
            let b = &b[ko * ldb..];
        let mut i0 = 0;
        while i0 < m {
            let mr = MR.min(m - i0);
            match (mr, nv) {
                (6, 4) if tail == 0xffff => {
                    tile_6x64(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, epi)
                }
                (6, 4) => tile::<6, 4>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (6, 3) => tile::<6, 3>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (6, 2) => tile::<6, 2>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (6, 1) => tile::<6, 1>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (5, 4) => tile::<5, 4>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (5, 3) => tile::<5, 3>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (5, 2) => tile::<5, 2>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (5, 1) => tile::<5, 1>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (4, 4) => tile::<4, 4>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (4, 3) => tile::<4, 3>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (4, 2) => tile::<4, 2>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (4, 1) => tile::<4, 1>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (3, 4) => tile::<3, 4>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (3, 3) => tile::<3, 3>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (3, 2) => tile::<3, 2>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (3, 1) => tile::<3, 1>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (2, 4) => tile::<2, 4>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (2, 3) => tile::<2, 3>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (2, 2) => tile::<2, 2>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (2, 1) => tile::<2, 1>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (1, 4) => tile::<1, 4>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (1, 3) => tile::<1, 3>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (1, 2) => tile::<1, 2>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                (1, 1) => tile::<1, 1>(i0, n0, n0, k, a, a_rstride, a_kstride, b, ldb, c, ldc, tail, epi),
                _ => unreachable!(),
            }
            i0 += mr;
        }
        }
        n0 += w;
    }
}

/// The full 6 x 64 tile, written with one named accumulator per register so
/// the compiler cannot spill the working set; this instantiation carries
/// nearly all of the arithmetic.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn tile_6x64(
    i0: usize,
    n0: usize,
    b_n0: usize,
    k: usize,
    a: &[f32],
    a_rstride: usize,
    a_kstride: usize,
    b: &[f32],
    ldb: usize,
    c: &mut [f32],
    ldc: usize,
    epi: Epilogue<'_>,
) {
    let mut c00 = _mm512_setzero_ps();
    let mut c01 = _mm512_setzero_ps();
    let mut c02 = _mm512_setzero_ps();
    let mut c03 = _mm512_setzero_ps();
    let mut c10 = _mm512_setzero_ps();
    let mut c11 = _mm512_setzero_ps();
    let mut c12 = _mm512_setzero_ps();
    let mut c13 = _mm512_setzero_ps();
    let mut c20 = _mm512_setzero_ps();
    let mut c21 = _mm512_setzero_ps();
    let mut c22 = _mm512_setzero_ps();
    let mut c23 = _mm512_setzero_ps();
    let mut c30 = _mm512_setzero_ps();
    let mut c31 = _mm512_setzero_ps();
    let mut c32 = _mm512_setzero_ps();
    let mut c33 = _mm512_setzero_ps();
    let mut c40 = _mm512_setzero_ps();
    let mut c41 = _mm512_setzero_ps();
    let mut c42 = _mm512_setzero_ps();
    let mut c43 = _mm512_setzero_ps();
    let mut c50 = _mm512_setzero_ps();
    let mut c51 = _mm512_setzero_ps();
    let mut c52 = _mm512_setzero_ps();
    let mut c53 = _mm512_setzero_ps();
    let a_base = a.as_ptr().add(i0 * a_rstride);
    let mut b_row = b.as_ptr().add(b_n0);
    let mut a_off = 0usize;
    for _ in 0..k {
        let b0 = _mm512_loadu_ps(b_row);
        let b1 = _mm512_loadu_ps(b_row.add(16));
        let b2 = _mm512_loadu_ps(b_row.add(32));
        let b3 = _mm512_loadu_ps(b_row.add(48));
        macro_rules! fmas {
            ($r:literal, $a0:ident, $a1:ident, $a2:ident, $a3:ident) => {
                let av = _mm512_set1_ps(*a_base.add($r * a_rstride + a_off));
                $a0 = _mm512_fmadd_ps(av, b0, $a0);
                $a1 = _mm512_fmadd_ps(av, b1, $a1);
                $a2 = _mm512_fmadd_ps(av, b2, $a2);
                $a3 = _mm512_fmadd_ps(av, b3, $a3);
            };
        }
        fmas!(0, c00, c01, c02, c03);
        fmas!(1, c10, c11, c12, c13);
        fmas!(2, c20, c21, c22, c23);
        fmas!(3, c30, c31, c32, c33);
        fmas!(4, c40, c41, c42, c43);
        fmas!(5, c50, c51, c52, c53);
        a_off += a_kstride;
        b_row = b_row.add(ldb);
    }

    macro_rules! store_row {
        ($r:literal, $a0:ident, $a1:ident, $a2:ident, $a3:ident) => {
            let row = c.as_mut_ptr().add((i0 + $r) * ldc + n0);
            match epi {
                Epilogue::Store => {
                    _mm512_storeu_ps(row, $a0);
                    _mm512_storeu_ps(row.add(16), $a1);
                    _mm512_storeu_ps(row.add(32), $a2);
                    _mm512_storeu_ps(row.add(48), $a3);
                }
                Epilogue::Add => {
                    _mm512_storeu_ps(row, _mm512_add_ps($a0, _mm512_loadu_ps(row)));
                    _mm512_storeu_ps(row.add(16), _mm512_add_ps($a1, _mm512_loadu_ps(row.add(16))));
                    _mm512_storeu_ps(row.add(32), _mm512_add_ps($a2, _mm512_loadu_ps(row.add(32))));
                    _mm512_storeu_ps(row.add(48), _mm512_add_ps($a3, _mm512_loadu_ps(row.add(48))));
                }
                Epilogue::Bias { bias } => {
                    let bp = bias.as_ptr().add(n0);
                    _mm512_storeu_ps(row, _mm512_add_ps($a0, _mm512_loadu_ps(bp)));
                    _mm512_storeu_ps(row.add(16), _mm512_add_ps($a1, _mm512_loadu_ps(bp.add(16))));
                    _mm512_storeu_ps(row.add(32), _mm512_add_ps($a2, _mm512_loadu_ps(bp.add(32))));
                    _mm512_storeu_ps(row.add(48), _mm512_add_ps($a3, _mm512_loadu_ps(bp.add(48))));
                }
                Epilogue::BiasLeaky { bias, slope } => {
                    let bp = bias.as_ptr().add(n0);
                    let sv = _mm512_set1_ps(slope);
                    let z0 = _mm512_add_ps($a0, _mm512_loadu_ps(bp));
                    let z1 = _mm512_add_ps($a1, _mm512_loadu_ps(bp.add(16)));
                    let z2 = _mm512_add_ps($a2, _mm512_loadu_ps(bp.add(32)));
                    let z3 = _mm512_add_ps($a3, _mm512_loadu_ps(bp.add(48)));
                    _mm512_storeu_ps(row, _mm512_max_ps(z0, _mm512_mul_ps(sv, z0)));
                    _mm512_storeu_ps(row.add(16), _mm512_max_ps(z1, _mm512_mul_ps(sv, z1)));
                    _mm512_storeu_ps(row.add(32), _mm512_max_ps(z2, _mm512_mul_ps(sv, z2)));
                    _mm512_storeu_ps(row.add(48), _mm512_max_ps(z3, _mm512_mul_ps(sv, z3)));
                }
                Epilogue::AddBias { bias } => {
                    let bp = bias.as_ptr().add(n0);
                    let s0 = _mm512_add_ps($a0, _mm512_loadu_ps(row));
                    let s1 = _mm512_add_ps($a1, _mm512_loadu_ps(row.add(16)));
                    let s2 = _mm512_add_ps($a2, _mm512_loadu_ps(row.add(32)));
                    let s3 = _mm512_add_ps($a3, _mm512_loadu_ps(row.add(48)));
                    _mm512_storeu_ps(row, _mm512_add_ps(s0, _mm512_loadu_ps(bp)));
                    _mm512_storeu_ps(row.add(16), _mm512_add_ps(s1, _mm512_loadu_ps(bp.add(16))));
                    _mm512_storeu_ps(row.add(32), _mm512_add_ps(s2, _mm512_loadu_ps(bp.add(32))));
                    _mm512_storeu_ps(row.add(48), _mm512_add_ps(s3, _mm512_loadu_ps(bp.add(48))));
                }
                Epilogue::AddBiasLeaky { bias, slope } => {
                    let bp = bias.as_ptr().add(n0);
                    let sv = _mm512_set1_ps(slope);
                    let z0 = _mm512_add_ps(_mm512_add_ps($a0, _mm512_loadu_ps(row)), _mm512_loadu_ps(bp));
                    let z1 = _mm512_add_ps(_mm512_add_ps($a1, _mm512_loadu_ps(row.add(16))), _mm512_loadu_ps(bp.add(16)));
                    let z2 = _mm512_add_ps(_mm512_add_ps($a2, _mm512_loadu_ps(row.add(32))), _mm512_loadu_ps(bp.add(32)));
                    let z3 = _mm512_add_ps(_mm512_add_ps($a3, _mm512_loadu_ps(row.add(48))), _mm512_loadu_ps(bp.add(48)));
                    _mm512_storeu_ps(row, _mm512_max_ps(z0, _mm512_mul_ps(sv, z0)));
                    _mm512_storeu_ps(row.add(16), _mm512_max_ps(z1, _mm512_mul_ps(sv, z1)));
                    _mm512_storeu_ps(row.add(32), _mm512_max_ps(z2, _mm512_mul_ps(sv, z2)));
                    _mm512_storeu_ps(row.add(48), _mm512_max_ps(z3, _mm512_mul_ps(sv, z3)));
                }
            }
        };
    }
    store_row!(0, c00, c01, c02, c03);
    store_row!(1, c10, c11, c12, c13);
    store_row!(2, c20, c21, c22, c23);
    store_row!(3, c30, c31, c32, c33);
    store_row!(4, c40, c41, c42, c43);
    store_row!(5, c50, c51, c52, c53);
}

/// One `MR x (16 * NV)` output tile; the last vector lane set is masked by
/// `tail` so the same instantiation serves partial panels.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn tile<const MR: usize, const NV: usize>(
    i0: usize,
    n0: usize,
    b_n0: usize,
    k: usize,
    a: &[f32],
    a_rstride: usize,
    a_kstride: usize,
    b: &[f32],
    ldb: usize,
    c: &mut [f32],
    ldc: usize,
    tail: u16,
    epi: Epilogue<'_>,
) {
    let mut acc = [[_mm512_setzero_ps(); NV]; MR];
    let a_base = a.as_ptr().add(i0 * a_rstride);
    let mut b_row = b.as_ptr().add(b_n0);
    let mut a_off = 0usize;
    for _ in 0..k {
        let mut bv = [_mm512_setzero_ps(); NV];
        for v in 0..NV {
            bv[v] = if v + 1 == NV {
                _mm512_maskz_loadu_ps(tail, b_row.add(16 * v))
            } else {
                _mm512_loadu_ps(b_row.add(16 * v))
            };
        }
        for r in 0..MR {
            let av = _mm512_set1_ps(*a_base.add(r * a_rstride + a_off));
            for v in 0..NV {
                acc[r][v] = _mm512_fmadd_ps(av, bv[v], acc[r][v]);
            }
        }
        a_off += a_kstride;
        b_row = b_row.add(ldb);
    }

    for r in 0..MR {
        let row = c.as_mut_ptr().add((i0 + r) * ldc + n0);
        for v in 0..NV {
            let masked = v + 1 == NV && tail != 0xffff;
            let dst = row.add(16 * v);
            let mut out = acc[r][v];
            match epi {
                Epilogue::Store => {}
                Epilogue::Add => {
                    let prev = if masked {
                        _mm512_maskz_loadu_ps(tail, dst)
                    } else {
                        _mm512_loadu_ps(dst)
                    };
                    out = _mm512_add_ps(out, prev);
                }
                Epilogue::Bias { bias } => {
                    let bp = bias.as_ptr().add(n0 + 16 * v);
                    let bvv = if masked {
                        _mm512_maskz_loadu_ps(tail, bp)
                    } else {
                        _mm512_loadu_ps(bp)
                    };
                    out = _mm512_add_ps(out, bvv);
                }
                Epilogue::BiasLeaky { bias, slope } => {
                    let bp = bias.as_ptr().add(n0 + 16 * v);
                    let bvv = if masked {
                        _mm512_maskz_loadu_ps(tail, bp)
                    } else {
                        _mm512_loadu_ps(bp)
                    };
                    let z = _mm512_add_ps(out, bvv);
                    out = _mm512_max_ps(z, _mm512_mul_ps(_mm512_set1_ps(slope), z));
                }
                Epilogue::AddBias { bias } => {
                    let bp = bias.as_ptr().add(n0 + 16 * v);
                    let (prev, bvv) = if masked {
                        (_mm512_maskz_loadu_ps(tail, dst), _mm512_maskz_loadu_ps(tail, bp))
                    } else {
                        (_mm512_loadu_ps(dst), _mm512_loadu_ps(bp))
                    };
                    out = _mm512_add_ps(_mm512_add_ps(out, prev), bvv);
                }
                Epilogue::AddBiasLeaky { bias, slope } => {
                    let bp = bias.as_ptr().add(n0 + 16 * v);
                    let (prev, bvv) = if masked {
                        (_mm512_maskz_loadu_ps(tail, dst), _mm512_maskz_loadu_ps(tail, bp))
                    } else {
                        (_mm512_loadu_ps(dst), _mm512_loadu_ps(bp))
                    };
                    let z = _mm512_add_ps(_mm512_add_ps(out, prev), bvv);
                    out = _mm512_max_ps(z, _mm512_mul_ps(_mm512_set1_ps(slope), z));
                }
            }
            if masked {
                _mm512_mask_storeu_ps(dst, tail, out);
            } else {
                _mm512_storeu_ps(dst, out);
            }
        }
    }
}
