//! Tile-matrix (AMX) bf16 kernels for the widest training configurations.
//!
//! On machines with AMX-BF16 the large per-layer products run as 16x16 tile
//! multiplies on bf16 operands with f32 accumulation, which is several times
//! the AVX-512 fp32 rate. Master parameters, optimizer state and every
//! elementwise pass stay in f32; only GEMM operands are rounded to bf16
//! (round-to-nearest-even), so the precision cost is a small amount of
//! gradient noise.
//!
//! The tile instructions have no stable intrinsics yet, so the handful of
//! spots that need them (`ldtilecfg`, `tileloadd`, `tdpbf16ps`,
//! `tilestored`, `tilezero`) are emitted through inline assembly with a
//! fixed register assignment: tmm0-3 hold the 32x32 f32 accumulator block,
//! tmm4-5 the two row tiles of `A`, tmm6-7 the two column tiles of `B`.
//!
//! Layout conventions:
//! - `A`: row-major bf16, `lda` elements per row, row count a multiple
//!   of 32 and depth padded to a multiple of 32 (zero pads are exact).
//! - `B`: packed by [`pack_pairs`] into 32-column panels of k-pair tiles,
//!   the operand order `tdpbf16ps` consumes directly.
//! - `C`: row-major f32, written raw (bias/activation passes run after) or
//!   accumulated in-tile for gradient sums.

#![allow(clippy::too_many_arguments)]

#[cfg(target_arch = "x86_64")]
use core::arch::x86_64::*;
use std::cell::Cell;
use std::sync::OnceLock;

/// Tiles are 16 rows; a bf16 tile row is 32 values (64 bytes) and an f32
/// tile row 16 values. One reduction step therefore covers 32 k-values.
pub const KSTEP: usize = 32;

/// Rounds up to the tile reduction depth.
pub fn pad_k(k: usize) -> usize {
    k.div_ceil(KSTEP) * KSTEP
}

/// True when bf16 tile multiplies can run: CPU support plus a successful
/// dynamic-state permission request to the kernel.
pub fn available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        static OK: OnceLock<bool> = OnceLock::new();
        *OK.get_or_init(|| {
            if !std::arch::is_x86_feature_detected!("avx512bw") {
                return false;
            }
            // AMX-TILE and AMX-BF16 live in CPUID.7.0:EDX bits 24 and 22;
            // the detection macro does not know these names yet.
            let leaf7 = __cpuid_count(7, 0);
            if leaf7.edx & (1 << 24) == 0 || leaf7.edx & (1 << 22) == 0 {
                return false;
            }
            // Tile data is an opt-in XSAVE component on Linux.
            const ARCH_REQ_XCOMP_PERM: libc::c_long = 0x1023;
            const XFEATURE_XTILEDATA: libc::c_long = 18;
            let r = unsafe {
                libc::syscall(libc::SYS_arch_prctl, ARCH_REQ_XCOMP_PERM, XFEATURE_XTILEDATA)
            };
            r == 0
        })
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

#[cfg(target_arch = "x86_64")]
#[repr(C, align(64))]
struct TileConfig {
    palette: u8,
    start_row: u8,
    _reserved: [u8; 14],
    colsb: [u16; 16],
    rows: [u8; 16],
}

/// Loads the one palette this module uses (all eight tiles at the full
/// 16 x 64-byte shape) into the current thread's tile configuration.
#[cfg(target_arch = "x86_64")]
fn ensure_config() {
    thread_local! {
        static CONFIGURED: Cell<bool> = const { Cell::new(false) };
    }
    CONFIGURED.with(|c| {
        if !c.get() {
            let mut cfg = TileConfig {
                palette: 1,
                start_row: 0,
                _reserved: [0; 14],
                colsb: [0; 16],
                rows: [0; 16],
            };
            for t in 0..8 {
                cfg.rows[t] = 16;
                cfg.colsb[t] = 64;
            }
            unsafe {
                core::arch::asm!(
                    "ldtilecfg [{0}]",
                    in(reg) &cfg,
                    options(nostack, preserves_flags),
                );
            }
            c.set(true);
        }
    });
}

/// `C[m x n] (+)= A . B` with bf16 operands and f32 accumulation.
///
/// `a` is row-major bf16 with `lda` elements per row and at least
/// `chunks * 32` columns of valid-or-zero data; `pb` comes from
/// [`pack_pairs`] with the same chunk count. `m` and `n` must be multiples
/// of 32 — callers peel off remainder rows/columns onto the f32 kernels,
/// which is exact because rows and columns of a product are independent.
pub fn gemm(
    m: usize,
    n: usize,
    chunks: usize,
    a: &[u16],
    lda: usize,
    pb: &[u16],
    c: &mut [f32],
    ldc: usize,
    add_into: bool,
) {
    assert!(m % 32 == 0 && n % 32 == 0, "tile path needs 32-aligned output");
    assert!(chunks > 0, "empty reduction");
    assert!(lda >= chunks * KSTEP, "left operand rows shorter than the reduction");
    assert!((m - 1) * lda + chunks * KSTEP <= a.len(), "left operand out of bounds");
    assert_eq!(pb.len(), (n / 32) * chunks * 1024, "packed operand size mismatch");
    assert!((m - 1) * ldc + n <= c.len(), "output out of bounds");
    assert!(available(), "tile path not available");
    #[cfg(target_arch = "x86_64")]
    {
        ensure_config();
        unsafe {
            for p in 0..n / 32 {
                let panel = pb.as_ptr().add(p * chunks * 1024) as *const u8;
                for ib in 0..m / 32 {
                    let c_block = c.as_mut_ptr().add(ib * 32 * ldc + p * 32);
                    if add_into {
                        load_c(c_block, ldc);
                    } else {
                        core::arch::asm!(
                            "tilezero tmm0",
                            "tilezero tmm1",
                            "tilezero tmm2",
                            "tilezero tmm3",
                            options(nostack, preserves_flags),
                        );
                    }
                    let mut a0 = a.as_ptr().add(ib * 32 * lda) as *const u8;
                    let mut a1 = a.as_ptr().add((ib * 32 + 16) * lda) as *const u8;
                    let mut b = panel;
                    for _ in 0..chunks {
                        core::arch::asm!(
                            "tileloadd tmm4, [{a0} + {lda}]",
                            "tileloadd tmm5, [{a1} + {lda}]",
                            "tileloadd tmm6, [{b0} + {s64}]",
                            "tileloadd tmm7, [{b1} + {s64}]",
                            "tdpbf16ps tmm0, tmm4, tmm6",
                            "tdpbf16ps tmm1, tmm4, tmm7",
                            "tdpbf16ps tmm2, tmm5, tmm6",
                            "tdpbf16ps tmm3, tmm5, tmm7",
                            a0 = in(reg) a0,
                            a1 = in(reg) a1,
                            b0 = in(reg) b,
                            b1 = in(reg) b.add(1024),
                            lda = in(reg) lda * 2,
                            s64 = in(reg) 64usize,
                            options(nostack, preserves_flags),
                        );
                        a0 = a0.add(KSTEP * 2);
                        a1 = a1.add(KSTEP * 2);
                        b = b.add(2048);
                    }
                    store_c(c_block, ldc);
                }
            }
        }
    }
    #[cfg(not(target_arch = "x86_64"))]
    unreachable!();
}

#[cfg(target_arch = "x86_64")]
#[inline(always)]
unsafe fn load_c(c: *mut f32, ldc: usize) {
    core::arch::asm!(
        "tileloadd tmm0, [{c0} + {l4}]",
        "tileloadd tmm1, [{c1} + {l4}]",
        "tileloadd tmm2, [{c2} + {l4}]",
        "tileloadd tmm3, [{c3} + {l4}]",
        c0 = in(reg) c,
        c1 = in(reg) c.add(16),
        c2 = in(reg) c.add(16 * ldc),
        c3 = in(reg) c.add(16 * ldc + 16),
        l4 = in(reg) ldc * 4,
        options(nostack, preserves_flags),
    );
}

#[cfg(target_arch = "x86_64")]
#[inline(always)]
unsafe fn store_c(c: *mut f32, ldc: usize) {
    core::arch::asm!(
        "tilestored [{c0} + {l4}], tmm0",
        "tilestored [{c1} + {l4}], tmm1",
        "tilestored [{c2} + {l4}], tmm2",
        "tilestored [{c3} + {l4}], tmm3",
        c0 = in(reg) c,
        c1 = in(reg) c.add(16),
        c2 = in(reg) c.add(16 * ldc),
        c3 = in(reg) c.add(16 * ldc + 16),
        l4 = in(reg) ldc * 4,
        options(nostack, preserves_flags),
    );
}

/// Scalar round-to-nearest-even f32 -> bf16.
#[inline]
pub fn bf16_from_f32(x: f32) -> u16 {
    let u = x.to_bits();
    let lsb = (u >> 16) & 1;
    ((u.wrapping_add(0x7fff + lsb)) >> 16) as u16
}

/// The value a bf16 word denotes.
#[inline]
pub fn bf16_to_f32(h: u16) -> f32 {
    f32::from_bits((h as u32) << 16)
}

/// 16 lanes of the RNE conversion.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512bw")]
unsafe fn cvt16(v: __m512) -> __m256i {
    let u = _mm512_castps_si512(v);
    let lsb = _mm512_and_si512(_mm512_srli_epi32(u, 16), _mm512_set1_epi32(1));
    let r = _mm512_add_epi32(_mm512_add_epi32(u, _mm512_set1_epi32(0x7fff)), lsb);
    _mm512_cvtepi32_epi16(_mm512_srli_epi32(r, 16))
}

/// Converts `src` (`rows x cols` f32, row-major) into `dst` (`rows x colsp`
/// bf16); `colsp >= cols` and the pad columns are zeroed.
pub fn convert_rows(src: &[f32], rows: usize, cols: usize, colsp: usize, dst: &mut [u16]) {
    assert!(colsp >= cols);
    assert!(src.len() >= rows * cols && dst.len() >= rows * colsp);
    #[cfg(target_arch = "x86_64")]
    unsafe {
        convert_rows_avx(src, rows, cols, colsp, dst)
    }
    #[cfg(not(target_arch = "x86_64"))]
    for r in 0..rows {
        for j in 0..cols {
            dst[r * colsp + j] = bf16_from_f32(src[r * cols + j]);
        }
        dst[r * colsp + cols..r * colsp + colsp].fill(0);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512bw")]
unsafe fn convert_rows_avx(src: &[f32], rows: usize, cols: usize, colsp: usize, dst: &mut [u16]) {
    for r in 0..rows {
        let s = src.as_ptr().add(r * cols);
        let d = dst.as_mut_ptr().add(r * colsp);
        let mut j = 0;
        while j + 16 <= cols {
            let v = _mm512_loadu_ps(s.add(j));
            _mm256_storeu_si256(d.add(j) as *mut __m256i, cvt16(v));
            j += 16;
        }
        if j < cols {
            let mask = (1u16 << (cols - j)) - 1;
            let v = _mm512_maskz_loadu_ps(mask, s.add(j));
            _mm256_mask_storeu_epi16(d.add(j) as *mut _, mask, cvt16(v));
            j = cols;
        }
        while j < colsp {
            *d.add(j) = 0;
            j += 1;
        }
    }
}

/// Converts and transposes: `src` is `rows x cols` f32 row-major, `dst`
/// becomes `cols x rowsp` bf16 with zero row padding. The bulk runs as
/// 16x16 register-blocked transposes.
pub fn convert_transpose(src: &[f32], rows: usize, cols: usize, rowsp: usize, dst: &mut [u16]) {
    assert!(rowsp >= rows);
    assert!(src.len() >= rows * cols && dst.len() >= cols * rowsp);
    #[cfg(target_arch = "x86_64")]
    unsafe {
        convert_transpose_avx(src, rows, cols, rowsp, dst)
    }
    #[cfg(not(target_arch = "x86_64"))]
    for j in 0..cols {
        for r in 0..rows {
            dst[j * rowsp + r] = bf16_from_f32(src[r * cols + j]);
        }
        dst[j * rowsp + rows..j * rowsp + rowsp].fill(0);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512bw")]
unsafe fn convert_transpose_avx(src: &[f32], rows: usize, cols: usize, rowsp: usize, dst: &mut [u16]) {
    let rb = rows - rows % 16;
    let cb = cols - cols % 16;
    let mut r0 = 0;
    while r0 < rb {
        let mut j0 = 0;
        while j0 < cb {
            // 16x16 f32 block transpose: two 4-stage interleave rounds.
            let mut v = [_mm512_setzero_ps(); 16];
            for i in 0..16 {
                v[i] = _mm512_loadu_ps(src.as_ptr().add((r0 + i) * cols + j0));
            }
            let t = transpose16(v);
            for i in 0..16 {
                let d = dst.as_mut_ptr().add((j0 + i) * rowsp + r0);
                _mm256_storeu_si256(d as *mut __m256i, cvt16(t[i]));
            }
            j0 += 16;
        }
        for j in cb..cols {
            for i in 0..16 {
                dst[j * rowsp + r0 + i] = bf16_from_f32(src[(r0 + i) * cols + j]);
            }
        }
        r0 += 16;
    }
    for j in 0..cols {
        for r in rb..rows {
            dst[j * rowsp + r] = bf16_from_f32(src[r * cols + j]);
        }
        for r in rows..rowsp {
            dst[j * rowsp + r] = 0;
        }
    }
}

/// In-register 16x16 f32 transpose (unpack pairs, then 128-bit lane
/// shuffles, then lane permutes).
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn transpose16(v: [__m512; 16]) -> [__m512; 16] {
    let mut a = [_mm512_setzero_ps(); 16];
    for i in 0..8 {
        a[2 * i] = _mm512_unpacklo_ps(v[2 * i], v[2 * i + 1]);
        a[2 * i + 1] = _mm512_unpackhi_ps(v[2 * i], v[2 * i + 1]);
    }
    let mut b = [_mm512_setzero_ps(); 16];
    for i in 0..4 {
        for j in 0..2 {
            let x = a[4 * i + j];
            let y = a[4 * i + j + 2];
            b[4 * i + j] = _mm512_castpd_ps(_mm512_unpacklo_pd(
                _mm512_castps_pd(x),
                _mm512_castps_pd(y),
            ));
            b[4 * i + j + 2] = _mm512_castpd_ps(_mm512_unpackhi_pd(
                _mm512_castps_pd(x),
                _mm512_castps_pd(y),
            ));
        }
    }
    let mut c = [_mm512_setzero_ps(); 16];
    for i in 0..2 {
        for j in 0..4 {
            let x = b[8 * i + j];
            let y = b[8 * i + j + 4];
            c[8 * i + j] = _mm512_shuffle_f32x4(x, y, 0b1000_1000);
            c[8 * i + j + 4] = _mm512_shuffle_f32x4(x, y, 0b1101_1101);
        }
    }
    let mut t = [_mm512_setzero_ps(); 16];
    for j in 0..8 {
        let x = c[j];
        let y = c[j + 8];
        t[j] = _mm512_shuffle_f32x4(x, y, 0b1000_1000);
        t[j + 8] = _mm512_shuffle_f32x4(x, y, 0b1101_1101);
    }
    // The unpack stages emit columns 0,2,1,3 within each 4-group; swap the
    // low two index bits to restore natural order.
    let mut out = [_mm512_setzero_ps(); 16];
    for (i, dst) in out.iter_mut().enumerate() {
        *dst = t[(i & 12) | ((i & 1) << 1) | ((i >> 1) & 1)];
    }
    out
}

/// Plain f32 transpose (`rows x cols` -> `cols x rows`), register-blocked.
/// Stages transposed weight matrices ahead of [`pack_pairs`].
pub fn transpose_f32(src: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    assert!(src.len() >= rows * cols && dst.len() >= cols * rows);
    #[cfg(target_arch = "x86_64")]
    unsafe {
        transpose_f32_avx(src, rows, cols, dst)
    }
    #[cfg(not(target_arch = "x86_64"))]
    for j in 0..cols {
        for r in 0..rows {
            dst[j * rows + r] = src[r * cols + j];
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn transpose_f32_avx(src: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    let rb = rows - rows % 16;
    let cb = cols - cols % 16;
    let mut r0 = 0;
    while r0 < rb {
        let mut j0 = 0;
        while j0 < cb {
            let mut v = [_mm512_setzero_ps(); 16];
            for i in 0..16 {
                v[i] = _mm512_loadu_ps(src.as_ptr().add((r0 + i) * cols + j0));
            }
            let t = transpose16(v);
            for i in 0..16 {
                _mm512_storeu_ps(dst.as_mut_ptr().add((j0 + i) * rows + r0), t[i]);
            }
            j0 += 16;
        }
        for j in cb..cols {
            for i in 0..16 {
                dst[j * rows + r0 + i] = src[(r0 + i) * cols + j];
            }
        }
        r0 += 16;
    }
    for j in 0..cols {
        for r in rb..rows {
            dst[j * rows + r] = src[r * cols + j];
        }
    }
}

/// Packs `b_src` (`k x n` f32, row-major, `ldb` row stride, `n0..n0 + nw`
/// column window with `nw % 32 == 0`) into the pair-interleaved tile panels
/// [`gemm`] reads, padding the reduction to `chunks * 32` with zeros.
pub fn pack_pairs(b_src: &[f32], ldb: usize, k: usize, n0: usize, nw: usize, chunks: usize, dst: &mut [u16]) {
    assert!(nw % 32 == 0 && nw > 0);
    assert!(chunks * KSTEP >= k, "reduction longer than the packed depth");
    assert!(k > 0 && (k - 1) * ldb + n0 + nw <= b_src.len());
    assert_eq!(dst.len(), (nw / 32) * chunks * 1024, "destination size mismatch");
    #[cfg(target_arch = "x86_64")]
    unsafe {
        pack_pairs_avx(b_src, ldb, k, n0, nw, chunks, dst)
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        dst.fill(0);
        for p in 0..nw / 32 {
            for t in 0..k {
                for j in 0..32 {
                    let half = j / 16;
                    let tile = (p * chunks + t / KSTEP) * 1024 + half * 512;
                    let r = (t % KSTEP) / 2;
                    dst[tile + r * 32 + (j % 16) * 2 + (t & 1)] =
                        bf16_from_f32(b_src[t * ldb + n0 + p * 32 + j]);
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512bw")]
unsafe fn pack_pairs_avx(b_src: &[f32], ldb: usize, k: usize, n0: usize, nw: usize, chunks: usize, dst: &mut [u16]) {
    // Interleave map: output word i of a tile row pair takes word i/2 from
    // the even k-row (i even) or the odd k-row (i odd).
    let mut idx = [0u16; 32];
    for (i, x) in idx.iter_mut().enumerate() {
        *x = ((i as u16) >> 1) | (((i as u16) & 1) << 5);
    }
    let interleave = _mm512_loadu_si512(idx.as_ptr() as *const _);
    for p in 0..nw / 32 {
        let col = n0 + p * 32;
        let panel = dst.as_mut_ptr().add(p * chunks * 1024);
        let mut t = 0;
        while t < k {
            let even = _mm512_loadu_ps(b_src.as_ptr().add(t * ldb + col));
            let even_hi = _mm512_loadu_ps(b_src.as_ptr().add(t * ldb + col + 16));
            let (odd, odd_hi) = if t + 1 < k {
                (
                    _mm512_loadu_ps(b_src.as_ptr().add((t + 1) * ldb + col)),
                    _mm512_loadu_ps(b_src.as_ptr().add((t + 1) * ldb + col + 16)),
                )
            } else {
                (_mm512_setzero_ps(), _mm512_setzero_ps())
            };
            let e = _mm512_inserti64x4(_mm512_castsi256_si512(cvt16(even)), cvt16(even_hi), 1);
            let o = _mm512_inserti64x4(_mm512_castsi256_si512(cvt16(odd)), cvt16(odd_hi), 1);
            // Lower 32 words serve tile half 0 (columns 0..16), upper the
            // other half; both rows land contiguously.
            let lo = _mm512_permutex2var_epi16(e, interleave, o);
            let hi = _mm512_permutex2var_epi16(
                _mm512_castsi256_si512(_mm512_extracti64x4_epi64(e, 1)),
                interleave,
                _mm512_castsi256_si512(_mm512_extracti64x4_epi64(o, 1)),
            );
            let tile = (t / KSTEP) * 1024;
            let r = (t % KSTEP) / 2;
            _mm256_storeu_si256(panel.add(tile + r * 32) as *mut __m256i, _mm512_castsi512_si256(lo));
            _mm256_storeu_si256(
                panel.add(tile + r * 32 + 16) as *mut __m256i,
                _mm512_extracti64x4_epi64(lo, 1),
            );
            _mm256_storeu_si256(panel.add(tile + 512 + r * 32) as *mut __m256i, _mm512_castsi512_si256(hi));
            _mm256_storeu_si256(
                panel.add(tile + 512 + r * 32 + 16) as *mut __m256i,
                _mm512_extracti64x4_epi64(hi, 1),
            );
            t += 2;
        }
        // Zero the padding rows of the final chunk.
        let mut t = k.div_ceil(2) * 2;
        while t < chunks * KSTEP {
            let tile = (t / KSTEP) * 1024;
            let r = (t % KSTEP) / 2;
            std::ptr::write_bytes(panel.add(tile + r * 32), 0, 32);
            std::ptr::write_bytes(panel.add(tile + 512 + r * 32), 0, 32);
            t += 2;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fill(len: usize, seed: u32) -> Vec<f32> {
        let mut s = seed;
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(1664525).wrapping_add(1013904223);
                (s >> 8) as f32 / (1 << 24) as f32 - 0.5
            })
            .collect()
    }

    #[test]
    fn scalar_bf16_conversion_rounds_to_nearest_even() {
        assert_eq!(bf16_to_f32(bf16_from_f32(1.0)), 1.0);
        assert_eq!(bf16_to_f32(bf16_from_f32(-2.5)), -2.5);
        // Halfway between two bf16 values: 1.0 + 2^-9 rounds to even (1.0).
        let half = f32::from_bits(0x3f80_8000);
        assert_eq!(bf16_to_f32(bf16_from_f32(half)), 1.0);
        // Just above the midpoint rounds up.
        let above = f32::from_bits(0x3f80_8001);
        assert_eq!(bf16_to_f32(bf16_from_f32(above)), f32::from_bits(0x3f81_0000));
    }

    #[test]
    fn vector_conversion_matches_scalar() {
        let src = fill(37 * 5, 3);
        let mut dst = vec![0xffffu16; 37 * 8];
        convert_rows(&src, 37, 5, 8, &mut dst);
        for r in 0..37 {
            for j in 0..5 {
                assert_eq!(dst[r * 8 + j], bf16_from_f32(src[r * 5 + j]), "({r},{j})");
            }
            for j in 5..8 {
                assert_eq!(dst[r * 8 + j], 0);
            }
        }
    }

    #[test]
    fn plain_transpose_matches_scalar() {
        for &(rows, cols) in &[(48usize, 33usize), (192, 34), (17, 18)] {
            let src = fill(rows * cols, 11);
            let mut dst = vec![0f32; cols * rows];
            transpose_f32(&src, rows, cols, &mut dst);
            for j in 0..cols {
                for r in 0..rows {
                    assert_eq!(dst[j * rows + r], src[r * cols + j], "({rows},{cols}) at ({r},{j})");
                }
            }
        }
    }

    #[test]
    fn transpose_matches_scalar() {
        for &(rows, cols, rowsp) in &[(48usize, 33usize, 64usize), (16, 16, 16), (37, 50, 64)] {
            let src = fill(rows * cols, (rows + cols) as u32);
            let mut dst = vec![0xffffu16; cols * rowsp];
            convert_transpose(&src, rows, cols, rowsp, &mut dst);
            for j in 0..cols {
                for r in 0..rows {
                    assert_eq!(
                        dst[j * rowsp + r],
                        bf16_from_f32(src[r * cols + j]),
                        "({rows},{cols}) at ({r},{j})"
                    );
                }
                for r in rows..rowsp {
                    assert_eq!(dst[j * rowsp + r], 0);
                }
            }
        }
    }

    fn pack_reference(b: &[f32], ldb: usize, k: usize, n0: usize, nw: usize, chunks: usize) -> Vec<u16> {
        let mut dst = vec![0u16; (nw / 32) * chunks * 1024];
        for p in 0..nw / 32 {
            for t in 0..k {
                for j in 0..32 {
                    let tile = (p * chunks + t / KSTEP) * 1024 + (j / 16) * 512;
                    let r = (t % KSTEP) / 2;
                    dst[tile + r * 32 + (j % 16) * 2 + (t & 1)] =
                        bf16_from_f32(b[t * ldb + n0 + p * 32 + j]);
                }
            }
        }
        dst
    }

    #[test]
    fn pair_packing_matches_reference() {
        for &(k, n, n0, nw) in &[(64usize, 64usize, 0usize, 64usize), (34, 96, 32, 64), (7, 32, 0, 32)] {
            let b = fill(k * n, (k * n) as u32);
            let chunks = pad_k(k) / KSTEP;
            let mut dst = vec![0xffffu16; (nw / 32) * chunks * 1024];
            pack_pairs(&b, n, k, n0, nw, chunks, &mut dst);
            assert_eq!(dst, pack_reference(&b, n, k, n0, nw, chunks), "k={k} n0={n0}");
        }
    }

    #[test]
    fn tile_gemm_matches_rounded_reference() {
        if !available() {
            return;
        }
        let (m, n, k) = (64usize, 64usize, 50usize);
        let af = fill(m * k, 1);
        let bf = fill(k * n, 2);
        let kp = pad_k(k);
        let mut a = vec![0u16; m * kp];
        convert_rows(&af, m, k, kp, &mut a);
        let mut pb = vec![0u16; (n / 32) * (kp / KSTEP) * 1024];
        pack_pairs(&bf, n, k, 0, n, kp / KSTEP, &mut pb);
        let mut c = vec![0f32; m * n];
        gemm(m, n, kp / KSTEP, &a, kp, &pb, &mut c, n, false);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0f64;
                for t in 0..k {
                    s += bf16_to_f32(bf16_from_f32(af[i * k + t])) as f64
                        * bf16_to_f32(bf16_from_f32(bf[t * n + j])) as f64;
                }
                let got = c[i * n + j] as f64;
                assert!(
                    (got - s).abs() <= 1e-5 * s.abs().max(1.0),
                    "({i},{j}): {got} vs {s}"
                );
            }
        }
    }

    #[test]
    fn tile_gemm_accumulates_into_existing_output() {
        if !available() {
            return;
        }
        let (m, n, k) = (32usize, 32usize, 32usize);
        let af = fill(m * k, 5);
        let bf = fill(k * n, 6);
        let mut a = vec![0u16; m * k];
        convert_rows(&af, m, k, k, &mut a);
        let mut pb = vec![0u16; 1024];
        pack_pairs(&bf, n, k, 0, n, 1, &mut pb);
        let seed = fill(m * n, 7);
        let mut once = vec![0f32; m * n];
        gemm(m, n, 1, &a, k, &pb, &mut once, n, false);
        let mut acc = seed.clone();
        gemm(m, n, 1, &a, k, &pb, &mut acc, n, true);
        for i in 0..m * n {
            let want = seed[i] + once[i];
            assert!((acc[i] - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
    }
}
