//! Thin row-major wrapper over the system BLAS for the batched matrix
//! products that dominate training time.
//!
//! The library is loaded with `dlopen` at first use rather than linked at
//! build time, for one unglamorous reason: OpenBLAS picks its kernel family
//! in a load-time constructor by combining CPUID with the
//! `OPENBLAS_CORETYPE` environment variable. Virtualized CPUs frequently
//! report a blank model string, which lands on a generic kernel roughly 6x
//! slower than the AVX-512 one. Loading manually lets us pin the core type
//! from inside the process before the constructor runs; with build-time
//! linking the constructor fires before `main` and the choice is already
//! made.

use std::ffi::c_void;
use std::os::raw::{c_char, c_double, c_float, c_int};
use std::sync::OnceLock;

use num_traits::Float;

const CBLAS_ROW_MAJOR: c_int = 101;
const CBLAS_NO_TRANS: c_int = 111;
const CBLAS_TRANS: c_int = 112;

type SgemmFn = unsafe extern "C" fn(
    c_int, c_int, c_int, c_int, c_int, c_int,
    c_float, *const c_float, c_int, *const c_float, c_int,
    c_float, *mut c_float, c_int,
);
type DgemmFn = unsafe extern "C" fn(
    c_int, c_int, c_int, c_int, c_int, c_int,
    c_double, *const c_double, c_int, *const c_double, c_int,
    c_double, *mut c_double, c_int,
);
type SetThreadsFn = unsafe extern "C" fn(c_int);

struct Backend {
    sgemm: SgemmFn,
    dgemm: DgemmFn,
}

static BACKEND: OnceLock<Backend> = OnceLock::new();

fn load_backend() -> Backend {
    #[cfg(target_arch = "x86_64")]
    {
        let skylakex = is_x86_feature_detected!("avx512f")
            && is_x86_feature_detected!("avx512dq")
            && is_x86_feature_detected!("avx512vl")
            && is_x86_feature_detected!("avx512bw");
        if skylakex && std::env::var_os("OPENBLAS_CORETYPE").is_none() {
            std::env::set_var("OPENBLAS_CORETYPE", "SKYLAKEX");
        }
    }

    let names: [&[u8]; 3] = [
        b"libopenblas.so.0\0",
        b"libopenblas.so\0",
        b"libopenblasp-r0.3.20.so\0",
    ];
    let mut handle: *mut c_void = std::ptr::null_mut();
    for name in names {
        handle = unsafe { libc::dlopen(name.as_ptr() as *const c_char, libc::RTLD_NOW) };
        if !handle.is_null() {
            break;
        }
    }
    assert!(
        !handle.is_null(),
        "could not load libopenblas; install libopenblas-dev (Debian/Ubuntu) or equivalent"
    );

    unsafe {
        let sym = |name: &[u8]| {
            let p = libc::dlsym(handle, name.as_ptr() as *const c_char);
            assert!(
                !p.is_null(),
                "libopenblas is missing symbol {:?}",
                std::str::from_utf8(&name[..name.len() - 1]).unwrap_or("?")
            );
            p
        };
        let sgemm: SgemmFn = std::mem::transmute(sym(b"cblas_sgemm\0"));
        let dgemm: DgemmFn = std::mem::transmute(sym(b"cblas_dgemm\0"));

        // Cap BLAS threading: RF_THREADS when set, otherwise the available
        // cores. GEMM output tiles are computed independently, so results
        // stay bitwise deterministic for a fixed thread count.
        let set_threads = libc::dlsym(handle, b"openblas_set_num_threads\0".as_ptr() as *const c_char);
        if !set_threads.is_null() {
            let set_threads: SetThreadsFn = std::mem::transmute(set_threads);
            let threads = std::env::var("RF_THREADS")
                .ok()
                .and_then(|v| v.parse::<usize>().ok())
                .filter(|&n| n > 0)
                .unwrap_or_else(|| {
                    std::thread::available_parallelism()
                        .map(|n| n.get())
                        .unwrap_or(1)
                });
            set_threads(threads as c_int);
        }

        Backend { sgemm, dgemm }
    }
}

fn backend() -> &'static Backend {
    BACKEND.get_or_init(load_backend)
}

/// Prepares the BLAS backend (kernel selection, thread caps). Runs
/// automatically before the first matrix product; calling it eagerly at
/// startup (as the CLI does) is optional.
pub fn init() {
    let _ = backend();
}

/// Floating-point type usable by the network code: `f32` or `f64`.
///
/// All internal math is written against this trait; the image-scale
/// trainers instantiate it at `f32` for throughput while everything
/// gradient-checked runs at `f64`.
pub trait Scalar: Float + Default + Send + Sync + std::fmt::Debug + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = alpha * op(a) * op(b) + beta * c`, row-major.
    ///
    /// `op(a)` is `m x k` and `op(b)` is `k x n`; `lda`/`ldb`/`ldc` are the
    /// row strides of the *stored* matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        lda: usize,
        b: &[Self],
        ldb: usize,
        beta: Self,
        c: &mut [Self],
        ldc: usize,
    );
}

fn check_dims<T>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    c: &[T],
    ldc: usize,
) {
    let (a_rows, a_cols) = if trans_a { (k, m) } else { (m, k) };
    let (b_rows, b_cols) = if trans_b { (n, k) } else { (k, n) };
    assert!(lda >= a_cols.max(1), "lda {} too small for {} cols", lda, a_cols);
    assert!(ldb >= b_cols.max(1), "ldb {} too small for {} cols", ldb, b_cols);
    assert!(ldc >= n.max(1), "ldc {} too small for {} cols", ldc, n);
    assert!(a.len() >= a_rows * lda, "matrix a too short");
    assert!(b.len() >= b_rows * ldb, "matrix b too short");
    assert!(c.len() >= m * ldc, "matrix c too short");
}

fn trans_flag(t: bool) -> c_int {
    if t {
        CBLAS_TRANS
    } else {
        CBLAS_NO_TRANS
    }
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        lda: usize,
        b: &[Self],
        ldb: usize,
        beta: Self,
        c: &mut [Self],
        ldc: usize,
    ) {
        check_dims(trans_a, trans_b, m, n, k, a, lda, b, ldb, c, ldc);
        unsafe {
            (backend().sgemm)(
                CBLAS_ROW_MAJOR,
                trans_flag(trans_a),
                trans_flag(trans_b),
                m as c_int,
                n as c_int,
                k as c_int,
                alpha,
                a.as_ptr(),
                lda as c_int,
                b.as_ptr(),
                ldb as c_int,
                beta,
                c.as_mut_ptr(),
                ldc as c_int,
            );
        }
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        lda: usize,
        b: &[Self],
        ldb: usize,
        beta: Self,
        c: &mut [Self],
        ldc: usize,
    ) {
        check_dims(trans_a, trans_b, m, n, k, a, lda, b, ldb, c, ldc);
        unsafe {
            (backend().dgemm)(
                CBLAS_ROW_MAJOR,
                trans_flag(trans_a),
                trans_flag(trans_b),
                m as c_int,
                n as c_int,
                k as c_int,
                alpha,
                a.as_ptr(),
                lda as c_int,
                b.as_ptr(),
                ldb as c_int,
                beta,
                c.as_mut_ptr(),
                ldc as c_int,
            );
        }
    }
}
