//! Dense row-major kernels.
//!
//! Every output element of [`gemm_acc`] is accumulated strictly in ascending
//! inner-index order with separately rounded multiplies and adds, so results
//! are bit-identical across the scalar and SIMD code paths.
//!
//! [`gemm_fast`] backs the layers. It uses the `matrixmultiply` packed
//! kernels: single-threaded and deterministic on a given CPU, with a blocked
//! summation order.

use std::sync::OnceLock;

const COL_BLOCK: usize = 256;
const INNER_BLOCK: usize = 256;
const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Level {
    Generic,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    #[cfg(target_arch = "x86_64")]
    Avx512,
}

fn level() -> Level {
    static LEVEL: OnceLock<Level> = OnceLock::new();
    *LEVEL.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx512f") {
                return Level::Avx512;
            }
            if std::is_x86_feature_detected!("avx2") {
                return Level::Avx2;
            }
        }
        Level::Generic
    })
}

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    match level() {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: the feature was detected at runtime.
        Level::Avx512 => unsafe { gemm_avx512(m, k, n, a, b, c) },
        #[cfg(target_arch = "x86_64")]
        // SAFETY: the feature was detected at runtime.
        Level::Avx2 => unsafe { gemm_avx2(m, k, n, a, b, c) },
        Level::Generic => gemm_blocked(m, k, n, a, b, c),
    }
}

/// Zero-filled buffer written eagerly. Lazily zeroed pages from the
/// allocator fault in one at a time inside hot loops, which is far slower on
/// some virtualised hosts.
pub fn zeroed(len: usize) -> Vec<f64> {
    vec![std::hint::black_box(0.0); len]
}

/// `c += op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
/// With `a_t` set, `a` is stored as `k×m`; with `b_t` set, `b` is `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_fast(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths are checked above and the strides stay inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain triple loop in i-k-j order. Used as a reference in tests and benches.
pub fn gemm_naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_avx512(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_blocked(m, k, n, a, b, c)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_blocked(m, k, n, a, b, c)
}

#[inline(always)]
fn gemm_blocked(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for j0 in (0..n).step_by(COL_BLOCK) {
        let j1 = (j0 + COL_BLOCK).min(n);
        for p0 in (0..k).step_by(INNER_BLOCK) {
            let p1 = (p0 + INNER_BLOCK).min(k);
            let mut i = 0;
            while i + TILE_ROWS <= m {
                row_tile(i, p0, p1, j0, j1, k, n, a, b, c);
                i += TILE_ROWS;
            }
            for r in i..m {
                let crow = &mut c[r * n + j0..r * n + j1];
                for p in p0..p1 {
                    let av = a[r * k + p];
                    let brow = &b[p * n + j0..p * n + j1];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn row_tile(
    i: usize,
    p0: usize,
    p1: usize,
    j0: usize,
    j1: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
) {
    let mut j = j0;
    while j + TILE_COLS <= j1 {
        let mut acc = [[0.0f64; TILE_COLS]; TILE_ROWS];
        for (r, row) in acc.iter_mut().enumerate() {
            row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + TILE_COLS]);
        }
        for p in p0..p1 {
            let bs: &[f64; TILE_COLS] = b[p * n + j..p * n + j + TILE_COLS].try_into().unwrap();
            for (r, row) in acc.iter_mut().enumerate() {
                let av = a[(i + r) * k + p];
                for l in 0..TILE_COLS {
                    row[l] += av * bs[l];
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            c[(i + r) * n + j..(i + r) * n + j + TILE_COLS].copy_from_slice(row);
        }
        j += TILE_COLS;
    }
    if j < j1 {
        for r in i..i + TILE_ROWS {
            let crow = &mut c[r * n + j..r * n + j1];
            for p in p0..p1 {
                let av = a[r * k + p];
                let brow = &b[p * n + j..p * n + j1];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// Row-major transpose of an `rows × cols` matrix.
pub fn transpose(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    assert_eq!(src.len(), rows * cols);
    let mut out = zeroed(src.len());
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for cc in c0..(c0 + B).min(cols) {
                    out[cc * rows + r] = src[r * cols + cc];
                }
            }
        }
    }
    out
}
