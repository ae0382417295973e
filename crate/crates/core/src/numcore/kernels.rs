//! Row-major GEMM kernels. All of them accumulate into `c`.
//!
//! Every output element is produced by the same sequence of floating point
//! operations regardless of how rows are scheduled, so results are bitwise
//! stable.

/// `c[m×n] += A · b[k×n]` where `A[i, p] = a[i * rs + p * cs]`.
///
/// Each output element is `c + Σ_p A[i,p] b[p,j]`, accumulated from zero in
/// increasing `p` with fused multiply-adds, then added to `c`. The SIMD and
/// scalar paths perform identical operations per element.
fn gemm_strided(m: usize, k: usize, n: usize, a: &[f64], rs: usize, cs: usize, b: &[f64], c: &mut [f64]) {
    assert!(m == 0 || k == 0 || (m - 1) * rs + (k - 1) * cs < a.len());
    assert!(b.len() >= k * n && c.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: feature checked above; bounds asserted above.
            let (mf, nf) = unsafe { simd::tiles(m, k, n, a, rs, cs, b, c) };
            scalar_rest(m, k, n, a, rs, cs, b, c, mf, nf);
            return;
        }
    }
    scalar_rest(m, k, n, a, rs, cs, b, c, 0, 0);
}

/// Scalar path for everything outside the `mf × nf` tiled corner.
#[allow(clippy::too_many_arguments)]
fn scalar_rest(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rs: usize,
    cs: usize,
    b: &[f64],
    c: &mut [f64],
    mf: usize,
    nf: usize,
) {
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        let j0 = if i < mf { nf } else { 0 };
        if j0 == n {
            continue;
        }
        let acc = &mut acc[j0..n];
        acc.iter_mut().for_each(|x| *x = 0.0);
        for p in 0..k {
            let av = a[i * rs + p * cs];
            let brow = &b[p * n + j0..p * n + n];
            for (x, &bv) in acc.iter_mut().zip(brow) {
                *x = av.mul_add(bv, *x);
            }
        }
        for (cv, x) in c[i * n + j0..i * n + n].iter_mut().zip(acc.iter()) {
            *cv += x;
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    const MR: usize = 6;
    const NR: usize = 16;

    /// Full 6×16 tiles; returns the tiled extent `(rows, cols)`.
    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    pub(super) unsafe fn tiles(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rs: usize,
        cs: usize,
        b: &[f64],
        c: &mut [f64],
    ) -> (usize, usize) {
        let mf = m - m % MR;
        let nf = n - n % NR;
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let cp = c.as_mut_ptr();
        for i0 in (0..mf).step_by(MR) {
            for j0 in (0..nf).step_by(NR) {
                let mut acc = [_mm512_setzero_pd(); 2 * MR];
                for p in 0..k {
                    let b0 = _mm512_loadu_pd(bp.add(p * n + j0));
                    let b1 = _mm512_loadu_pd(bp.add(p * n + j0 + 8));
                    for r in 0..MR {
                        let av = _mm512_set1_pd(*ap.add((i0 + r) * rs + p * cs));
                        acc[2 * r] = _mm512_fmadd_pd(av, b0, acc[2 * r]);
                        acc[2 * r + 1] = _mm512_fmadd_pd(av, b1, acc[2 * r + 1]);
                    }
                }
                for r in 0..MR {
                    let cr = cp.add((i0 + r) * n + j0);
                    _mm512_storeu_pd(cr, _mm512_add_pd(_mm512_loadu_pd(cr), acc[2 * r]));
                    let cr = cr.add(8);
                    _mm512_storeu_pd(cr, _mm512_add_pd(_mm512_loadu_pd(cr), acc[2 * r + 1]));
                }
            }
        }
        (mf, nf)
    }
}

/// c[m×n] += a[m×k] · b[k×n]
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    gemm_strided(m, k, n, a, k, 1, b, c);
}

/// c[m×n] += a[m×k] · b[n×k]ᵀ
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let bt = transpose(n, k, b);
    gemm_nn(m, k, n, a, &bt, c);
}

/// c[m×n] += a[k×m]ᵀ · b[k×n]
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    gemm_strided(m, k, n, a, 1, m, b, c);
}

/// Transpose a rows×cols row-major block.
pub fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}
