//! Linear recurrences and the selective state-space scan.
//!
//! The recurrence `h_t = a_t * h_{t-1} + b_t` is evaluated with a two-level
//! blocked scan: independent local scans per block, a short carry pass across
//! block boundaries, then a fix-up. The blocks are independent, which is what
//! makes the scan parallelizable; here they run in order.

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

/// Block length used by [`linear_scan_blocked`] in the SSM kernels.
pub const SCAN_BLOCK: usize = 16;

/// Scan direction over the time axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Forward,
    Backward,
}

/// `out[t] = coef[t] * out[t-1] + inp[t]` with `out[-1] = 0`.
pub fn linear_scan_blocked(coef: &[f64], inp: &[f64], out: &mut [f64], block: usize) {
    let n = coef.len();
    debug_assert!(inp.len() == n && out.len() == n);
    let block = block.max(1);
    let mut prod = vec![0.0; n];
    // local scans
    for start in (0..n).step_by(block) {
        let end = (start + block).min(n);
        let mut h = 0.0;
        let mut p = 1.0;
        for t in start..end {
            h = coef[t] * h + inp[t];
            p *= coef[t];
            out[t] = h;
            prod[t] = p;
        }
    }
    // carries and fix-up
    let mut carry = 0.0;
    for start in (0..n).step_by(block) {
        let end = (start + block).min(n);
        if start > 0 {
            for t in start..end {
                out[t] += prod[t] * carry;
            }
        }
        carry = out[end - 1];
    }
}

/// Shapes of one selective scan call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsmDims {
    pub batch: usize,
    pub len: usize,
    pub width: usize,
    pub state: usize,
}

impl SsmDims {
    pub fn infer(
        u: &[usize],
        delta: &[usize],
        a_log: &[usize],
        b: &[usize],
        c: &[usize],
    ) -> Result<Self> {
        if u.len() != 3 || delta != u || a_log.len() != 2 || b != a_log || c != a_log || a_log[0] != u[2]
        {
            return Err(Error::shape(
                "ssm_scan",
                format!("u {u:?}, delta {delta:?}, A {a_log:?}, B {b:?}, C {c:?}"),
            ));
        }
        Ok(Self {
            batch: u[0],
            len: u[1],
            width: u[2],
            state: a_log[1],
        })
    }
}

#[inline]
fn discretize(dt: f64, a: f64, b: f64) -> (f64, f64) {
    let da = dt * a;
    (da.exp(), da.exp_m1() / a * b)
}

/// Zero-order-hold selective scan, forward in time.
///
/// `A = -exp(a_log)`; per channel `d` and state `s`:
/// `Ā_t = exp(Δ_t A)`, `B̄_t = (Δ_t A)^{-1}(exp(Δ_t A) - 1) Δ_t B`,
/// `h_t = Ā_t h_{t-1} + B̄_t u_t`, `y_t = Σ_s C h_t`.
pub fn ssm_forward(
    dims: &SsmDims,
    u: &[f64],
    delta: &[f64],
    a_log: &[f64],
    b: &[f64],
    c: &[f64],
) -> Vec<f64> {
    let SsmDims {
        batch,
        len,
        width,
        state,
    } = *dims;
    let mut y = vec![0.0; u.len()];
    let mut coef = vec![0.0; len];
    let mut inp = vec![0.0; len];
    let mut h = vec![0.0; len];
    for bi in 0..batch {
        for d in 0..width {
            for s in 0..state {
                let p = d * state + s;
                let a = -a_log[p].exp();
                for t in 0..len {
                    let ix = (bi * len + t) * width + d;
                    let (ab, bb) = discretize(delta[ix], a, b[p]);
                    coef[t] = ab;
                    inp[t] = bb * u[ix];
                }
                linear_scan_blocked(&coef, &inp, &mut h, SCAN_BLOCK);
                for t in 0..len {
                    y[(bi * len + t) * width + d] += c[p] * h[t];
                }
            }
        }
    }
    y
}

/// Gradients of [`ssm_forward`] with respect to every input.
pub struct SsmGrads {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a_log: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

pub fn ssm_backward(
    dims: &SsmDims,
    u: &[f64],
    delta: &[f64],
    a_log: &[f64],
    b: &[f64],
    c: &[f64],
    gy: &[f64],
) -> SsmGrads {
    let SsmDims {
        batch,
        len,
        width,
        state,
    } = *dims;
    let mut g = SsmGrads {
        u: vec![0.0; u.len()],
        delta: vec![0.0; u.len()],
        a_log: vec![0.0; a_log.len()],
        b: vec![0.0; b.len()],
        c: vec![0.0; c.len()],
    };
    let mut abar = vec![0.0; len];
    let mut bbar = vec![0.0; len];
    let mut inp = vec![0.0; len];
    let mut h = vec![0.0; len];
    let mut rcoef = vec![0.0; len];
    let mut rinp = vec![0.0; len];
    let mut rlam = vec![0.0; len];
    for bi in 0..batch {
        for d in 0..width {
            for s in 0..state {
                let p = d * state + s;
                let a = -a_log[p].exp();
                for t in 0..len {
                    let ix = (bi * len + t) * width + d;
                    let (ab, bb) = discretize(delta[ix], a, b[p]);
                    abar[t] = ab;
                    bbar[t] = bb;
                    inp[t] = bb * u[ix];
                }
                linear_scan_blocked(&abar, &inp, &mut h, SCAN_BLOCK);
                // adjoint: lam_t = gy_t c + abar_{t+1} lam_{t+1}, run as a forward scan in reversed time
                for tau in 0..len {
                    let t = len - 1 - tau;
                    rcoef[tau] = if t + 1 < len { abar[t + 1] } else { 0.0 };
                    rinp[tau] = gy[(bi * len + t) * width + d] * c[p];
                }
                linear_scan_blocked(&rcoef, &rinp, &mut rlam, SCAN_BLOCK);
                let mut ga = 0.0;
                let mut gb = 0.0;
                let mut gc = 0.0;
                for t in 0..len {
                    let ix = (bi * len + t) * width + d;
                    let lam = rlam[len - 1 - t];
                    let dt = delta[ix];
                    let h_prev = if t > 0 { h[t - 1] } else { 0.0 };
                    gc += gy[ix] * h[t];
                    g.u[ix] += lam * bbar[t];
                    let g_abar = lam * h_prev;
                    let g_bbar = lam * u[ix];
                    g.delta[ix] += g_abar * a * abar[t] + g_bbar * abar[t] * b[p];
                    let em1 = (dt * a).exp_m1();
                    ga += g_abar * dt * abar[t] + g_bbar * b[p] * (dt * abar[t] * a - em1) / (a * a);
                    gb += g_bbar * em1 / a;
                }
                g.a_log[p] += ga * a;
                g.b[p] += gb;
                g.c[p] += gc;
            }
        }
    }
    g
}

/// Tape-free selective scan on tensors, in either direction.
///
/// The backward direction runs the forward scan on the time-reversed input
/// and reverses the result.
pub fn selective_scan(
    u: &Tensor,
    delta: &Tensor,
    a_log: &Tensor,
    b: &Tensor,
    c: &Tensor,
    direction: Direction,
) -> Result<Tensor> {
    let dims = SsmDims::infer(u.shape(), delta.shape(), a_log.shape(), b.shape(), c.shape())?;
    let run = |u: &[f64], delta: &[f64]| {
        ssm_forward(&dims, u, delta, a_log.data(), b.data(), c.data())
    };
    let y = match direction {
        Direction::Forward => run(u.data(), delta.data()),
        Direction::Backward => {
            let (ur, dr) = (
                reverse(u.data(), &dims),
                reverse(delta.data(), &dims),
            );
            reverse(&run(&ur, &dr), &dims)
        }
    };
    let out = Tensor::new(u.shape(), y)?;
    if !out.is_finite() {
        return Err(Error::NumericFault { op: "ssm_scan" });
    }
    Ok(out)
}

fn reverse(x: &[f64], dims: &SsmDims) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let w = dims.width;
    for bi in 0..dims.batch {
        for t in 0..dims.len {
            let src = (bi * dims.len + t) * w;
            let dst = (bi * dims.len + dims.len - 1 - t) * w;
            out[dst..dst + w].copy_from_slice(&x[src..src + w]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rng::Rng;

    fn sequential(coef: &[f64], inp: &[f64]) -> Vec<f64> {
        let mut h = 0.0;
        coef.iter()
            .zip(inp)
            .map(|(a, b)| {
                h = a * h + b;
                h
            })
            .collect()
    }

    #[test]
    fn blocked_matches_sequential_for_all_block_sizes() {
        let mut rng = Rng::new(3, 0);
        for n in [1usize, 2, 7, 16, 33, 64] {
            let coef: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let inp: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let want = sequential(&coef, &inp);
            for block in [1usize, 3, 4, 16, 100] {
                let mut out = vec![0.0; n];
                linear_scan_blocked(&coef, &inp, &mut out, block);
                for (x, y) in out.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12, "n={n} block={block}");
                }
            }
        }
    }

    #[test]
    fn single_step_output_is_c_bbar_x() {
        let dims = SsmDims {
            batch: 1,
            len: 1,
            width: 1,
            state: 2,
        };
        let a_log = [0.0f64, 2f64.ln()];
        let b = [0.5, -1.5];
        let c = [2.0, 0.25];
        let (u, dt) = (1.7, 0.3);
        let y = ssm_forward(&dims, &[u], &[dt], &a_log, &b, &c);
        let mut want = 0.0;
        for s in 0..2 {
            let a = -a_log[s].exp();
            let bbar = ((dt * a).exp() - 1.0) / a * b[s];
            want += c[s] * bbar * u;
        }
        assert!((y[0] - want).abs() < 1e-14);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        assert!(SsmDims::infer(&[1, 4, 3], &[1, 4, 3], &[2, 5], &[2, 5], &[2, 5]).is_err());
        assert!(SsmDims::infer(&[1, 4, 3], &[1, 4, 2], &[3, 5], &[3, 5], &[3, 5]).is_err());
    }
}
