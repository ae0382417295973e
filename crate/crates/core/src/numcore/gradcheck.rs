use crate::error::Result;
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;

/// Gradient magnitudes below this are compared on an absolute scale.
///
/// Central differences carry rounding noise of order `eps * |f| / h`, which
/// swamps a purely relative comparison for near-zero gradients.
pub const REL_ERR_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_err: Vec<f64>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    /// Indices of elements whose relative error reaches `tol`.
    pub fn failures(&self) -> Vec<usize> {
        self.rel_err
            .iter()
            .enumerate()
            .filter(|(_, e)| **e >= self.tol)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Compare the tape gradient of `f` at `x` against central differences
/// `(f(x+h) - f(x-h)) / 2h`, element by element.
///
/// `f` builds a scalar on the given tape from the variable holding `x`.
pub fn grad_check<F>(mut f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut eval = |point: Tensor| -> Result<f64> {
        let mut t = Tape::no_grad();
        let v = t.constant(point);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    let rel_err: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .collect();
    let max_rel_err = rel_err.iter().cloned().fold(0.0, f64::max);
    Ok(GradReport {
        analytic,
        numeric,
        rel_err,
        max_rel_err,
        tol,
    })
}
