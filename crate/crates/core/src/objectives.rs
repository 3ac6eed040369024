//! Training objectives: noise matching for both branches, the exponential
//! suppression loss, and their weighted total.
//!
//! Squared norms are taken as per-element means so that the exponent of the
//! suppression loss stays of order one regardless of image size.

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Bound on the suppression-loss exponent.
pub const EXPONENT_CLAMP: f64 = 20.0;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_diff: f64,
    pub l_wfen: f64,
    pub l_total: f64,
    /// Exponents that hit the clamp in this batch.
    pub clamp_activations: usize,
}

fn same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("{what}: shapes {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `mse(eps_pred1, eps_true1) + mse(eps_pred2, eps_true2)`.
pub fn diffusion_loss(eps_true1: &Tensor, eps_pred1: &Tensor, eps_true2: &Tensor, eps_pred2: &Tensor) -> Result<f64> {
    same(eps_true1, eps_pred1, "branch 1 noise")?;
    same(eps_true2, eps_pred2, "branch 2 noise")?;
    Ok(mse(eps_pred1, eps_true1) + mse(eps_pred2, eps_true2))
}

/// `2^d1 + 2^d2` where `d_i` is the change in distance to `ref_i` caused by
/// subtracting the other branch's suppression signal, clamped to `[-20, 20]`.
pub fn wfen_loss(
    x_t1: &Tensor,
    x_t2: &Tensor,
    x_out1: &Tensor,
    x_out2: &Tensor,
    ref1: &Tensor,
    ref2: &Tensor,
) -> Result<f64> {
    wfen_loss_report(x_t1, x_t2, x_out1, x_out2, ref1, ref2).map(|(l, _)| l)
}

/// [`wfen_loss`] together with the number of clamped exponents.
pub fn wfen_loss_report(
    x_t1: &Tensor,
    x_t2: &Tensor,
    x_out1: &Tensor,
    x_out2: &Tensor,
    ref1: &Tensor,
    ref2: &Tensor,
) -> Result<(f64, usize)> {
    for t in [x_t2, x_out1, x_out2, ref1, ref2] {
        same(x_t1, t, "suppression loss inputs")?;
    }
    let d1 = mse(&x_t1.sub(x_out2)?, ref1) - mse(x_t1, ref1);
    let d2 = mse(&x_t2.sub(x_out1)?, ref2) - mse(x_t2, ref2);
    let clamps = [d1, d2].iter().filter(|d| d.abs() > EXPONENT_CLAMP).count();
    let e = |d: f64| d.clamp(-EXPONENT_CLAMP, EXPONENT_CLAMP).exp2();
    Ok((e(d1) + e(d2), clamps))
}

/// `gamma * l_diff + l_wfen`.
pub fn total_loss(l_diff: f64, l_wfen: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(invalid(format!("gamma must be positive, got {gamma}")));
    }
    Ok(gamma * l_diff + l_wfen)
}

/// Record the suppression loss on a graph. Returns the scalar loss and the
/// number of clamped exponents.
pub fn wfen_loss_graph(g: &mut Graph, x_t: [Var; 2], x_out: [Var; 2], refs: [Var; 2]) -> Result<(Var, usize)> {
    let mut terms = Vec::with_capacity(2);
    let mut clamps = 0;
    for (i, j) in [(0, 1), (1, 0)] {
        let moved = g.sub(x_t[i], x_out[j])?;
        let after = g.mse(moved, refs[i])?;
        let before = g.mse(x_t[i], refs[i])?;
        let d = g.sub(after, before)?;
        if g.value(d).item().abs() > EXPONENT_CLAMP {
            clamps += 1;
        }
        let d = g.clamp(d, -EXPONENT_CLAMP, EXPONENT_CLAMP);
        terms.push(g.exp2(d));
    }
    Ok((g.add(terms[0], terms[1])?, clamps))
}
