use crate::error::Result;

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Maximum relative error between the tape gradient of `f` at `x` and a
/// central finite difference with step `h`.
///
/// `f` builds a scalar node from the leaf it is given; it is called once on
/// a gradient-carrying tape and twice per entry on plain forward tapes.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf)?;
    let grads = tape.backward(out)?;
    let analytic = grads.tensor(&tape, leaf);

    let eval = |values: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let leaf = t.leaf(values.clone(), false);
        let out = f(&mut t, leaf)?;
        Ok(t.value(out).item())
    };
    let fd = central_differences(&eval, x, h)?;
    Ok(max_rel_err(analytic.data(), &fd))
}

/// Central differences of a scalar function, entry by entry.
pub fn central_differences<E>(eval: &E, x: &Tensor, h: f64) -> Result<Vec<f64>>
where
    E: Fn(&Tensor) -> Result<f64>,
{
    let mut fd = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        fd.push((eval(&plus)? - eval(&minus)?) / (2.0 * h));
    }
    Ok(fd)
}

/// max_i |analytic_i - fd_i| / max(1, |analytic_i|).
///
/// Separated from [`grad_check`] so a deliberately corrupted analytic
/// gradient can be checked against finite differences as a negative control.
pub fn max_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    debug_assert_eq!(analytic.len(), fd.len());
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &d)| (a - d).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}
