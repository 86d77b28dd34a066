//! Central-finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences and returns the maximum relative error over all
/// coordinates, defined as |analytic − numeric| / max(1, |numeric|).
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::contract(format!("grad_check step {step} <= 0")));
    }
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let y = f(&mut tape, v)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check target has shape {:?}, expected scalar",
            tape.value(y).shape()
        )));
    }
    let grads = tape.backward(y)?;
    let analytic = grads
        .by_var(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |data: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(Tensor::from_parts(x.shape().to_vec(), data.to_vec()), false);
        let out = f(&mut tape, leaf)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective at perturbed point".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut perturbed = x.data().to_vec();
    for i in 0..perturbed.len() {
        let orig = perturbed[i];
        perturbed[i] = orig + step;
        let f_plus = eval(&perturbed)?;
        perturbed[i] = orig - step;
        let f_minus = eval(&perturbed)?;
        perturbed[i] = orig;
        let numeric = (f_plus - f_minus) / (2.0 * step);
        let rel = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
