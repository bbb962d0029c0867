//! Central finite-difference oracle for tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn eval_scalar<F>(f: &F, at: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::inference();
    let out = f(tape.constant(at.clone()))?;
    let v = out.item()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::GradCheck(format!("function evaluated to {v}")))
    }
}

/// Largest `|analytic - numeric| / max(1, |analytic|)` over every coordinate
/// of `at`, using central differences with step `h`.
pub fn finite_diff_check<F>(f: F, at: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let coords: Vec<usize> = (0..at.len()).collect();
    finite_diff_check_coords(f, at, h, &coords)
}

/// Same as [`finite_diff_check`], restricted to the listed coordinates.
pub fn finite_diff_check_coords<F>(f: F, at: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::GradCheck(format!("step must be positive, got {h}")));
    }
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(at.clone());
        let out = f(x)?;
        if !out.value().is_scalar() {
            return Err(Error::GradCheck("function must be scalar-valued".into()));
        }
        if !out.item()?.is_finite() {
            return Err(Error::GradCheck("function is not finite at the base point".into()));
        }
        if out.requires_grad() {
            out.backward()?.get_or_zeros(x)
        } else {
            Tensor::zeros(at.shape())
        }
    };

    let mut worst = 0.0_f64;
    let mut probe = at.clone();
    for &i in coords {
        let base = at.data()[i];
        probe.data_mut()[i] = base + h;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = base - h;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = base;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
