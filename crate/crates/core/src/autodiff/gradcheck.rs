//! Central-difference gradient oracle.

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest [`relative_error`] over paired coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps <= 1e-2 {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "grad_check eps must lie in (0, 1e-2], got {eps}"
        )))
    }
}

/// Central differences of a scalar function of a flat vector.
pub fn numeric_gradient<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_eps(eps)?;
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe)?;
        probe[i] = x[i] - eps;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// Compares the tape gradient of `f` at `x` against central differences and
/// returns the largest relative error over the coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let shape = x.shape().to_vec();
    let mut tape = Tape::new();
    let v = tape.variable(&shape, x.data().to_vec())?;
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape.grad(v).expect("variable leaf keeps a gradient").to_vec();
    let numeric = numeric_gradient(
        |probe| {
            let mut t = Tape::new();
            let v = t.constant(&shape, probe.to_vec())?;
            let out = f(&mut t, v)?;
            Ok(t.item(out))
        },
        x.data(),
        eps,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}
