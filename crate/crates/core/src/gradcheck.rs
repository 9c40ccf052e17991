//! Central finite-difference verification of tape gradients.

use crate::tensor::Tensor;
use crate::tol;
use crate::{Error, GradTape, Result, Var};

/// Evaluates a scalar function on a fresh tape.
fn eval<F>(f: &F, x: Tensor) -> Result<f64>
where
    F: Fn(&mut GradTape<'_>, Var) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let v = tape.param_owned(x);
    let out = f(&mut tape, v)?;
    scalar_of(&tape, out)
}

fn scalar_of(tape: &GradTape<'_>, out: Var) -> Result<f64> {
    tape.value(out).item().ok_or_else(|| {
        Error::Contract(alloc::format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.shape(out)
        ))
    })
}

/// Central differences `(f(x+εe_i) − f(x−εe_i)) / 2ε` for every element.
pub fn numeric_gradient<F>(f: &F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&mut GradTape<'_>, Var) -> Result<Var>,
{
    let mut out = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = eval(f, probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let lo = eval(f, probe.clone())?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    Ok(out)
}

/// Gradient of `f` at `x` as recorded by the tape.
pub fn analytic_gradient<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut GradTape<'_>, Var) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let v = tape.param_owned(x.clone());
    let out = f(&mut tape, v)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    Ok(grads.wrt(&tape, v))
}

/// Max over elements of `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut GradTape<'_>, Var) -> Result<Var>,
{
    if !(tol::FD_EPS_MIN..=tol::FD_EPS_MAX).contains(&eps) {
        return Err(Error::Contract(alloc::format!(
            "finite-difference step {eps} outside [{}, {}]",
            tol::FD_EPS_MIN,
            tol::FD_EPS_MAX
        )));
    }
    let analytic = analytic_gradient(&f, x)?;
    let numeric = numeric_gradient(&f, x, eps)?;
    Ok(relative_error(&analytic, &numeric))
}

pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}
