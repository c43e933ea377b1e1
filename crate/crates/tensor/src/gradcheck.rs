//! Central finite-difference verification of tape gradients.

use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

pub const DEFAULT_STEP: f64 = 1e-4;

/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_scalar<F: Real, Func>(f: &Func, x: Tensor<F>) -> Result<F>
where
    Func: Fn(&mut Tape<F>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x, true);
    let out = f(&mut tape, xv)?;
    let t = tape.value(out);
    if t.numel() != 1 {
        return Err(TensorError::Contract(format!("gradient check needs a scalar output, got {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numerical_gradient<F: Real, Func>(f: &Func, x: &Tensor<F>, step: f64) -> Result<Vec<f64>>
where
    Func: Fn(&mut Tape<F>, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(TensorError::Contract(format!("step must be positive, got {step}")));
    }
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += F::lit(step);
        let mut minus = x.clone();
        minus.data_mut()[i] -= F::lit(step);
        let fp = eval_scalar(f, plus)?.as_f64();
        let fm = eval_scalar(f, minus)?.as_f64();
        out.push((fp - fm) / (2.0 * step));
    }
    Ok(out)
}

/// Largest relative error between the tape gradient of scalar `f` at `x`
/// and central differences with the given step.
pub fn grad_check<F: Real, Func>(f: Func, x: &Tensor<F>, step: f64) -> Result<f64>
where
    Func: Fn(&mut Tape<F>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    if tape.value(out).numel() != 1 {
        return Err(TensorError::Contract(format!(
            "gradient check needs a scalar output, got {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;
    let analytic = grads.get(xv).map(<[F]>::to_vec).unwrap_or_else(|| vec![F::zero(); x.numel()]);
    let numeric = numerical_gradient(&f, x, step)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a.as_f64(), n))
        .fold(0.0, f64::max))
}
