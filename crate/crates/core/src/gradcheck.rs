//! Finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference estimate of the gradient of `f` at `params`.
///
/// Only evaluates `f`; it never looks at a tape, which keeps it usable as an
/// independent oracle.
pub fn central_differences<F>(f: F, params: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be > 0, got {step}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let v = f(ps)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("objective returned a non-finite value".into()))
        }
    };
    eval(params)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].numel()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * step);
        }
        out.push(Tensor::from_parts_unchecked(params[p].shape().to_vec(), g));
    }
    Ok(out)
}

/// `max |a - n| / max(1, |n|)` over every coordinate.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> Result<f64> {
    if analytic.len() != numeric.len() {
        return Err(Error::shape("gradient lists differ in length"));
    }
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        a.same_shape(n, "gradient check")?;
        for (x, y) in a.data().iter().zip(n.data()) {
            worst = worst.max((x - y).abs() / y.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Builds `build` on a fresh tape with `params` registered as parameters
/// and returns the scalar value plus analytic gradients.
pub fn value_and_grad<F>(build: &F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|&v| grads.wrt(v)).collect()))
}

/// Compares tape gradients of `build` against central differences and
/// returns the maximum relative error.
pub fn finite_difference_check<F>(build: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, analytic) = value_and_grad(&build, params)?;
    let numeric = central_differences(
        |ps| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
            let out = build(&mut tape, &vars)?;
            tape.value(out).item()
        },
        params,
        step,
    )?;
    max_relative_error(&analytic, &numeric)
}
