//! Numerical verification helpers: central finite differences against the
//! tape's analytic gradients.
//!
//! Kept independent of the backward implementation on purpose — the only
//! shared machinery is the forward pass, evaluated at perturbed inputs.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Analytic gradients of a scalar-valued tape program w.r.t. each input.
///
/// `f` receives a fresh tape and one `Var` per input tensor, and returns
/// the scalar loss variable.
pub fn analytic_grads<F>(inputs: &[Tensor], f: F) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            tape.leaf(&t)
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss);
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
        .collect();
    Ok((value, grads))
}

/// Central-difference gradients of the same program, one element at a time.
pub fn finite_diff_grads<F>(inputs: &[Tensor], f: F, step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss))
    };

    let mut grads = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let mut g = vec![0.0; inputs[which].numel()];
        for j in 0..inputs[which].numel() {
            let mut work: Vec<Tensor> = inputs.to_vec();
            let mut hi = inputs[which].data().to_vec();
            hi[j] += step;
            work[which].set_data(hi)?;
            let up = eval(&work)?;

            let mut lo = inputs[which].data().to_vec();
            lo[j] -= step;
            work[which].set_data(lo)?;
            let down = eval(&work)?;

            g[j] = (up - down) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Infinity-norm relative error between two gradient vectors:
/// `max_i |a_i - n_i| / max(scale, floor)` with `scale = max_i |a_i|,|n_i|`.
///
/// Normalizing by the vector scale (rather than per element) keeps
/// legitimately tiny components — rectifier zeros, pooling non-arg-maxes —
/// from dividing finite-difference noise by near-zero.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale < 1e-12 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

/// Run both gradient routes and return the worst relative error across all
/// inputs.
pub fn gradient_check<F>(inputs: &[Tensor], f: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, analytic) = analytic_grads(inputs, |t, v| f(t, v))?;
    let numeric = finite_diff_grads(inputs, |t, v| f(t, v), step)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_rel_error(a, n))
        .fold(0.0, f64::max))
}
