//! Finite-difference verification of the tape's analytic gradients.

use crate::error::{Error, Result};
use crate::tape::{Profile, Tape, TensorId};
use crate::tensor::{Real, Tensor};

/// Default central-difference step for the 64-bit profile.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Compare analytic gradients of a scalar-valued builder against central
/// finite differences, over every entry of every input. Returns the maximum
/// relative error `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F, B>(build: B, inputs: &[Tensor<F>], eps: F) -> Result<f64>
where
    F: Real,
    B: Fn(&mut Tape<F>, &[TensorId]) -> Result<TensorId>,
{
    grad_check_inner(build, inputs, eps, None)
}

/// Same as [`grad_check`], but with a backward fault injected for the named
/// op. Used as a negative control: a corrupted rule must be reported as a
/// large error, proving the checker has teeth.
pub fn grad_check_with_fault<F, B>(
    build: B,
    inputs: &[Tensor<F>],
    eps: F,
    fault_op: &'static str,
    fault_scale: f64,
) -> Result<f64>
where
    F: Real,
    B: Fn(&mut Tape<F>, &[TensorId]) -> Result<TensorId>,
{
    grad_check_inner(build, inputs, eps, Some((fault_op, fault_scale)))
}

fn grad_check_inner<F, B>(
    build: B,
    inputs: &[Tensor<F>],
    eps: F,
    fault: Option<(&'static str, f64)>,
) -> Result<f64>
where
    F: Real,
    B: Fn(&mut Tape<F>, &[TensorId]) -> Result<TensorId>,
{
    // Analytic pass.
    let mut tape = Tape::new(Profile::Test);
    if let Some((op, scale)) = fault {
        tape.inject_backward_fault(op, scale);
    }
    let mut ids = Vec::with_capacity(inputs.len());
    for t in inputs {
        let mut t = t.clone();
        t.requires_grad = true;
        ids.push(tape.leaf(&t)?);
    }
    let loss = build(&mut tape, &ids)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::InvalidArgument(
            "grad_check target must produce a scalar".into(),
        ));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<F>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![F::zero(); tape.value(id).len()])
        })
        .collect();

    // Forward-only evaluation at a perturbed point.
    let eval = |point: &[Tensor<F>]| -> Result<f64> {
        let mut tape = Tape::new(Profile::Test);
        let mut ids = Vec::with_capacity(point.len());
        for t in point {
            let mut t = t.clone();
            t.requires_grad = false;
            ids.push(tape.leaf(&t)?);
        }
        let out = build(&mut tape, &ids)?;
        Ok(tape.scalar_value(out).as_f64())
    };

    let mut point: Vec<Tensor<F>> = inputs.to_vec();
    let mut worst = 0.0f64;
    let eps_f64 = eps.as_f64();
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = point[ti].data()[j];
            point[ti].data_mut()[j] = orig + eps;
            let plus = eval(&point)?;
            point[ti].data_mut()[j] = orig - eps;
            let minus = eval(&point)?;
            point[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps_f64);
            let a = analytic[ti][j].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
