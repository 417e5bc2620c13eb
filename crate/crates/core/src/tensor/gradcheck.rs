//! Central finite-difference gradient checks.
//!
//! The numerical side only ever runs forward passes, so it stays independent
//! of the backward implementation it is used to verify.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::Real;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Norm-wise relative error `|analytic - numeric| / max(|analytic|, |numeric|)`
    /// per input.
    pub rel_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares the tape's gradients of the output built by `f` against central
/// differences with step `eps`.
///
/// A non-scalar output is checked through the sum of its elements; the
/// numerical side accumulates that sum in `f64` so single-precision rounding
/// of one large scalar does not swamp the difference quotient.
///
/// At most `max_coords` coordinates per input are probed (evenly strided).
pub fn check_gradients<F>(
    inputs: &[Tensor],
    f: F,
    eps: Real,
    max_coords: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data().iter().map(|&v| v as f64).sum())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() == 0 {
        return Err(Error::Invalid(
            "gradient check needs a non-empty output".into(),
        ));
    }
    let loss = if tape.value(out).numel() == 1 {
        out
    } else {
        tape.sum(out)?
    };
    tape.backward(loss)?;

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let analytic = tape
            .grad(*v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        for j in (0..n).step_by(stride) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps as f64);
            let a = analytic[j] as f64;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        rel_errors.push(if denom < 1e-12 {
            diff2.sqrt()
        } else {
            diff2.sqrt() / denom
        });
    }
    Ok(GradCheckReport { rel_errors })
}
