//! Finite-difference verification of analytic gradients.

use super::{NodeId, Tape};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Compares the analytic gradient of a scalar-valued tensor function with
/// central finite differences and returns the worst relative error.
///
/// `build` receives a fresh tape and the input leaf; it must return the
/// scalar output node.
pub fn grad_check<F>(build: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(point.clone(), false);
        let out = build(&mut tape, leaf)?;
        if tape.value(out).len() != 1 {
            return Err(invalid(format!(
                "grad_check requires a scalar-valued function, got shape {:?}",
                tape.value(out).shape()
            )));
        }
        tape.value(out).item()
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = build(&mut tape, leaf)?;
    if tape.value(out).len() != 1 {
        return Err(invalid(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    tape.backward(out)?;
    let analytic = tape.grad(leaf)?;

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
