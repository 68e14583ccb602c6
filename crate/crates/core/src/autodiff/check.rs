//! Central finite-difference gradient verification.

use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Compare the tape's analytic gradient of `f` at `x` against central finite
/// differences, returning the max over coordinates of
/// |analytic − central| / (|analytic| + |central| + 1e-12).
///
/// `f` must build a scalar from the single bound input and be deterministic;
/// a second evaluation that does not reproduce the first bit-for-bit is
/// rejected.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }

    let eval = |data: &[f64], requires_grad: bool| -> Result<(Tape, Var, Var, f64)> {
        let mut tape = Tape::new();
        let v = tape.input(data.to_vec(), x.shape().to_vec(), requires_grad)?;
        let y = f(&mut tape, v)?;
        let value = tape.scalar_value(y)?;
        Ok((tape, v, y, value))
    };

    let (tape, v, y, value) = eval(x.data(), true)?;
    let (_, _, _, value2) = eval(x.data(), true)?;
    if value.to_bits() != value2.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "f returned {value} then {value2} for identical inputs"
        )));
    }

    let grads = tape.backward(y)?;
    let analytic: Vec<f64> = match grads.get(v) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.numel()],
    };

    let mut max_rel = 0.0_f64;
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let (_, _, _, plus) = eval(&probe, false)?;
        probe[i] = orig - eps;
        let (_, _, _, minus) = eval(&probe, false)?;
        probe[i] = orig;
        let central = (plus - minus) / (2.0 * eps);
        let rel = (analytic[i] - central).abs() / (analytic[i].abs() + central.abs() + 1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
