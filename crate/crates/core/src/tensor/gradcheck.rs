use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_FD_EPS: f64 = 1e-3;

/// Compares the tape gradient of a scalar function against central finite
/// differences, coordinate by coordinate.
///
/// `f` records its graph on the supplied tape, starting from the leaf it is
/// handed, and returns the scalar root. Runs entirely in `f64`. The result is
/// `max_i |a_i − n_i| / max(1e-8, |a_i| + |n_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |point: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.constant(point.clone());
        let root = f(&mut tape, leaf)?;
        tape.check_finite()?;
        if !tape.shape(root).is_scalar() {
            return Err(Error::contract("grad_check function must return a scalar"));
        }
        Ok(tape.item(root))
    };

    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let root = f(&mut tape, leaf)?;
    tape.check_finite()?;
    tape.backward(root)?;
    let analytic = tape.grad(leaf).unwrap_or_else(|| Tensor::zeros(x.shape()));
    if let Some(i) = analytic.data().iter().position(|g| !g.is_finite()) {
        return Err(Error::contract(format!("analytic gradient is non-finite at coordinate {i}")));
    }

    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
