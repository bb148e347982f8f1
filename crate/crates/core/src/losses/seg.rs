use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const DICE_EPS: f64 = 1e-6;
/// Predictions are clamped into `[BCE_CLAMP, 1 − BCE_CLAMP]` before logs.
pub const BCE_CLAMP: f64 = 1e-7;

pub fn check_binary<T: Real>(mask: &Tensor<T>) -> Result<()> {
    match mask.data().iter().position(|&v| v != T::zero() && v != T::one()) {
        Some(i) => Err(Error::contract(format!(
            "target mask must be binary; found {:?} at flat index {i}",
            mask.data()[i]
        ))),
        None => Ok(()),
    }
}

fn check_pair<T: Real>(tape: &Tape<T>, pred: Var, target: Var) -> Result<()> {
    let (ps, ts) = (tape.shape(pred), tape.shape(target));
    if ps != ts {
        return Err(Error::contract(format!("prediction {ps} and target {ts} shapes differ")));
    }
    check_binary(tape.value(target))
}

/// Soft Dice loss over the whole batch: `1 − (2Σpy + ε)/(Σp + Σy + ε)`.
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    check_pair(tape, pred, target)?;
    let py = tape.mul(pred, target)?;
    let inter = tape.sum(py);
    let p = tape.sum(pred);
    let y = tape.sum(target);
    let num = tape.scale(inter, T::lit(2.0));
    let num = tape.add_scalar(num, T::lit(DICE_EPS));
    let den = tape.add(p, y)?;
    let den = tape.add_scalar(den, T::lit(DICE_EPS));
    let ratio = tape.div(num, den)?;
    let neg = tape.neg(ratio);
    Ok(tape.add_scalar(neg, T::one()))
}

/// Mean binary cross-entropy with clamped predictions.
pub fn bce_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    check_pair(tape, pred, target)?;
    let p = tape.clamp(pred, T::lit(BCE_CLAMP), T::one() - T::lit(BCE_CLAMP));
    let lp = tape.log(p);
    let q = tape.neg(p);
    let q = tape.add_scalar(q, T::one());
    let lq = tape.log(q);
    let inv = tape.value(target).map(|v| T::one() - v);
    let inv = tape.constant(inv);
    let a = tape.mul(target, lp)?;
    let b = tape.mul(inv, lq)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.neg(m))
}
