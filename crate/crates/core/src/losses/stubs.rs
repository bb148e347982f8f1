//! Comparison baselines. These capture the mechanism class of a contrastive
//! foreground/background penalty and of deep supervision; they are not
//! reproductions of any particular published loss.

use super::discrepancy::MaskedFeatureSummary;
use super::seg::bce_loss;
use crate::error::Result;
use crate::tensor::{Real, Tape, Tensor, Var};

pub const CONTRAST_TEMPERATURE: f64 = 0.1;
const COS_EPS: f64 = 1e-8;

/// Per image, `softplus(cos(F_g, B_g) / T)`, averaged over the batch.
/// Minimizing pushes foreground and background means apart in angle.
pub fn contrast_stub<T: Real>(tape: &mut Tape<T>, summary: &MaskedFeatureSummary) -> Result<Var> {
    let (f, b) = (summary.fg_mean, summary.bg_mean);
    let fb = tape.mul(f, b)?;
    let dot = tape.sum_axes(fb, [false, true, true, true]);
    let ff = tape.mul(f, f)?;
    let nf = tape.sum_axes(ff, [false, true, true, true]);
    let nf = tape.add_scalar(nf, T::lit(COS_EPS));
    let bb = tape.mul(b, b)?;
    let nb = tape.sum_axes(bb, [false, true, true, true]);
    let nb = tape.add_scalar(nb, T::lit(COS_EPS));
    let den = tape.mul(nf, nb)?;
    let den = tape.sqrt(den);
    let cos = tape.div(dot, den)?;
    let z = tape.scale(cos, T::one() / T::lit(CONTRAST_TEMPERATURE));
    let e = tape.exp(z);
    let e = tape.add_scalar(e, T::one());
    let sp = tape.log(e);
    Ok(tape.mean(sp))
}

/// BCE of an auxiliary decoder head against the mask pooled to its resolution.
pub fn deep_supervision_stub<T: Real>(tape: &mut Tape<T>, aux_pred: Var, pooled_mask: &Tensor<T>) -> Result<Var> {
    let y = tape.constant(pooled_mask.clone());
    bce_loss(tape, aux_pred, y)
}
