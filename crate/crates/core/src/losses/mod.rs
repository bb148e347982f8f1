//! Training objectives: segmentation loss, per-tap discrepancy penalties and
//! the α schedule that weights them.

mod alpha;
mod discrepancy;
mod seg;
mod stubs;

pub use alpha::{AlphaConfig, AlphaState, Phase};
pub use discrepancy::{
    exch_pairing, fd_exch_loss, fd_loss, fd_per_sample, feature_summary, offset_partners, pool_mask,
    shuffled_partners, MaskedFeatureSummary, Pairing, Source, FD_FLOOR, MASK_EPS,
};
pub use seg::{bce_loss, check_binary, dice_loss, BCE_CLAMP, DICE_EPS};
pub use stubs::{contrast_stub, deep_supervision_stub, CONTRAST_TEMPERATURE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::unet::{FeatureTap, TapName};

/// Which auxiliary term, if any, is weighted by α at each tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Penalty {
    None,
    Fd,
    FdExch,
    Contrast,
    DeepSupervision,
}

impl Penalty {
    pub fn has_fd(self) -> bool {
        matches!(self, Penalty::Fd | Penalty::FdExch)
    }

    pub fn has_stub(self) -> bool {
        matches!(self, Penalty::Contrast | Penalty::DeepSupervision)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub seg: f64,
    pub dice: f64,
    pub bce: f64,
    /// Empty unless the penalty includes the discrepancy loss.
    pub fd_per_tap: Vec<f64>,
    pub fd_exch_per_tap: Option<Vec<f64>>,
    /// Baseline penalty per tap; `None` where the baseline has no term.
    pub stub_per_tap: Option<Vec<Option<f64>>>,
    pub warning: Option<String>,
}

impl LossBreakdown {
    /// The quantity α multiplies at each tap; taps without a term report `tau`
    /// so they exert no drive on α.
    pub fn penalty_per_tap(&self, taps: usize, tau: f64) -> Vec<f64> {
        (0..taps)
            .map(|l| {
                if let Some(stub) = &self.stub_per_tap {
                    return stub[l].unwrap_or(tau);
                }
                match self.fd_per_tap.get(l) {
                    Some(fd) => fd + self.fd_exch_per_tap.as_ref().map_or(0.0, |x| x[l]),
                    None => tau,
                }
            })
            .collect()
    }

    /// `seg + Σ_l α_l·penalty_l`, recomputed from the recorded parts.
    pub fn recombine(&self, alpha: &[f64]) -> f64 {
        let mut total = self.seg;
        let taps = alpha.len();
        for (l, p) in self.penalty_per_tap(taps, 0.0).into_iter().enumerate() {
            let present = match &self.stub_per_tap {
                Some(stub) => stub[l].is_some(),
                None => !self.fd_per_tap.is_empty(),
            };
            if present && alpha[l] != 0.0 {
                total += alpha[l] * p;
            }
        }
        total
    }
}

/// Everything [`total_loss`] reads off one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a, T: Real> {
    pub pred: Var,
    pub target: Var,
    pub taps: &'a [FeatureTap],
    /// Ground truth pooled to each tap's resolution, in tap order.
    pub pooled_masks: &'a [Tensor<T>],
    /// Auxiliary decoder predictions (deep-supervision baseline only).
    pub aux_predictions: &'a [Var],
    /// Partner indices for the exchangeable term.
    pub pairing: Option<&'a Pairing>,
}

/// `ℒ_seg + Σ_l α_l·(ℒ_fd,l [+ ℒ_fd,l^exch])`, or the baseline penalty in
/// place of the discrepancy terms. Taps whose α is exactly zero contribute no
/// graph nodes, so the warm-up total *is* the segmentation loss.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    inputs: LossInputs<'_, T>,
    state: &AlphaState,
    penalty: Penalty,
) -> Result<(Var, LossBreakdown)> {
    let LossInputs { pred, target, taps, pooled_masks, aux_predictions, pairing } = inputs;
    if taps.len() != pooled_masks.len() {
        return Err(Error::contract(format!("{} taps but {} pooled masks", taps.len(), pooled_masks.len())));
    }
    if state.alpha.len() != taps.len() {
        return Err(Error::contract(format!("{} alpha entries for {} taps", state.alpha.len(), taps.len())));
    }
    let dice = dice_loss(tape, pred, target)?;
    let bce = bce_loss(tape, pred, target)?;
    let seg = tape.add(dice, bce)?;

    let mut terms: Vec<Option<Var>> = vec![None; taps.len()];
    let mut fd_per_tap = Vec::new();
    let mut fd_exch_per_tap = None;
    let mut stub_per_tap = None;
    let mut warning = None;
    match penalty {
        Penalty::None => {}
        Penalty::Fd | Penalty::FdExch => {
            let mut exch_vals = Vec::new();
            for (l, (tap, mask)) in taps.iter().zip(pooled_masks).enumerate() {
                let summary = feature_summary(tape, tap.activation, mask)?;
                let fd = fd_loss(tape, &summary)?;
                fd_per_tap.push(tape.item(fd).as_f64());
                let mut term = fd;
                if penalty == Penalty::FdExch {
                    let p = pairing.ok_or_else(|| Error::contract("exchangeable penalty needs a pairing"))?;
                    warning = p.warning.clone();
                    let x = fd_exch_loss(tape, &summary, &p.partners)?;
                    exch_vals.push(tape.item(x).as_f64());
                    term = tape.add(fd, x)?;
                }
                terms[l] = Some(term);
            }
            if penalty == Penalty::FdExch {
                fd_exch_per_tap = Some(exch_vals);
            }
        }
        Penalty::Contrast => {
            let mut vals = Vec::new();
            for (l, (tap, mask)) in taps.iter().zip(pooled_masks).enumerate() {
                let summary = feature_summary(tape, tap.activation, mask)?;
                let c = contrast_stub(tape, &summary)?;
                vals.push(Some(tape.item(c).as_f64()));
                terms[l] = Some(c);
            }
            stub_per_tap = Some(vals);
        }
        Penalty::DeepSupervision => {
            let mut vals = vec![None; taps.len()];
            let mut aux = aux_predictions.iter();
            for (l, (tap, mask)) in taps.iter().zip(pooled_masks).enumerate() {
                if let TapName::Dec(_) = tap.name {
                    let a = aux.next().ok_or_else(|| Error::contract("deep supervision needs one aux head per decoder tap"))?;
                    let d = deep_supervision_stub(tape, *a, mask)?;
                    vals[l] = Some(tape.item(d).as_f64());
                    terms[l] = Some(d);
                }
            }
            stub_per_tap = Some(vals);
        }
    }

    let mut total = seg;
    for (term, &a) in terms.iter().zip(&state.alpha) {
        if let Some(term) = term {
            if a != 0.0 {
                let weighted = tape.scale(*term, T::lit(a));
                total = tape.add(total, weighted)?;
            }
        }
    }
    let breakdown = LossBreakdown {
        total: tape.item(total).as_f64(),
        seg: tape.item(seg).as_f64(),
        dice: tape.item(dice).as_f64(),
        bce: tape.item(bce).as_f64(),
        fd_per_tap,
        fd_exch_per_tap,
        stub_per_tap,
        warning,
    };
    Ok((total, breakdown))
}
