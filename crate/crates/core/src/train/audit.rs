use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate_site, SiteConfig};
use crate::error::{Error, Result};
use crate::losses::{exch_pairing, pool_mask, total_loss, AlphaConfig, AlphaState, LossInputs, Penalty, Source};
use crate::rng::derived_rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::unet::{UNet, UNetConfig};

/// Central differences at `eps` and `eps/2` that disagree by more than this
/// (relative) mean the step crossed a ReLU or max-pool kink.
const KINK_TOL: f64 = 1e-4;
/// Coordinates probed per parameter tensor (all of them for smaller tensors).
const PROBES_PER_TENSOR: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeGradCheck {
    /// Worst relative error over the smooth coordinates.
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Coordinates skipped because a kink lies within `eps`.
    pub kinks: usize,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Finite-difference check of the full training objective (U-Net forward,
/// Dice + BCE and α-weighted penalties at every tap) with respect to every
/// parameter tensor of a small network with random biases, in `f64`.
pub fn composite_grad_check(seed: u64, penalty: Penalty, eps: f64) -> Result<CompositeGradCheck> {
    let cfg = UNetConfig { depth: 2, base_channels: 2, aux_heads: penalty == Penalty::DeepSupervision, ..Default::default() };
    let mut model = UNet::init(cfg, seed)?;
    let mut r = derived_rng(seed, 0xa1fa);
    // Zero biases put ReLU inputs exactly on the kink in dead regions.
    for p in model.params_mut().iter_mut().filter(|p| p.name.ends_with(".bias")) {
        p.value.data_mut().iter_mut().for_each(|b| *b = r.gen_range(-0.1..0.1));
    }
    let site = SiteConfig::base().with_size(8, 8);
    let samples = generate_site(&site, 2, seed, Source::Base)?;
    let images = Tensor::stack(&[&samples[0].image.cast::<f64>(), &samples[1].image.cast::<f64>()])?;
    let masks = Tensor::stack(&[&samples[0].mask.cast::<f64>(), &samples[1].mask.cast::<f64>()])?;
    let factors = model.config().tap_factors();
    let pooled = factors.iter().map(|&f| pool_mask(&masks, f)).collect::<Result<Vec<_>>>()?;
    let pairing = exch_pairing(2, None, seed)?;
    let mut alpha = AlphaState::new(factors.len(), AlphaConfig::default());
    alpha.alpha = (0..factors.len()).map(|_| r.gen_range(0.2..1.0)).collect();

    let objective = |tape: &mut Tape<f64>, params: &[Tensor<f64>], track: bool| -> Result<(Var, Vec<Var>)> {
        let pv: Vec<Var> = params.iter().map(|p| if track { tape.param(p.clone()) } else { tape.constant(p.clone()) }).collect();
        let x = tape.constant(images.clone());
        let y = tape.constant(masks.clone());
        let out = model.forward_with(tape, x, pv.clone())?;
        let inputs = LossInputs {
            pred: out.prediction,
            target: y,
            taps: &out.taps,
            pooled_masks: &pooled,
            aux_predictions: &out.aux_predictions,
            pairing: Some(&pairing),
        };
        Ok((total_loss(tape, inputs, &alpha, penalty)?.0, pv))
    };
    let value = |params: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let (root, _) = objective(&mut tape, params, false)?;
        tape.check_finite()?;
        Ok(tape.item(root))
    };

    let mut params: Vec<Tensor<f64>> = model.params().iter().map(|p| p.value.cast::<f64>()).collect();
    let mut tape = Tape::new();
    let (root, pv) = objective(&mut tape, &params, true)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor<f64>> =
        pv.iter().zip(&params).map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape()))).collect();

    let mut report = CompositeGradCheck { max_rel_error: 0.0, coordinates: 0, kinks: 0 };
    for j in 0..params.len() {
        let n = params[j].data().len();
        let probes: Vec<usize> =
            if n <= PROBES_PER_TENSOR { (0..n).collect() } else { rand::seq::index::sample(&mut r, n, PROBES_PER_TENSOR).into_vec() };
        for i in probes {
            let orig = params[j].data()[i];
            let mut central = |h: f64| -> Result<f64> {
                params[j].data_mut()[i] = orig + h;
                let up = value(&params)?;
                params[j].data_mut()[i] = orig - h;
                let down = value(&params)?;
                params[j].data_mut()[i] = orig;
                Ok((up - down) / (2.0 * h))
            };
            let coarse = central(eps)?;
            let fine = central(eps / 2.0)?;
            report.coordinates += 1;
            if rel(coarse, fine) > KINK_TOL {
                report.kinks += 1;
                continue;
            }
            let a = analytic[j].data()[i];
            if !a.is_finite() {
                return Err(Error::contract(format!("analytic gradient of {} is non-finite", model.params()[j].name)));
            }
            report.max_rel_error = report.max_rel_error.max(rel(a, coarse));
        }
    }
    Ok(report)
}
