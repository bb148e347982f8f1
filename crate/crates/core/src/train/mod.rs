//! Two-phase training. Phase 1 is a warm start on the segmentation loss with
//! every α pinned at zero; in phase 2 the per-tap weights follow multiplier
//! ascent after every batch. The checkpoint with the best validation Dice
//! across both phases is kept.

mod audit;
mod eval;
mod report;
mod stats;

pub use audit::{composite_grad_check, CompositeGradCheck};
pub use eval::{dice_quantile, evaluate, mean_dice, partition_worst_off, MetricsRecord, WorstOffPartition};
pub use report::{history_header, write_history_csv, write_metrics_csv};
pub use stats::{one_sample_t_test, student_t_sf, TTest};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::SiteSample;
use crate::error::{Error, Result};
use crate::losses::{
    exch_pairing, pool_mask, total_loss, AlphaConfig, AlphaState, LossBreakdown, LossInputs, Penalty, Phase, Source,
};
use crate::rng::{derive, derived_rng};
use crate::tensor::{Tape, Tensor};
use crate::unet::{FeatureTap, UNet, UNetConfig};

const STREAM_SHUFFLE: u64 = 0x5348_5546;
const STREAM_PAIRING: u64 = 0x5041_4952;
const EVAL_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "seg_only")]
    SegOnly,
    #[serde(rename = "seg+fd")]
    SegFd,
    #[serde(rename = "seg+fd+exch")]
    SegFdExch,
    #[serde(rename = "seg+con_stub")]
    SegConStub,
    #[serde(rename = "seg+deeps_stub")]
    SegDeepsStub,
}

impl LossMode {
    pub const ALL: [LossMode; 5] =
        [LossMode::SegOnly, LossMode::SegFd, LossMode::SegFdExch, LossMode::SegConStub, LossMode::SegDeepsStub];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::SegOnly => "seg_only",
            LossMode::SegFd => "seg+fd",
            LossMode::SegFdExch => "seg+fd+exch",
            LossMode::SegConStub => "seg+con_stub",
            LossMode::SegDeepsStub => "seg+deeps_stub",
        }
    }

    pub fn needs_aux_heads(self) -> bool {
        self == LossMode::SegDeepsStub
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown loss mode {s:?} (expected one of seg_only, seg+fd, seg+fd+exch, seg+con_stub, seg+deeps_stub)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Set to 0 for plain SGD.
    pub momentum: f64,
    pub seed: u64,
    /// Adds the exchangeable term on top of `seg+fd`.
    pub exch_enabled: bool,
    pub loss_mode: LossMode,
    pub tau: f64,
    pub eta_alpha: f64,
    pub alpha_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AlphaConfig::default();
        TrainConfig {
            phase1_epochs: 40,
            phase2_epochs: 30,
            batch_size: 8,
            lr: 0.005,
            momentum: 0.9,
            seed: 0,
            exch_enabled: false,
            loss_mode: LossMode::SegOnly,
            tau: a.tau,
            eta_alpha: a.eta,
            alpha_max: a.alpha_max,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phase1_epochs == 0 {
            return Err(Error::config("phase1_epochs must be at least 1 (the warm start is mandatory)"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.eta_alpha >= 0.0) || !(self.alpha_max >= 0.0) || !self.tau.is_finite() {
            return Err(Error::config("eta_alpha and alpha_max must be non-negative and tau finite"));
        }
        if self.exch_enabled && !matches!(self.loss_mode, LossMode::SegFd | LossMode::SegFdExch) {
            return Err(Error::config(format!("exch_enabled requires an fd loss mode, not {}", self.loss_mode)));
        }
        Ok(())
    }

    pub fn penalty(&self) -> Penalty {
        match self.loss_mode {
            LossMode::SegOnly => Penalty::None,
            LossMode::SegFd if self.exch_enabled => Penalty::FdExch,
            LossMode::SegFd => Penalty::Fd,
            LossMode::SegFdExch => Penalty::FdExch,
            LossMode::SegConStub => Penalty::Contrast,
            LossMode::SegDeepsStub => Penalty::DeepSupervision,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.phase1_epochs + self.phase2_epochs
    }

    /// The network configuration this loss mode needs (aux heads for the
    /// deep-supervision baseline).
    pub fn model_config(&self, base: &UNetConfig) -> UNetConfig {
        UNetConfig { aux_heads: self.loss_mode.needs_aux_heads(), ..base.clone() }
    }
}

/// Per-epoch means of the loss parts, α at the end of the epoch and the
/// validation Dice of the weights at that point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: LossBreakdown,
    pub alpha: Vec<f64>,
    pub val_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub epoch: usize,
    pub step: usize,
    pub location: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best validation checkpoint; after an abort, the last good one.
    pub model: UNet,
    pub history: Vec<EpochRecord>,
    /// 0 when no epoch completed.
    pub best_epoch: usize,
    pub best_step: usize,
    pub best_val_dice: f64,
    pub alpha: AlphaState,
    /// Distinct warnings raised while building losses.
    pub warnings: Vec<String>,
    pub abort: Option<Abort>,
}

impl TrainOutcome {
    pub fn check(&self) -> Result<()> {
        match &self.abort {
            Some(a) => Err(Error::TrainingAborted { epoch: a.epoch, location: a.location.clone() }),
            None => Ok(()),
        }
    }
}

#[derive(Default)]
struct BreakdownMean {
    n: usize,
    sum: Option<LossBreakdown>,
}

impl BreakdownMean {
    fn add(&mut self, b: &LossBreakdown) {
        self.n += 1;
        let Some(s) = &mut self.sum else {
            self.sum = Some(b.clone());
            return;
        };
        s.total += b.total;
        s.seg += b.seg;
        s.dice += b.dice;
        s.bce += b.bce;
        for (a, v) in s.fd_per_tap.iter_mut().zip(&b.fd_per_tap) {
            *a += v;
        }
        if let (Some(a), Some(v)) = (&mut s.fd_exch_per_tap, &b.fd_exch_per_tap) {
            for (a, v) in a.iter_mut().zip(v) {
                *a += v;
            }
        }
        if let (Some(a), Some(v)) = (&mut s.stub_per_tap, &b.stub_per_tap) {
            for (a, v) in a.iter_mut().zip(v) {
                if let (Some(a), Some(v)) = (a, v) {
                    *a += v;
                }
            }
        }
        if b.warning.is_some() {
            s.warning = b.warning.clone();
        }
    }

    fn mean(self) -> LossBreakdown {
        let n = self.n.max(1) as f64;
        let mut s = self.sum.expect("epoch with no batches");
        for v in [&mut s.total, &mut s.seg, &mut s.dice, &mut s.bce] {
            *v /= n;
        }
        s.fd_per_tap.iter_mut().for_each(|v| *v /= n);
        if let Some(x) = &mut s.fd_exch_per_tap {
            x.iter_mut().for_each(|v| *v /= n);
        }
        if let Some(x) = &mut s.stub_per_tap {
            x.iter_mut().flatten().for_each(|v| *v /= n);
        }
        s
    }
}

fn check_dataset(model: &UNet, samples: &[SiteSample], what: &str) -> Result<()> {
    let Some(first) = samples.first() else {
        return Err(Error::config(format!("{what} set is empty")));
    };
    let (h, w) = first.size();
    model.config().check_input_size(h, w)?;
    if let Some(s) = samples.iter().find(|s| s.size() != (h, w)) {
        return Err(Error::config(format!("{what} sample {} is {:?}, expected {h}×{w}", s.id, s.size())));
    }
    Ok(())
}

/// Stacks the selected samples into `(images, masks)` batches.
pub fn stack_batch(samples: &[SiteSample], idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let imgs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &samples[i].image).collect();
    let masks: Vec<&Tensor<f32>> = idx.iter().map(|&i| &samples[i].mask).collect();
    Ok((Tensor::stack(&imgs)?, Tensor::stack(&masks)?))
}

/// Names where non-finite values first show up: the earliest tap whose
/// activation is non-finite, else the first offending graph node.
fn locate_non_finite(tape: &Tape<f32>, taps: &[FeatureTap]) -> String {
    let first = tape.first_non_finite();
    if let Some(tap) = taps.iter().find(|t| !tape.value(t.activation).is_finite()) {
        return match first {
            Some((node, op)) => format!("tap {} (first at node {node}, {op})", tap.name),
            None => format!("tap {}", tap.name),
        };
    }
    match first {
        Some((node, op)) => format!("loss graph after the last tap (node {node}, {op})"),
        None => "loss value".to_string(),
    }
}

/// Trains `model` on `train_set`, selecting the checkpoint by validation Dice.
/// A non-finite loss or parameter stops training; the outcome then carries
/// the last good checkpoint and an [`Abort`] naming where it happened.
pub fn train(config: &TrainConfig, model: UNet, train_set: &[SiteSample], val_set: &[SiteSample]) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(&model, train_set, "training")?;
    check_dataset(&model, val_set, "validation")?;
    if config.loss_mode.needs_aux_heads() && !model.config().aux_heads {
        return Err(Error::config(format!("{} needs a model built with aux_heads", config.loss_mode)));
    }
    let penalty = config.penalty();
    let factors = model.config().tap_factors();
    let n_taps = factors.len();
    let per_epoch = train_set.len().div_ceil(config.batch_size);
    let alpha_cfg = AlphaConfig {
        tau: config.tau,
        eta: config.eta_alpha,
        alpha_max: config.alpha_max,
        warmup_steps: config.phase1_epochs * per_epoch,
    };
    let mut alpha = AlphaState::new(n_taps, alpha_cfg);
    let mixed = train_set.iter().any(|s| s.source == Source::Base) && train_set.iter().any(|s| s.source == Source::Novel);

    let mut model = model;
    let mut velocity: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.value.data().len()]).collect();
    let mut shuffle_rng = derived_rng(config.seed, STREAM_SHUFFLE);
    let lr = config.lr as f32;
    let mu = config.momentum as f32;

    let mut out = TrainOutcome {
        model: model.clone(),
        history: Vec::with_capacity(config.total_epochs()),
        best_epoch: 0,
        best_step: 0,
        best_val_dice: f64::NEG_INFINITY,
        alpha: alpha.clone(),
        warnings: Vec::new(),
        abort: None,
    };
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.total_epochs() {
        let phase = if epoch <= config.phase1_epochs { Phase::Warmup } else { Phase::Active };
        order.shuffle(&mut shuffle_rng);
        let mut mean = BreakdownMean::default();
        for chunk in order.chunks(config.batch_size) {
            let (images, masks) = stack_batch(train_set, chunk)?;
            let pooled = factors.iter().map(|&f| pool_mask(&masks, f)).collect::<Result<Vec<_>>>()?;
            let pairing = if penalty == Penalty::FdExch {
                let tags: Option<Vec<Source>> = mixed.then(|| chunk.iter().map(|&i| train_set[i].source).collect());
                Some(exch_pairing(chunk.len(), tags.as_deref(), derive(config.seed, derive(STREAM_PAIRING, step as u64)))?)
            } else {
                None
            };

            let mut tape = Tape::<f32>::new();
            let x = tape.constant(images);
            let y = tape.constant(masks);
            let fwd = model.forward(&mut tape, x)?;
            let inputs = LossInputs {
                pred: fwd.prediction,
                target: y,
                taps: &fwd.taps,
                pooled_masks: &pooled,
                aux_predictions: &fwd.aux_predictions,
                pairing: pairing.as_ref(),
            };
            let (total, breakdown) = total_loss(&mut tape, inputs, &alpha, penalty)?;
            if !breakdown.total.is_finite() {
                out.abort = Some(Abort { epoch, step, location: locate_non_finite(&tape, &fwd.taps) });
                return Ok(out);
            }
            if let Some(w) = &breakdown.warning {
                if !out.warnings.contains(w) {
                    out.warnings.push(w.clone());
                }
            }
            tape.backward(total)?;
            for (i, (p, v)) in model.params_mut().iter_mut().zip(&mut velocity).enumerate() {
                let Some(g) = tape.grad(fwd.params[i]) else { continue };
                for ((w, v), &g) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *v = mu * *v + g;
                    *w -= lr * *v;
                }
            }
            if let Some(p) = model.params().iter().find(|p| !p.value.is_finite()) {
                out.abort = Some(Abort { epoch, step, location: format!("parameter {} after the update", p.name) });
                return Ok(out);
            }
            alpha.update(&breakdown.penalty_per_tap(n_taps, config.tau), step);
            mean.add(&breakdown);
            step += 1;
        }
        let val = evaluate(&model, val_set, EVAL_THRESHOLD, step)?;
        let val_dice = mean_dice(&val);
        out.history.push(EpochRecord { epoch, phase, loss: mean.mean(), alpha: alpha.alpha.clone(), val_dice });
        if val_dice > out.best_val_dice {
            out.best_val_dice = val_dice;
            out.best_epoch = epoch;
            out.best_step = step;
            out.model = model.clone();
        }
        out.alpha = alpha.clone();
    }
    Ok(out)
}
