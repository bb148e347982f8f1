use serde::{Deserialize, Serialize};

use super::stack_batch;
use crate::data::SiteSample;
use crate::error::{Error, Result};
use crate::losses::{fd_per_sample, feature_summary};
use crate::tensor::Tape;
use crate::unet::UNet;

const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub sample_id: u64,
    pub dice: f64,
    pub iou: f64,
    /// `ℒ_fd` of this sample at the last decoder tap.
    pub fd_last_decoder: f64,
    pub checkpoint_step: usize,
}

fn overlap(pred: &[f32], mask: &[f32], threshold: f32) -> (f64, f64) {
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&p, &m) in pred.iter().zip(mask) {
        // ties go to background
        let hit = p > threshold;
        let fg = m == 1.0;
        match (hit, fg) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fne == 0 {
        return (1.0, 1.0);
    }
    let dice = 2.0 * tp as f64 / (2 * tp + fp + fne) as f64;
    let iou = tp as f64 / (tp + fp + fne) as f64;
    (dice, iou)
}

/// Hard Dice/IoU per sample after thresholding at `threshold`, plus the
/// per-sample discrepancy at the final decoder tap.
pub fn evaluate(model: &UNet, samples: &[SiteSample], threshold: f64, checkpoint_step: usize) -> Result<Vec<MetricsRecord>> {
    if samples.is_empty() {
        return Err(Error::config("cannot evaluate an empty dataset"));
    }
    let mut records = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (images, masks) = stack_batch(samples, chunk)?;
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(images);
        let out = model.forward(&mut tape, x)?;
        let last = out.taps.last().expect("a U-Net always has taps");
        debug_assert_eq!(last.downsample_factor, 1);
        let summary = feature_summary(&mut tape, last.activation, &masks)?;
        let fd = fd_per_sample(&tape, &summary);
        let pred = tape.value(out.prediction);
        let plane = pred.shape().plane();
        for (k, &i) in chunk.iter().enumerate() {
            let p = &pred.data()[k * plane..(k + 1) * plane];
            let m = &masks.data()[k * plane..(k + 1) * plane];
            let (dice, iou) = overlap(p, m, threshold as f32);
            records.push(MetricsRecord { sample_id: samples[i].id, dice, iou, fd_last_decoder: fd[k], checkpoint_step });
        }
    }
    Ok(records)
}

pub fn mean_dice(records: &[MetricsRecord]) -> f64 {
    records.iter().map(|r| r.dice).sum::<f64>() / records.len() as f64
}

/// Linear-interpolated quantile of the per-sample Dice, `q ∈ [0, 1]`.
pub fn dice_quantile(records: &[MetricsRecord], q: f64) -> f64 {
    let mut d: Vec<f64> = records.iter().map(|r| r.dice).collect();
    d.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (d.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    d[lo] + (d[hi] - d[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstOffPartition {
    pub threshold: f64,
    pub worst: Vec<u64>,
    pub best: Vec<u64>,
    pub warning: Option<String>,
}

impl WorstOffPartition {
    pub fn is_empty(&self) -> bool {
        self.worst.is_empty()
    }

    /// Mean Dice of `ids` among `records`.
    pub fn mean_of(records: &[MetricsRecord], ids: &[u64]) -> f64 {
        let v: Vec<f64> = records.iter().filter(|r| ids.contains(&r.sample_id)).map(|r| r.dice).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// `worst` holds every record with Dice below `threshold`; `best` the same
/// number of top records. If fewer records sit at or above the threshold
/// than below it, `best` takes all of them and says so in `warning`.
pub fn partition_worst_off(records: &[MetricsRecord], threshold: f64) -> Result<WorstOffPartition> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("worst-off threshold {threshold} must lie in (0, 1)")));
    }
    let worst: Vec<u64> = records.iter().filter(|r| r.dice < threshold).map(|r| r.sample_id).collect();
    if worst.is_empty() || worst.len() == records.len() {
        let which = if worst.is_empty() { "no" } else { "every" };
        return Ok(WorstOffPartition {
            threshold,
            worst: Vec::new(),
            best: Vec::new(),
            warning: Some(format!("{which} sample has Dice below {threshold}; partition is empty")),
        });
    }
    let mut rest: Vec<&MetricsRecord> = records.iter().filter(|r| r.dice >= threshold).collect();
    rest.sort_by(|a, b| b.dice.total_cmp(&a.dice).then(a.sample_id.cmp(&b.sample_id)));
    let warning = (rest.len() < worst.len()).then(|| {
        format!("only {} samples at or above {threshold} for {} worst-off samples", rest.len(), worst.len())
    });
    let best = rest.iter().take(worst.len()).map(|r| r.sample_id).collect();
    Ok(WorstOffPartition { threshold, worst, best, warning })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, dice: f64) -> MetricsRecord {
        MetricsRecord { sample_id: id, dice, iou: dice / (2.0 - dice), fd_last_decoder: 0.0, checkpoint_step: 0 }
    }

    #[test]
    fn forced_partition_example() {
        let r = [rec(0, 0.2), rec(1, 0.5), rec(2, 0.9), rec(3, 0.95)];
        let p = partition_worst_off(&r, 0.4).unwrap();
        assert_eq!((p.worst, p.best, p.warning), (vec![0], vec![3], None));
    }

    #[test]
    fn empty_partitions_warn() {
        let r = [rec(0, 0.8), rec(1, 0.9)];
        let p = partition_worst_off(&r, 0.4).unwrap();
        assert!(p.is_empty() && p.warning.is_some());
        let p = partition_worst_off(&r, 0.95).unwrap();
        assert!(p.is_empty() && p.warning.is_some());
        assert!(partition_worst_off(&r, 1.0).is_err());
    }

    #[test]
    fn ties_at_threshold_count_as_background() {
        assert_eq!(overlap(&[0.5, 0.5], &[1.0, 0.0], 0.5), (0.0, 0.0));
        assert_eq!(overlap(&[0.9, 0.1], &[1.0, 0.0], 0.5), (1.0, 1.0));
    }

    #[test]
    fn quantile_interpolates() {
        let r: Vec<_> = (0..5).map(|i| rec(i, i as f64 / 4.0)).collect();
        assert_eq!(dice_quantile(&r, 0.25), 0.25);
        assert!((dice_quantile(&r, 0.1) - 0.1).abs() < 1e-12);
    }
}
