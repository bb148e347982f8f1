use std::io::Write;

use super::{EpochRecord, MetricsRecord};
use crate::error::Result;
use crate::unet::TapName;

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// `epoch,phase,total,seg,dice_loss,bce,fd_<tap>...,[fd_exch_<tap>...,][stub_<tap>...,]alpha_<tap>...,val_dice`.
/// Discrepancy columns appear only when the history carries them.
pub fn history_header(history: &[EpochRecord], taps: &[TapName]) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "phase", "total", "seg", "dice_loss", "bce"].map(String::from).to_vec();
    let first = history.first().map(|r| &r.loss);
    if first.is_some_and(|l| !l.fd_per_tap.is_empty()) {
        h.extend(taps.iter().map(|t| format!("fd_{t}")));
    }
    if first.is_some_and(|l| l.fd_exch_per_tap.is_some()) {
        h.extend(taps.iter().map(|t| format!("fd_exch_{t}")));
    }
    if first.is_some_and(|l| l.stub_per_tap.is_some()) {
        h.extend(taps.iter().map(|t| format!("stub_{t}")));
    }
    h.extend(taps.iter().map(|t| format!("alpha_{t}")));
    h.push("val_dice".into());
    h
}

pub fn write_history_csv(w: impl Write, history: &[EpochRecord], taps: &[TapName]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(history_header(history, taps))?;
    for r in history {
        let l = &r.loss;
        let mut row = vec![r.epoch.to_string(), r.phase.to_string(), fmt(l.total), fmt(l.seg), fmt(l.dice), fmt(l.bce)];
        row.extend(l.fd_per_tap.iter().map(|&v| fmt(v)));
        if let Some(x) = &l.fd_exch_per_tap {
            row.extend(x.iter().map(|&v| fmt(v)));
        }
        if let Some(x) = &l.stub_per_tap {
            row.extend(x.iter().map(|v| v.map(fmt).unwrap_or_default()));
        }
        row.extend(r.alpha.iter().map(|&v| fmt(v)));
        row.push(fmt(r.val_dice));
        out.write_record(row)?;
    }
    out.flush()?;
    Ok(())
}

/// `sample_id,dice,iou,fd_last_decoder`.
pub fn write_metrics_csv(w: impl Write, records: &[MetricsRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["sample_id", "dice", "iou", "fd_last_decoder"])?;
    for r in records {
        out.write_record([r.sample_id.to_string(), fmt(r.dice), fmt(r.iou), fmt(r.fd_last_decoder)])?;
    }
    out.flush()?;
    Ok(())
}
