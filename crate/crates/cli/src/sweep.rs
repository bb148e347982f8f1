//! Sweep results: one row per (condition, seed, loss mode) cell, plus
//! per-condition aggregates.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use fdseg::train::LossMode;
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const STATUS_OK: &str = "ok";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Grid label, e.g. `1/16` or `0.05`.
    pub condition: String,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Empty unless `status` is `ok`.
    pub test_dice_base: Option<f64>,
    pub test_iou_base: Option<f64>,
    pub status: String,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub condition: String,
    pub loss_mode: LossMode,
    /// Cells with status `ok`.
    pub n: usize,
    pub mean_dice: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std_dice: f64,
    pub mean_iou: f64,
    pub std_iou: f64,
    /// Mean Dice at the first condition minus mean Dice here.
    pub dip: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

impl SweepResult {
    /// Conditions in order of first appearance.
    pub fn conditions(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.condition) {
                seen.push(r.condition.clone());
            }
        }
        seen
    }

    /// Loss modes in order of first appearance.
    pub fn modes(&self) -> Vec<LossMode> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.loss_mode) {
                seen.push(r.loss_mode);
            }
        }
        seen
    }

    pub fn cell(&self, condition: &str, mode: LossMode, seed: u64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.condition == condition && r.loss_mode == mode && r.seed == seed)
    }

    /// Dice of the `ok` cells at `condition` for `mode`, in row order.
    pub fn dice(&self, condition: &str, mode: LossMode) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.condition == condition && r.loss_mode == mode && r.is_ok())
            .filter_map(|r| r.test_dice_base)
            .collect()
    }

    pub fn aggregates(&self) -> Vec<Aggregate> {
        let conditions = self.conditions();
        let mut out = Vec::new();
        for mode in self.modes() {
            let first = mean_std(&self.dice(&conditions[0], mode)).0;
            for c in &conditions {
                let ok: Vec<&SweepRow> =
                    self.rows.iter().filter(|r| &r.condition == c && r.loss_mode == mode && r.is_ok()).collect();
                let dice: Vec<f64> = ok.iter().filter_map(|r| r.test_dice_base).collect();
                let iou: Vec<f64> = ok.iter().filter_map(|r| r.test_iou_base).collect();
                let (mean_dice, std_dice) = mean_std(&dice);
                let (mean_iou, std_iou) = mean_std(&iou);
                out.push(Aggregate {
                    condition: c.clone(),
                    loss_mode: mode,
                    n: ok.len(),
                    mean_dice,
                    std_dice,
                    mean_iou,
                    std_iou,
                    dip: first - mean_dice,
                });
            }
        }
        out
    }

    /// Every (condition, seed, mode) cell must appear exactly once.
    pub fn check_complete(&self) -> Result<(), UsageError> {
        let mut keys = BTreeSet::new();
        for r in &self.rows {
            if !keys.insert((r.condition.clone(), r.seed, r.loss_mode.as_str())) {
                return Err(UsageError(format!("cell ({}, seed {}, {}) appears twice", r.condition, r.seed, r.loss_mode)));
            }
        }
        let seeds: BTreeSet<u64> = self.rows.iter().map(|r| r.seed).collect();
        let expected = self.conditions().len() * seeds.len() * self.modes().len();
        if keys.len() != expected {
            return Err(UsageError(format!("sweep has {} cells, a full grid needs {expected}", keys.len())));
        }
        Ok(())
    }

    pub fn write_csv(&self, w: impl Write) -> anyhow::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Parses a sweep CSV; errors name the offending line.
    pub fn read_csv(r: impl Read, name: &str) -> anyhow::Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header_line = |e: &csv::Error| e.position().map_or(1, |p| p.line());
        let headers = rdr.headers().map_err(|e| UsageError(format!("{name}: line {}: {e}", header_line(&e))))?.clone();
        let expected = ["condition", "seed", "loss_mode", "test_dice_base", "test_iou_base", "status"];
        if headers.iter().ne(expected) {
            return Err(UsageError(format!("{name}: line 1: header must be `{}`", expected.join(","))).into());
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| UsageError(format!("{name}: line {}: {e}", header_line(&e))))?;
            let line = rec.position().map_or(0, |p| p.line());
            let row: SweepRow = rec.deserialize(Some(&headers)).map_err(|e| UsageError(format!("{name}: line {line}: {e}")))?;
            let bad = |v: Option<f64>| v.is_some_and(|x| !(0.0..=1.0).contains(&x));
            if bad(row.test_dice_base) || bad(row.test_iou_base) {
                return Err(UsageError(format!("{name}: line {line}: scores must lie in [0, 1]")).into());
            }
            if row.is_ok() && (row.test_dice_base.is_none() || row.test_iou_base.is_none()) {
                return Err(UsageError(format!("{name}: line {line}: an ok cell needs both scores")).into());
            }
            rows.push(row);
        }
        Ok(SweepResult { rows })
    }
}

pub fn write_aggregates(w: impl Write, aggs: &[Aggregate]) -> anyhow::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for a in aggs {
        out.serialize(a)?;
    }
    out.flush()?;
    Ok(())
}

/// `0`, `1`, `1/n` for unit fractions, otherwise the plain decimal.
pub fn fraction_label(f: f64) -> String {
    if f > 0.0 && f < 1.0 {
        let inv = 1.0 / f;
        if (inv - inv.round()).abs() < 1e-9 {
            return format!("1/{}", inv.round() as u64);
        }
    }
    format!("{f}")
}
