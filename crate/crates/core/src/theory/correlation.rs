use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::MetricsRecord;

pub const MIN_RECORDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    /// `None` when either variable is constant.
    pub r: Option<f64>,
    pub n: usize,
    pub degenerate: bool,
}

/// `None` if either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let constant = |v: &[f64]| v.iter().all(|a| *a == v[0]);
    if x.is_empty() || constant(x) || constant(y) {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson r between per-sample Dice and the last-decoder discrepancy.
pub fn dice_fd_correlation(records: &[MetricsRecord]) -> Result<Correlation> {
    if records.len() < MIN_RECORDS {
        return Err(Error::config(format!("correlation needs at least {MIN_RECORDS} records, got {}", records.len())));
    }
    let dice: Vec<f64> = records.iter().map(|r| r.dice).collect();
    let fd: Vec<f64> = records.iter().map(|r| r.fd_last_decoder).collect();
    let r = pearson(&dice, &fd);
    Ok(Correlation { r, n: records.len(), degenerate: r.is_none() })
}
