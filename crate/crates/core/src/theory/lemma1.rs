use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derived_rng;
use crate::tensor::{Shape, Tensor};

const LOG_FLOOR: f64 = 1e-12;
const SLACK: f64 = 1e-6;

/// Both sides of the Dice bound for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    /// `‖Σ_ij F·(2ỹ − 1)‖₂ / ‖Σ_ij F‖₂`, sums per channel.
    pub fd_normalized: f64,
    pub dice: f64,
    /// `Σŷ / Σy`.
    pub k: f64,
    /// `−log(Dice·(k+1))`.
    pub lhs: f64,
    /// `−log(fd_normalized)`.
    pub rhs: f64,
    pub gap: f64,
    pub holds: bool,
}

fn neg_log(v: f64) -> f64 {
    -v.max(LOG_FLOOR).ln()
}

/// Evaluates the bound on a non-negative feature map `features` `(1, h, w, c)`
/// with ground truth `y_true` and prediction `y_pred` (both `(1, h, w, 1)`).
/// The discrepancy uses the ground-truth mask as ỹ, the Dice and `k` use the
/// prediction against the ground truth.
pub fn lemma1_check(features: &Tensor<f64>, y_true: &Tensor<f64>, y_pred: &Tensor<f64>) -> Result<Lemma1Report> {
    let s = features.shape();
    let m = Shape::new(1, s.h, s.w, 1);
    if s.n != 1 || y_true.shape() != m || y_pred.shape() != m {
        return Err(Error::contract(format!(
            "lemma 1 needs a (1,h,w,c) map and (1,h,w,1) masks, got {s}, {}, {}",
            y_true.shape(),
            y_pred.shape()
        )));
    }
    if features.data().iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::contract("lemma 1 assumes non-negative (post-ReLU) features"));
    }
    let sum_y = y_true.sum();
    if !(sum_y > 0.0) {
        return Err(Error::contract("lemma 1 needs a non-empty ground-truth foreground"));
    }
    let mut signed = vec![0.0; s.c];
    let mut total = vec![0.0; s.c];
    for (px, &yt) in y_true.data().iter().enumerate() {
        for k in 0..s.c {
            let f = features.data()[px * s.c + k];
            signed[k] += f * (2.0 * yt - 1.0);
            total[k] += f;
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = norm(&total);
    let fd_normalized = if denom > 0.0 { norm(&signed) / denom } else { 0.0 };
    let sum_pred = y_pred.sum();
    let inter: f64 = y_true.data().iter().zip(y_pred.data()).map(|(a, b)| a * b).sum();
    let dice = 2.0 * inter / (sum_pred + sum_y);
    let k = sum_pred / sum_y;
    let lhs = neg_log(dice * (k + 1.0));
    let rhs = neg_log(fd_normalized);
    let gap = rhs - lhs;
    Ok(Lemma1Report { fd_normalized, dice, k, lhs, rhs, gap, holds: gap >= -SLACK })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Sweep {
    pub instances: usize,
    pub violations: usize,
    pub violation_rate: f64,
    pub min_gap: f64,
    pub reports: Vec<Lemma1Report>,
}

/// Random post-ReLU instances: `relu(N(0,1))` features on an `h×w×c` grid,
/// a random rectangle as ground truth and a prediction with a random share of
/// its pixels flipped.
pub fn lemma1_sweep(instances: usize, size: usize, channels: usize, seed: u64) -> Result<Lemma1Sweep> {
    if instances == 0 || size < 2 || channels == 0 {
        return Err(Error::config("lemma 1 sweep needs instances ≥ 1, size ≥ 2 and channels ≥ 1"));
    }
    let mut reports = Vec::with_capacity(instances);
    for i in 0..instances as u64 {
        let mut r = derived_rng(seed, i);
        let shape = Shape::new(1, size, size, channels);
        let data: Vec<f64> = (0..shape.numel()).map(|_| StandardNormal.sample(&mut r)).map(|v: f64| v.max(0.0)).collect();
        let features = Tensor::from_vec(shape, data)?;
        let (y0, x0) = (r.gen_range(0..size - 1), r.gen_range(0..size - 1));
        let (y1, x1) = (r.gen_range(y0 + 1..=size), r.gen_range(x0 + 1..=size));
        let y_true = Tensor::from_fn(Shape::new(1, size, size, 1), |_, y, x, _| {
            f64::from(u8::from((y0..y1).contains(&y) && (x0..x1).contains(&x)))
        });
        let flip: f64 = r.gen_range(0.0..0.3);
        let y_pred = y_true.map(|v| if r.gen_bool(flip) { 1.0 - v } else { v });
        reports.push(lemma1_check(&features, &y_true, &y_pred)?);
    }
    let violations = reports.iter().filter(|r| !r.holds).count();
    Ok(Lemma1Sweep {
        instances,
        violations,
        violation_rate: violations as f64 / instances as f64,
        min_gap: reports.iter().map(|r| r.gap).fold(f64::INFINITY, f64::min),
        reports,
    })
}
