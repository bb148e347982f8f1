use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng;

pub const MIN_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MediationEstimate {
    /// Least-squares slope of Y on X; closed form `ab`.
    pub slope_hat: f64,
    /// Residual variance of that fit; closed form `1 + b²`.
    pub var_hat: f64,
}

/// Simulates `X ~ N(0,1)`, `Z = aX + ε₁`, `Y = bZ + ε₂` and regresses Y on X
/// (with intercept).
pub fn mediation_mc(a: f64, b: f64, n_samples: usize, seed: u64) -> Result<MediationEstimate> {
    if n_samples < MIN_SAMPLES {
        return Err(Error::config(format!("mediation needs at least {MIN_SAMPLES} samples, got {n_samples}")));
    }
    let mut r = rng(seed);
    let mut xs = Vec::with_capacity(n_samples);
    let mut ys = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x: f64 = StandardNormal.sample(&mut r);
        let e1: f64 = StandardNormal.sample(&mut r);
        let e2: f64 = StandardNormal.sample(&mut r);
        let z = a * x + e1;
        xs.push(x);
        ys.push(b * z + e2);
    }
    let n = n_samples as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope_hat = sxy / sxx;
    let intercept = my - slope_hat * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope_hat * x).powi(2)).sum();
    Ok(MediationEstimate { slope_hat, var_hat: rss / (n - 2.0) })
}
