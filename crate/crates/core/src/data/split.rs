use rand::seq::SliceRandom;

use super::{augment, SiteSample};
use crate::error::{Error, Result};
use crate::rng::rng;

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.7, 0.2, 0.1);

#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<SiteSample>,
    pub test: Vec<SiteSample>,
    pub val: Vec<SiteSample>,
}

impl Split {
    /// Replaces the training partition with its five-fold augmentation.
    /// Test and validation stay untouched.
    pub fn augment_train(mut self) -> Result<Self> {
        let mut train = Vec::with_capacity(self.train.len() * 5);
        for s in &self.train {
            train.extend(augment(s)?);
        }
        self.train = train;
        Ok(self)
    }
}

/// Seeded shuffle, then contiguous `train | test | val` partitions. Test and
/// validation sizes are `floor(ratio·n)`; the remainder goes to train.
pub fn split_dataset(samples: &[SiteSample], ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (tr, te, va) = ratios;
    if [tr, te, va].iter().any(|r| !(*r >= 0.0)) || ((tr + te + va) - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = samples.len();
    let n_test = (te * n as f64 + 1e-9).floor() as usize;
    let n_val = (va * n as f64 + 1e-9).floor() as usize;
    let n_train = n - n_test - n_val;
    if n_train == 0 || n_test == 0 || n_val == 0 {
        return Err(Error::config(format!(
            "{n} samples give an empty partition (train {n_train}, test {n_test}, val {n_val})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        train: pick(&order[..n_train]),
        test: pick(&order[n_train..n_train + n_test]),
        val: pick(&order[n_train + n_test..]),
    })
}
