//! Foreground/background feature discrepancy.
//!
//! For a feature map `F` and a binary mask `ỹ` at the same resolution, the
//! per-channel foreground and background means are
//!
//! ```text
//! F_g[k] = Σ_ij F[i,j,k]·ỹ[i,j]     / (Σ ỹ     + 1e-6)
//! B_g[k] = Σ_ij F[i,j,k]·(1−ỹ[i,j]) / (Σ (1−ỹ) + 1e-6)
//! ```
//!
//! and the penalty is `−log(‖F_g − B_g‖² + 1e-12)`, using batch-averaged
//! means. The exchangeable variant pairs sample `i` with a partner `j(i)` and
//! penalizes `−log(‖F_g,i − B_g,j‖² + ‖F_g,j − B_g,i‖² + 1e-12)`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng;
use crate::tensor::{Real, Shape, Tape, Tensor, Var};

pub const MASK_EPS: f64 = 1e-6;
pub const FD_FLOOR: f64 = 1e-12;

/// Downsamples a binary mask by iterated 2×2 max pooling: an output pixel is
/// foreground iff any covered input pixel is.
pub fn pool_mask<T: Real>(mask: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::contract(format!("mask pooling factor {factor} is not a power of two")));
    }
    let s = mask.shape();
    if s.c != 1 {
        return Err(Error::Dim { op: "pool_mask", axis: "channels", expected: 1, got: s.c });
    }
    if s.h % factor != 0 {
        return Err(Error::Dim { op: "pool_mask", axis: "height", expected: s.h.next_multiple_of(factor), got: s.h });
    }
    if s.w % factor != 0 {
        return Err(Error::Dim { op: "pool_mask", axis: "width", expected: s.w.next_multiple_of(factor), got: s.w });
    }
    let mut cur = mask.clone();
    let mut f = factor;
    while f > 1 {
        let cs = cur.shape();
        cur = Tensor::from_fn(Shape::new(cs.n, cs.h / 2, cs.w / 2, 1), |n, y, x, _| {
            let a = cur.at(n, 2 * y, 2 * x, 0).max(cur.at(n, 2 * y, 2 * x + 1, 0));
            let b = cur.at(n, 2 * y + 1, 2 * x, 0).max(cur.at(n, 2 * y + 1, 2 * x + 1, 0));
            a.max(b)
        });
        f /= 2;
    }
    Ok(cur)
}

/// Per-sample masked channel means of one feature map.
#[derive(Debug, Clone)]
pub struct MaskedFeatureSummary {
    /// `(n, 1, 1, c)` foreground means.
    pub fg_mean: Var,
    /// `(n, 1, 1, c)` background means.
    pub bg_mean: Var,
    pub fg_count: Vec<f64>,
    pub bg_count: Vec<f64>,
}

impl MaskedFeatureSummary {
    pub fn batch_size(&self) -> usize {
        self.fg_count.len()
    }

    /// Batch-averaged `(F_g, B_g)`, each `(1, 1, 1, c)`.
    pub fn batch_means<T: Real>(&self, tape: &mut Tape<T>) -> (Var, Var) {
        let inv_n = T::one() / T::lit(self.batch_size() as f64);
        let f = tape.sum_axes(self.fg_mean, [true, false, false, false]);
        let b = tape.sum_axes(self.bg_mean, [true, false, false, false]);
        (tape.scale(f, inv_n), tape.scale(b, inv_n))
    }
}

/// Masked channel means of `features` (gradient flows to `features` only).
pub fn feature_summary<T: Real>(tape: &mut Tape<T>, features: Var, mask: &Tensor<T>) -> Result<MaskedFeatureSummary> {
    let fs = tape.shape(features);
    let ms = mask.shape();
    for (axis, a, b) in [(0, fs.n, ms.n), (1, fs.h, ms.h), (2, fs.w, ms.w)] {
        if a != b {
            return Err(Error::contract(format!(
                "feature map {fs} and mask {ms} disagree on {} (pool the mask first)",
                ["batch", "height", "width"][axis]
            )));
        }
    }
    if ms.c != 1 {
        return Err(Error::contract(format!("mask must have one channel, got {}", ms.c)));
    }
    let plane = ms.plane();
    let mut fg_count = Vec::with_capacity(ms.n);
    for n in 0..ms.n {
        let s: f64 = mask.data()[n * plane..(n + 1) * plane].iter().map(|v| v.as_f64()).sum();
        fg_count.push(s);
    }
    let bg_count: Vec<f64> = fg_count.iter().map(|&f| plane as f64 - f).collect();

    let mut side = |weights: Tensor<T>, counts: &[f64]| -> Result<Var> {
        let w = tape.constant(weights);
        let fw = tape.mul(features, w)?;
        let s = tape.sum_axes(fw, [false, true, true, false]);
        let norm = Tensor::from_vec(
            Shape::new(ms.n, 1, 1, 1),
            counts.iter().map(|&c| T::one() / T::lit(c + MASK_EPS)).collect(),
        )?;
        let norm = tape.constant(norm);
        tape.mul(s, norm)
    };
    let fg_mean = side(mask.clone(), &fg_count)?;
    let bg_mean = side(mask.map(|v| T::one() - v), &bg_count)?;
    Ok(MaskedFeatureSummary { fg_mean, bg_mean, fg_count, bg_count })
}

/// `−log(‖F_g − B_g‖² + 1e-12)` on the batch-averaged means.
pub fn fd_loss<T: Real>(tape: &mut Tape<T>, summary: &MaskedFeatureSummary) -> Result<Var> {
    let (f, b) = summary.batch_means(tape);
    let d = tape.sub(f, b)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    let s = tape.add_scalar(s, T::lit(FD_FLOOR));
    let l = tape.log(s);
    Ok(tape.neg(l))
}

/// Per-sample `−log(‖F_g,i − B_g,i‖² + 1e-12)` read off already-recorded means.
pub fn fd_per_sample<T: Real>(tape: &Tape<T>, summary: &MaskedFeatureSummary) -> Vec<f64> {
    let f = tape.value(summary.fg_mean);
    let b = tape.value(summary.bg_mean);
    let c = f.shape().c;
    (0..summary.batch_size())
        .map(|i| {
            let d2: f64 = (0..c).map(|k| (f.at(i, 0, 0, k).as_f64() - b.at(i, 0, 0, k).as_f64()).powi(2)).sum();
            -(d2 + FD_FLOOR).ln()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Base,
    Novel,
}

/// Partner index `j(i)` for every batch entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    pub partners: Vec<usize>,
    pub warning: Option<String>,
}

/// `j(i) = (i + k) mod n`.
pub fn offset_partners(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| (i + k) % n).collect()
}

/// Seeded shuffle, then pairing at a random offset `k ∈ 1..n−1` along the
/// shuffled order. A batch of one pairs with itself.
pub fn shuffled_partners(n: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let k = if n > 1 { r.gen_range(1..n) } else { 0 };
    let mut partners = vec![0; n];
    for p in 0..n {
        partners[order[p]] = order[(p + k) % n];
    }
    partners
}

/// Builds the exchangeable pairing. With source tags, base samples pair with
/// novel ones and vice versa; when only one source is present the pairing
/// falls back to the shuffled offset rule and says so in `warning`.
pub fn exch_pairing(n: usize, tags: Option<&[Source]>, seed: u64) -> Result<Pairing> {
    if n == 0 {
        return Err(Error::contract("exchangeable pairing needs a non-empty batch"));
    }
    let Some(tags) = tags else {
        return Ok(Pairing { partners: shuffled_partners(n, seed), warning: None });
    };
    if tags.len() != n {
        return Err(Error::contract(format!("{} source tags for a batch of {n}", tags.len())));
    }
    let mut base: Vec<usize> = (0..n).filter(|&i| tags[i] == Source::Base).collect();
    let mut novel: Vec<usize> = (0..n).filter(|&i| tags[i] == Source::Novel).collect();
    if base.is_empty() || novel.is_empty() {
        let missing = if base.is_empty() { "base" } else { "novel" };
        return Ok(Pairing {
            partners: shuffled_partners(n, seed),
            warning: Some(format!("no {missing} samples in batch; fell back to offset pairing")),
        });
    }
    let mut r = rng(seed);
    base.shuffle(&mut r);
    novel.shuffle(&mut r);
    let kb = r.gen_range(0..novel.len());
    let kn = r.gen_range(0..base.len());
    let mut partners = vec![0; n];
    for (p, &i) in base.iter().enumerate() {
        partners[i] = novel[(p + kb) % novel.len()];
    }
    for (p, &i) in novel.iter().enumerate() {
        partners[i] = base[(p + kn) % base.len()];
    }
    Ok(Pairing { partners, warning: None })
}

/// Mean over `i` of `−log(‖F_g,i − B_g,j(i)‖² + ‖F_g,j(i) − B_g,i‖² + 1e-12)`.
pub fn fd_exch_loss<T: Real>(tape: &mut Tape<T>, summary: &MaskedFeatureSummary, partners: &[usize]) -> Result<Var> {
    if partners.len() != summary.batch_size() {
        return Err(Error::contract(format!(
            "{} partners for a batch of {}",
            partners.len(),
            summary.batch_size()
        )));
    }
    let fj = tape.select_batch(summary.fg_mean, partners)?;
    let bj = tape.select_batch(summary.bg_mean, partners)?;
    let d1 = tape.sub(summary.fg_mean, bj)?;
    let d2 = tape.sub(fj, summary.bg_mean)?;
    let s1 = tape.mul(d1, d1)?;
    let s2 = tape.mul(d2, d2)?;
    let s = tape.add(s1, s2)?;
    let s = tape.sum_axes(s, [false, true, true, true]);
    let s = tape.add_scalar(s, T::lit(FD_FLOOR));
    let l = tape.log(s);
    let m = tape.mean(l);
    Ok(tape.neg(m))
}
