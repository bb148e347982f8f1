//! Data preparation and single training runs shared by every command.

use std::path::Path;

use fdseg::data::{add_gaussian_noise, generate_site, load_site, split_dataset, SiteConfig, SiteSample, Split, DEFAULT_SPLIT};
use fdseg::losses::Source;
use fdseg::rng::derive;
use fdseg::theory::{dice_fd_correlation, Correlation};
use fdseg::train::{evaluate, mean_dice, train, LossMode, MetricsRecord, TrainConfig, TrainOutcome};
use fdseg::unet::{UNet, UNetConfig};
use serde::Serialize;

const STREAM_NOVEL: u64 = 0x4e4f_5645;
const STREAM_NOISE: u64 = 0x4e4f_4953;
const EVAL_THRESHOLD: f64 = 0.5;

/// Renders `n` samples of `site`, or loads them from `data_dir/<name>`.
pub fn site_samples(site: &SiteConfig, n: usize, seed: u64, source: Source, data_dir: Option<&Path>) -> fdseg::Result<Vec<SiteSample>> {
    match data_dir {
        Some(dir) => Ok(load_site(dir, &site.name, source)?.1),
        None => generate_site(site, n, seed, source),
    }
}

/// Novel samples of the run `seed`, drawn from a stream independent of the
/// base site.
pub fn novel_samples(site: &SiteConfig, n: usize, seed: u64) -> fdseg::Result<Vec<SiteSample>> {
    generate_site(site, n, derive(seed, STREAM_NOVEL), Source::Novel)
}

/// Adds noise of level `sigma` to every image. Sample `id` always receives
/// the same noise pattern at a given seed, only its scale changes with sigma.
pub fn with_noise(samples: Vec<SiteSample>, sigma: f64, seed: u64) -> fdseg::Result<Vec<SiteSample>> {
    samples
        .into_iter()
        .map(|mut s| {
            s.image = add_gaussian_noise(&s.image, sigma, derive(derive(seed, STREAM_NOISE), s.id))?;
            Ok(s)
        })
        .collect()
}

pub fn split(samples: &[SiteSample], seed: u64, augment: bool) -> fdseg::Result<Split> {
    let s = split_dataset(samples, DEFAULT_SPLIT, seed)?;
    if augment {
        s.augment_train()
    } else {
        Ok(s)
    }
}

/// Number of novel samples added at `fraction`.
pub fn novel_count(fraction: f64, n_novel: usize, base_train: usize, cap_at_base: bool) -> usize {
    let k = (fraction * n_novel as f64).round() as usize;
    let k = k.min(n_novel);
    if cap_at_base {
        k.min(base_train)
    } else {
        k
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub loss_mode: LossMode,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub best_epoch: usize,
    pub best_step: usize,
    pub best_val_dice: f64,
    pub test_dice: f64,
    pub test_iou: f64,
    pub correlation: Option<Correlation>,
    pub final_alpha: Vec<f64>,
    pub warnings: Vec<String>,
    pub aborted: Option<String>,
}

pub struct Run {
    pub outcome: TrainOutcome,
    /// Per-sample test metrics of the selected checkpoint.
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
}

/// Initializes a fresh network from `config.seed`, trains it and evaluates the
/// selected checkpoint on `test`. An abort still evaluates the last good
/// checkpoint; the caller decides what to do with it.
pub fn run(config: &TrainConfig, model: &UNetConfig, data: &Split) -> fdseg::Result<Run> {
    let net = UNet::init(config.model_config(model), config.seed)?;
    let outcome = train(config, net, &data.train, &data.val)?;
    let records = evaluate(&outcome.model, &data.test, EVAL_THRESHOLD, outcome.best_step)?;
    let n = records.len() as f64;
    let summary = RunSummary {
        loss_mode: config.loss_mode,
        seed: config.seed,
        n_train: data.train.len(),
        n_val: data.val.len(),
        n_test: data.test.len(),
        best_epoch: outcome.best_epoch,
        best_step: outcome.best_step,
        best_val_dice: outcome.best_val_dice,
        test_dice: mean_dice(&records),
        test_iou: records.iter().map(|r| r.iou).sum::<f64>() / n,
        correlation: dice_fd_correlation(&records).ok(),
        final_alpha: outcome.alpha.alpha.clone(),
        warnings: outcome.warnings.clone(),
        aborted: outcome.abort.as_ref().map(|a| format!("epoch {}, step {}: {}", a.epoch, a.step, a.location)),
    };
    Ok(Run { outcome, records, summary })
}

/// Worker pool for sweep cells. `FDSEG_WORKERS` caps the width.
pub fn pool() -> anyhow::Result<rayon::ThreadPool> {
    let width = match std::env::var("FDSEG_WORKERS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&w| w > 0)
            .ok_or_else(|| crate::UsageError(format!("FDSEG_WORKERS must be a positive integer, got {v:?}")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    Ok(rayon::ThreadPoolBuilder::new().num_threads(width).build()?)
}
