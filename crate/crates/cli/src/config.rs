//! Resolved configurations of every command. A JSON file (a bare config or a
//! previous run's `manifest.json`) supplies the starting point; flags then
//! override individual fields.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fdseg::data::SiteConfig;
use fdseg::theory::WeightNormConfig;
use fdseg::train::{LossMode, TrainConfig};
use fdseg::unet::UNetConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const FRACTION_GRID: [f64; 6] = [0.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0 / 2.0, 1.0];
pub const SIGMA_GRID: [f64; 5] = [0.0, 0.05, 0.10, 0.15, 0.20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SiteChoice {
    Base,
    Novel,
}

/// The two synthetic sites at a chosen image size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sites {
    pub image_size: usize,
    pub base: SiteConfig,
    pub novel: SiteConfig,
}

impl Default for Sites {
    fn default() -> Self {
        Sites { image_size: 32, base: SiteConfig::base(), novel: SiteConfig::novel_shifted() }
    }
}

impl Sites {
    pub fn site(&self, which: SiteChoice) -> SiteConfig {
        let s = match which {
            SiteChoice::Base => &self.base,
            SiteChoice::Novel => &self.novel,
        };
        s.clone().with_size(self.image_size, self.image_size)
    }
}

fn sweep_train() -> TrainConfig {
    TrainConfig { phase1_epochs: 20, phase2_epochs: 10, ..Default::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub site: SiteChoice,
    /// Load the site from `<data_dir>/<site name>` instead of generating it.
    pub data_dir: Option<PathBuf>,
    pub n_samples: usize,
    pub augment: bool,
    pub noise_sigma: f64,
    pub sites: Sites,
    pub model: UNetConfig,
    pub train: TrainConfig,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        TrainCmdConfig {
            site: SiteChoice::Base,
            data_dir: None,
            n_samples: 100,
            augment: false,
            noise_sigma: 0.0,
            sites: Sites::default(),
            model: UNetConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub site: SiteChoice,
    pub n_samples: usize,
    pub seed: u64,
    pub sites: Sites,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig { site: SiteChoice::Base, n_samples: 100, seed: 0, sites: Sites::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataAdditionConfig {
    pub seeds: Vec<u64>,
    pub fractions: Vec<f64>,
    pub modes: Vec<LossMode>,
    /// Never add more novel samples than the base training split holds.
    pub cap_novel_at_base: bool,
    pub n_base: usize,
    pub n_novel: usize,
    pub augment: bool,
    pub sites: Sites,
    pub model: UNetConfig,
    pub train: TrainConfig,
}

impl Default for DataAdditionConfig {
    fn default() -> Self {
        DataAdditionConfig {
            seeds: DEFAULT_SEEDS.to_vec(),
            fractions: FRACTION_GRID.to_vec(),
            modes: LossMode::ALL.to_vec(),
            cap_novel_at_base: false,
            n_base: 100,
            n_novel: 100,
            augment: false,
            sites: Sites::default(),
            model: UNetConfig::default(),
            train: sweep_train(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSweepConfig {
    pub seeds: Vec<u64>,
    pub sigmas: Vec<f64>,
    pub modes: Vec<LossMode>,
    pub n_samples: usize,
    pub augment: bool,
    pub sites: Sites,
    pub model: UNetConfig,
    pub train: TrainConfig,
}

impl Default for NoiseSweepConfig {
    fn default() -> Self {
        NoiseSweepConfig {
            seeds: DEFAULT_SEEDS.to_vec(),
            sigmas: SIGMA_GRID.to_vec(),
            modes: LossMode::ALL.to_vec(),
            n_samples: 100,
            augment: false,
            sites: Sites::default(),
            model: UNetConfig::default(),
            train: sweep_train(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LemmaChecksConfig {
    /// Seeds of the weight-norm experiment; the first also seeds the others.
    pub seeds: Vec<u64>,
    pub lemma1_samples: usize,
    pub lemma1_size: usize,
    pub lemma1_channels: usize,
    pub lemma2_triples: usize,
    pub weight_norm: WeightNormConfig,
    pub mediation_a: f64,
    pub mediation_b: f64,
    pub mediation_n: usize,
}

impl Default for LemmaChecksConfig {
    fn default() -> Self {
        LemmaChecksConfig {
            seeds: DEFAULT_SEEDS.to_vec(),
            lemma1_samples: 100,
            lemma1_size: 8,
            lemma1_channels: 4,
            lemma2_triples: 20,
            weight_norm: WeightNormConfig::default(),
            mediation_a: 1.0,
            mediation_b: 1.0,
            mediation_n: 100_000,
        }
    }
}

/// Reads a config file. A manifest written by an earlier run is accepted too:
/// its `config` member is used, provided the command matches.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>, command: &str) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
    if let Some(obj) = value.as_object() {
        if obj.contains_key("tool") && obj.contains_key("config") {
            let cmd = obj.get("command").and_then(|c| c.as_str()).unwrap_or_default();
            if cmd != command {
                return Err(UsageError(format!("{} is a manifest for `{cmd}`, not `{command}`", path.display())).into());
            }
            value = value["config"].take();
        }
    }
    serde_json::from_value(value).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
}
