use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fdseg::train::LossMode;

use crate::config::SiteChoice;

#[derive(Debug, Parser)]
#[command(name = "fdseg", version, args_override_self = true, about = "Feature-discrepancy segmentation experiments on synthetic sites")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and evaluate it on the test split.
    Train(TrainArgs),
    /// Render a synthetic site to PGM files.
    GenData(GenDataArgs),
    /// Add growing shares of a shifted site to the base training set.
    DataAddition(DataAdditionArgs),
    /// Train under increasing image noise.
    NoiseSweep(NoiseSweepArgs),
    /// Run the numerical theory checks.
    LemmaChecks(LemmaArgs),
    /// Draw SVG charts from sweep CSVs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config, or the manifest.json of an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite an output directory that already holds a run.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Default)]
pub struct TrainingFlags {
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub phase1_epochs: Option<usize>,
    #[arg(long)]
    pub phase2_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Target penalty level of the α schedule.
    #[arg(long, allow_hyphen_values = true)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub eta_alpha: Option<f64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Five-fold flip/rotation augmentation of the training split.
    #[arg(long)]
    pub augment: bool,
}

fn parse_mode(s: &str) -> Result<LossMode, String> {
    s.parse().map_err(|e: fdseg::Error| e.to_string())
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub site: Option<SiteChoice>,
    #[arg(long, value_parser = parse_mode)]
    pub loss: Option<LossMode>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Load the site from a directory written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub training: TrainingFlags,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub site: Option<SiteChoice>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct DataAdditionArgs {
    #[command(flatten)]
    pub common: Common,
    /// Loss modes to compare (comma separated).
    #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
    pub loss: Option<Vec<LossMode>>,
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    #[arg(long)]
    pub n_base: Option<usize>,
    #[arg(long)]
    pub n_novel: Option<usize>,
    #[arg(long)]
    pub cap_novel_at_base: bool,
    #[command(flatten)]
    pub training: TrainingFlags,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct NoiseSweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
    pub loss: Option<Vec<LossMode>>,
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[command(flatten)]
    pub training: TrainingFlags,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct LemmaArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub lemma1_samples: Option<usize>,
    #[arg(long)]
    pub lemma2_triples: Option<usize>,
    #[arg(long)]
    pub mediation_a: Option<f64>,
    #[arg(long)]
    pub mediation_b: Option<f64>,
    #[arg(long)]
    pub mediation_n: Option<usize>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ReportArgs {
    /// Sweep CSVs written by `data-addition` or `noise-sweep`.
    #[arg(required = true)]
    pub csv: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}
