use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fdseg::data::{generate_site, save_site, Split};
use fdseg::losses::Source;
use fdseg::rng::derive;
use fdseg::theory::{
    lemma1_sweep, lemma2_gradient, mediation_mc, weight_norm_experiment, CheckReport, Matrix, WeightNormRun,
};
use fdseg::train::{write_history_csv, write_metrics_csv, LossMode, TrainConfig};
use fdseg::unet::UNetConfig;
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{Cli, Command, Common, DataAdditionArgs, GenDataArgs, LemmaArgs, NoiseSweepArgs, ReportArgs, TrainArgs, TrainingFlags};
use crate::config::{load, DataAdditionConfig, GenDataConfig, LemmaChecksConfig, NoiseSweepConfig, SiteChoice, Sites, TrainCmdConfig};
use crate::experiment::{self, novel_count, novel_samples, site_samples, with_noise};
use crate::svg::{chart, Metric};
use crate::sweep::{fraction_label, write_aggregates, SweepResult, SweepRow, STATUS_OK};
use crate::{LemmaFailure, UsageError};

pub const MANIFEST: &str = "manifest.json";
const STREAM_LEMMA2: u64 = 0x4c32;
const LEMMA2_DIM: usize = 4;
const LEMMA2_SCALES: [f64; 4] = [0.1, 0.5, 2.0, 10.0];
const GRAD_TOL: f64 = 1e-5;
const SCALE_TOL: f64 = 1e-10;
const SLOPE_TOL: f64 = 0.03;
const VAR_REL_TOL: f64 = 0.025;

#[derive(Debug, Serialize, serde::Deserialize)]
pub struct Manifest<T> {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: T,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::GenData(a) => gen_data(a),
        Command::DataAddition(a) => data_addition(a),
        Command::NoiseSweep(a) => noise_sweep(a),
        Command::LemmaChecks(a) => lemma_checks(a),
        Command::Report(a) => report(a),
    }
}

/// Creates `out` and records the resolved config. Refuses to reuse a
/// directory holding an earlier run unless `force` is set.
fn start_run<T: Serialize>(out: &Path, force: bool, command: &str, config: &T) -> anyhow::Result<()> {
    if out.join(MANIFEST).exists() && !force {
        return Err(UsageError(format!("{} already holds a run; pass --force to overwrite it", out.display())).into());
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = Manifest {
        tool: "fdseg".to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        config,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(out.join(MANIFEST), text)?;
    Ok(())
}

fn create(path: PathBuf) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json(path: PathBuf, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn single_seed(common: &Common) -> anyhow::Result<Option<u64>> {
    match (&common.seed, &common.seeds) {
        (Some(s), _) => Ok(Some(*s)),
        (None, Some(v)) if v.len() == 1 => Ok(Some(v[0])),
        (None, Some(_)) => Err(UsageError("this command runs a single seed; use --seed".into()).into()),
        (None, None) => Ok(None),
    }
}

fn seed_list(common: &Common) -> Option<Vec<u64>> {
    common.seed.map(|s| vec![s]).or_else(|| common.seeds.clone())
}

fn apply_training(f: &TrainingFlags, sites: &mut Sites, model: &mut UNetConfig, train: &mut TrainConfig, augment: &mut bool) {
    if let Some(v) = f.size {
        sites.image_size = v;
    }
    if let Some(v) = f.phase1_epochs {
        train.phase1_epochs = v;
    }
    if let Some(v) = f.phase2_epochs {
        train.phase2_epochs = v;
    }
    if let Some(v) = f.lr {
        train.lr = v;
    }
    if let Some(v) = f.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = f.tau {
        train.tau = v;
    }
    if let Some(v) = f.eta_alpha {
        train.eta_alpha = v;
    }
    if let Some(v) = f.depth {
        model.depth = v;
    }
    if let Some(v) = f.base_channels {
        model.base_channels = v;
    }
    *augment |= f.augment;
}

fn check_sizes(sites: &Sites, model: &UNetConfig, train: &TrainConfig) -> anyhow::Result<()> {
    model.validate()?;
    train.validate()?;
    sites.base.clone().with_size(sites.image_size, sites.image_size).validate()?;
    sites.novel.clone().with_size(sites.image_size, sites.image_size).validate()?;
    model.check_input_size(sites.image_size, sites.image_size)?;
    Ok(())
}

fn source(site: SiteChoice) -> Source {
    match site {
        SiteChoice::Base => Source::Base,
        SiteChoice::Novel => Source::Novel,
    }
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg: TrainCmdConfig = load(a.common.config.as_deref(), "train")?;
    if let Some(s) = single_seed(&a.common)? {
        cfg.train.seed = s;
    }
    if let Some(v) = a.site {
        cfg.site = v;
    }
    if let Some(v) = a.loss {
        cfg.train.loss_mode = v;
    }
    if let Some(v) = a.n_samples {
        cfg.n_samples = v;
    }
    if let Some(v) = a.noise_sigma {
        cfg.noise_sigma = v;
    }
    if let Some(v) = a.data {
        cfg.data_dir = Some(v);
    }
    apply_training(&a.training, &mut cfg.sites, &mut cfg.model, &mut cfg.train, &mut cfg.augment);
    if cfg.data_dir.is_none() {
        check_sizes(&cfg.sites, &cfg.model, &cfg.train)?;
    } else {
        cfg.model.validate()?;
        cfg.train.validate()?;
    }
    let out = &a.common.out;
    start_run(out, a.common.force, "train", &cfg)?;

    let seed = cfg.train.seed;
    let samples = site_samples(&cfg.sites.site(cfg.site), cfg.n_samples, seed, source(cfg.site), cfg.data_dir.as_deref())?;
    let samples = with_noise(samples, cfg.noise_sigma, seed)?;
    let data = experiment::split(&samples, seed, cfg.augment)?;
    let run = experiment::run(&cfg.train, &cfg.model, &data)?;

    let taps = run.outcome.model.config().tap_names();
    write_history_csv(create(out.join("history.csv"))?, &run.outcome.history, &taps)?;
    write_metrics_csv(create(out.join("metrics.csv"))?, &run.records)?;
    run.outcome.model.save(out.join("model.ckpt"))?;
    write_json(out.join("summary.json"), &run.summary)?;
    run.outcome.check()?;
    let s = &run.summary;
    println!(
        "{}: seed {} best epoch {} val Dice {:.4} test Dice {:.4} IoU {:.4}",
        s.loss_mode, s.seed, s.best_epoch, s.best_val_dice, s.test_dice, s.test_iou
    );
    Ok(())
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let mut cfg: GenDataConfig = load(a.common.config.as_deref(), "gen-data")?;
    if let Some(s) = single_seed(&a.common)? {
        cfg.seed = s;
    }
    if let Some(v) = a.site {
        cfg.site = v;
    }
    if let Some(v) = a.n_samples {
        cfg.n_samples = v;
    }
    if let Some(v) = a.size {
        cfg.sites.image_size = v;
    }
    let site = cfg.sites.site(cfg.site);
    site.validate()?;
    start_run(&a.common.out, a.common.force, "gen-data", &cfg)?;
    let samples = generate_site(&site, cfg.n_samples, cfg.seed, source(cfg.site))?;
    let dir = save_site(&a.common.out, &site, &samples)?;
    println!("wrote {} samples to {}", samples.len(), dir.display());
    Ok(())
}

/// Runs every cell on the worker pool and returns rows in input order.
fn run_cells<C: Sync>(cells: &[C], label: impl Fn(&C) -> String + Sync, cell: impl Fn(&C) -> fdseg::Result<SweepRow> + Sync) -> anyhow::Result<Vec<SweepRow>> {
    let pool = experiment::pool()?;
    let total = cells.len();
    Ok(pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, c)| {
                let row = cell(c).unwrap_or_else(|e| {
                    eprintln!("cell {} failed: {e}", label(c));
                    SweepRow {
                        condition: String::new(),
                        seed: 0,
                        loss_mode: LossMode::SegOnly,
                        test_dice_base: None,
                        test_iou_base: None,
                        status: "failed".to_string(),
                    }
                });
                eprintln!("[{}/{total}] {} {}", i + 1, label(c), row.status);
                row
            })
            .collect()
    }))
}

fn cell_row(condition: &str, config: &TrainConfig, model: &UNetConfig, data: &Split) -> fdseg::Result<SweepRow> {
    let run = experiment::run(config, model, data)?;
    let ok = run.outcome.abort.is_none();
    Ok(SweepRow {
        condition: condition.to_string(),
        seed: config.seed,
        loss_mode: config.loss_mode,
        test_dice_base: ok.then_some(run.summary.test_dice),
        test_iou_base: ok.then_some(run.summary.test_iou),
        status: if ok { STATUS_OK.to_string() } else { "aborted".to_string() },
    })
}

fn write_sweep(out: &Path, sweep: &SweepResult, title: &str) -> anyhow::Result<()> {
    sweep.write_csv(create(out.join("sweep.csv"))?)?;
    write_aggregates(create(out.join("summary.csv"))?, &sweep.aggregates())?;
    for m in [Metric::Dice, Metric::Iou] {
        fs::write(out.join(format!("{}.svg", m.name())), chart(sweep, m, title))?;
    }
    for a in sweep.aggregates() {
        println!(
            "{:>6} {:<15} n={} Dice {:.4} ± {:.4} dip {:+.4}",
            a.condition, a.loss_mode.as_str(), a.n, a.mean_dice, a.std_dice, a.dip
        );
    }
    Ok(())
}

fn check_grid(values: &[f64], what: &str) -> anyhow::Result<()> {
    if values.is_empty() {
        return Err(UsageError(format!("the {what} grid is empty")).into());
    }
    if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(UsageError(format!("{what} values must lie in [0, 1]")).into());
    }
    Ok(())
}

fn check_lists(seeds: &[u64], modes: &[LossMode]) -> anyhow::Result<()> {
    if seeds.is_empty() || modes.is_empty() {
        return Err(UsageError("a sweep needs at least one seed and one loss mode".into()).into());
    }
    Ok(())
}

fn data_addition(a: DataAdditionArgs) -> anyhow::Result<()> {
    let mut cfg: DataAdditionConfig = load(a.common.config.as_deref(), "data-addition")?;
    if let Some(v) = seed_list(&a.common) {
        cfg.seeds = v;
    }
    if let Some(v) = a.loss {
        cfg.modes = v;
    }
    if let Some(v) = a.fractions {
        cfg.fractions = v;
    }
    if let Some(v) = a.n_base {
        cfg.n_base = v;
    }
    if let Some(v) = a.n_novel {
        cfg.n_novel = v;
    }
    cfg.cap_novel_at_base |= a.cap_novel_at_base;
    apply_training(&a.training, &mut cfg.sites, &mut cfg.model, &mut cfg.train, &mut cfg.augment);
    check_grid(&cfg.fractions, "fraction")?;
    check_lists(&cfg.seeds, &cfg.modes)?;
    check_sizes(&cfg.sites, &cfg.model, &cfg.train)?;
    start_run(&a.common.out, a.common.force, "data-addition", &cfg)?;

    let mut cells = Vec::new();
    for &f in &cfg.fractions {
        for &mode in &cfg.modes {
            for &seed in &cfg.seeds {
                cells.push((f, mode, seed));
            }
        }
    }
    let cfg = &cfg;
    let rows = run_cells(
        &cells,
        |&(f, mode, seed)| format!("fraction {} {mode} seed {seed}", fraction_label(f)),
        |&(f, mode, seed)| {
            let base = site_samples(&cfg.sites.site(SiteChoice::Base), cfg.n_base, seed, Source::Base, None)?;
            let mut data = experiment::split(&base, seed, false)?;
            let novel = novel_samples(&cfg.sites.site(SiteChoice::Novel), cfg.n_novel, seed)?;
            let k = novel_count(f, cfg.n_novel, data.train.len(), cfg.cap_novel_at_base);
            data.train.extend(novel.into_iter().take(k));
            if cfg.augment {
                data = data.augment_train()?;
            }
            let train = TrainConfig { seed, loss_mode: mode, ..cfg.train.clone() };
            cell_row(&fraction_label(f), &train, &cfg.model, &data)
        },
    )?;
    let rows = fill_failed(rows, &cells, |&(f, mode, seed)| (fraction_label(f), mode, seed));
    write_sweep(&a.common.out, &SweepResult { rows }, "Base test score vs added novel fraction")
}

fn noise_sweep(a: NoiseSweepArgs) -> anyhow::Result<()> {
    let mut cfg: NoiseSweepConfig = load(a.common.config.as_deref(), "noise-sweep")?;
    if let Some(v) = seed_list(&a.common) {
        cfg.seeds = v;
    }
    if let Some(v) = a.loss {
        cfg.modes = v;
    }
    if let Some(v) = a.sigmas {
        cfg.sigmas = v;
    }
    if let Some(v) = a.n_samples {
        cfg.n_samples = v;
    }
    apply_training(&a.training, &mut cfg.sites, &mut cfg.model, &mut cfg.train, &mut cfg.augment);
    check_grid(&cfg.sigmas, "sigma")?;
    check_lists(&cfg.seeds, &cfg.modes)?;
    check_sizes(&cfg.sites, &cfg.model, &cfg.train)?;
    start_run(&a.common.out, a.common.force, "noise-sweep", &cfg)?;

    let mut cells = Vec::new();
    for &sigma in &cfg.sigmas {
        for &mode in &cfg.modes {
            for &seed in &cfg.seeds {
                cells.push((sigma, mode, seed));
            }
        }
    }
    let cfg = &cfg;
    let rows = run_cells(
        &cells,
        |&(sigma, mode, seed)| format!("sigma {sigma} {mode} seed {seed}"),
        |&(sigma, mode, seed)| {
            let base = site_samples(&cfg.sites.site(SiteChoice::Base), cfg.n_samples, seed, Source::Base, None)?;
            let data = experiment::split(&with_noise(base, sigma, seed)?, seed, cfg.augment)?;
            let train = TrainConfig { seed, loss_mode: mode, ..cfg.train.clone() };
            cell_row(&format!("{sigma}"), &train, &cfg.model, &data)
        },
    )?;
    let rows = fill_failed(rows, &cells, |&(sigma, mode, seed)| (format!("{sigma}"), mode, seed));
    write_sweep(&a.common.out, &SweepResult { rows }, "Base test score vs image noise sigma")
}

/// Failed cells come back without their key; restore it from the cell list.
fn fill_failed<C>(rows: Vec<SweepRow>, cells: &[C], key: impl Fn(&C) -> (String, LossMode, u64)) -> Vec<SweepRow> {
    rows.into_iter()
        .zip(cells)
        .map(|(mut r, c)| {
            let (condition, mode, seed) = key(c);
            r.condition = condition;
            r.loss_mode = mode;
            r.seed = seed;
            r
        })
        .collect()
}

#[derive(Serialize)]
struct Lemma2Params {
    triples: usize,
    d: usize,
    scales: Vec<f64>,
    grad_tol: f64,
    scale_tol: f64,
}

#[derive(Serialize)]
struct Lemma2Summary {
    max_grad_error: f64,
    max_scale_dx_invariance_error: f64,
    max_scale_w_ratio_error: f64,
    triples: Vec<fdseg::theory::Lemma2Gradient>,
}

#[derive(Serialize)]
struct WeightNormSummary {
    log_below_linear: usize,
    seeds: usize,
    runs: Vec<WeightNormRun>,
}

#[derive(Serialize)]
struct MediationParams {
    a: f64,
    b: f64,
    n: usize,
    seed: u64,
    slope_expected: f64,
    var_expected: f64,
    slope_tol: f64,
    var_tol: f64,
}

fn lemma_checks(a: LemmaArgs) -> anyhow::Result<()> {
    let mut cfg: LemmaChecksConfig = load(a.common.config.as_deref(), "lemma-checks")?;
    if let Some(v) = seed_list(&a.common) {
        cfg.seeds = v;
    }
    if let Some(v) = a.lemma1_samples {
        cfg.lemma1_samples = v;
    }
    if let Some(v) = a.lemma2_triples {
        cfg.lemma2_triples = v;
    }
    if let Some(v) = a.mediation_a {
        cfg.mediation_a = v;
    }
    if let Some(v) = a.mediation_b {
        cfg.mediation_b = v;
    }
    if let Some(v) = a.mediation_n {
        cfg.mediation_n = v;
    }
    let Some(&seed) = cfg.seeds.first() else {
        return Err(UsageError("lemma-checks needs at least one seed".into()).into());
    };
    if cfg.lemma2_triples == 0 {
        return Err(UsageError("lemma2_triples must be at least 1".into()).into());
    }
    start_run(&a.common.out, a.common.force, "lemma-checks", &cfg)?;

    let mut reports = Vec::new();

    let sweep = lemma1_sweep(cfg.lemma1_samples, cfg.lemma1_size, cfg.lemma1_channels, seed)?;
    let params = serde_json::json!({
        "instances": cfg.lemma1_samples, "size": cfg.lemma1_size, "channels": cfg.lemma1_channels, "seed": seed
    });
    reports.push(CheckReport::new("lemma1", params, &sweep, None));

    let mut triples = Vec::with_capacity(cfg.lemma2_triples);
    for i in 0..cfg.lemma2_triples {
        let mut r = fdseg::rng::derived_rng(seed, derive(STREAM_LEMMA2, i as u64));
        let w = Matrix::random(LEMMA2_DIM, 1.0, &mut r);
        let dx = Matrix::random(LEMMA2_DIM, 1.0, &mut r);
        triples.push(lemma2_gradient(&w, &dx, LEMMA2_SCALES[i % LEMMA2_SCALES.len()])?);
    }
    let worst = |f: fn(&fdseg::theory::Lemma2Gradient) -> f64| triples.iter().map(f).fold(0.0, f64::max);
    let summary = Lemma2Summary {
        max_grad_error: worst(|t| t.grad_error),
        max_scale_dx_invariance_error: worst(|t| t.scale_dx_invariance_error),
        max_scale_w_ratio_error: worst(|t| t.scale_w_ratio_error),
        triples: Vec::new(),
    };
    let holds = summary.max_grad_error < GRAD_TOL
        && summary.max_scale_dx_invariance_error < SCALE_TOL
        && summary.max_scale_w_ratio_error < SCALE_TOL;
    let params = Lemma2Params {
        triples: cfg.lemma2_triples,
        d: LEMMA2_DIM,
        scales: LEMMA2_SCALES.to_vec(),
        grad_tol: GRAD_TOL,
        scale_tol: SCALE_TOL,
    };
    reports.push(CheckReport::new("lemma2_gradient", params, Lemma2Summary { triples, ..summary }, Some(holds)));

    let runs = weight_norm_experiment(cfg.weight_norm, &cfg.seeds)?;
    let below = runs.iter().filter(|r| r.norm_log < r.norm_linear).count();
    let params = serde_json::json!({ "config": cfg.weight_norm, "seeds": cfg.seeds });
    let holds = below == runs.len();
    reports.push(CheckReport::new("weight_norm", params, WeightNormSummary { log_below_linear: below, seeds: runs.len(), runs }, Some(holds)));

    let (ma, mb) = (cfg.mediation_a, cfg.mediation_b);
    let est = mediation_mc(ma, mb, cfg.mediation_n, seed)?;
    let params = MediationParams {
        a: ma,
        b: mb,
        n: cfg.mediation_n,
        seed,
        slope_expected: ma * mb,
        var_expected: 1.0 + mb * mb,
        slope_tol: SLOPE_TOL * (ma * mb).abs().max(1.0),
        var_tol: VAR_REL_TOL * (1.0 + mb * mb),
    };
    let holds = (est.slope_hat - params.slope_expected).abs() <= params.slope_tol
        && (est.var_hat - params.var_expected).abs() <= params.var_tol;
    reports.push(CheckReport::new("mediation", params, est, Some(holds)));

    let out = &a.common.out;
    for r in &reports {
        write_json(out.join(format!("{}.json", r.check)), r)?;
        let verdict = match r.holds {
            Some(true) => "holds",
            Some(false) => "FAILS",
            None => "reported",
        };
        println!("{:<16} {verdict}", r.check);
    }
    let failed: Vec<String> = reports.iter().filter(|r| r.holds == Some(false)).map(|r| r.check.clone()).collect();
    if !failed.is_empty() {
        return Err(LemmaFailure(failed).into());
    }
    Ok(())
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let mut charts = Vec::new();
    for path in &a.csv {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let sweep = SweepResult::read_csv(file, &path.display().to_string())?;
        if sweep.rows.is_empty() {
            return Err(UsageError(format!("{}: the sweep has no rows", path.display())).into());
        }
        sweep.check_complete().map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep").to_string();
        for m in [Metric::Dice, Metric::Iou] {
            charts.push((a.out.join(format!("{stem}_{}.svg", m.name())), chart(&sweep, m, &stem)));
        }
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (path, svg) in charts {
        fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
