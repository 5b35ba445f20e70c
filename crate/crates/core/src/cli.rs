//! Command-line driver: `gen`, `prep`, `train`, `eval` and `report`.
//!
//! Every command works inside one output directory (`--out`) laid out as
//!
//! ```text
//! data/    traces.jsonl, manifest.json
//! prep/    train.jsonl, val.jsonl, test.jsonl, stats.json
//! model/   checkpoint.json, baseline.json, train_log.csv
//! report/  metrics.csv, latency.csv, sweep.csv, families.csv, unseen.csv, report.json
//! report/figures/  fig2_detection_rates.csv, fig3_latency.csv, fig4_speed_accuracy.csv
//! ```
//!
//! Module seeds come from the top-level seed via
//! `derive_seed(seed, "<module>", 0)` with modules `gen`, `train`, `unseen`
//! and `sweep`.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};
use crate::eval::{fit_baseline, run_experiments, write_csv, write_report, BaselineParams, EvalSettings, ExperimentInputs};
use crate::fsutil::{self, DirLock};
use crate::generator::{gen_dataset, gen_speed_sweep, gen_unseen_families, CompositionSpec};
use crate::model::{train, Checkpoint, EpochLog, TrainConfig};
use crate::preprocess::{audit_stats, stratified_split, NormalizationRange, Preprocessor, SplitSpec, StatsSidecar};
use crate::seed::derive_seed;
use crate::statespace::{read_dataset, read_traces, write_dataset, write_traces};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_LEAKAGE: i32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepSettings {
    pub denoise_window: usize,
    pub range: NormalizationRange,
    pub table_faithful: bool,
    pub ratios: [f64; 3],
}

impl Default for PrepSettings {
    fn default() -> Self {
        PrepSettings {
            denoise_window: 3,
            range: NormalizationRange::SYMMETRIC,
            table_faithful: false,
            ratios: SplitSpec::default().ratios,
        }
    }
}

/// The whole run, read from a TOML document. Any section may be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: CompositionSpec,
    pub preprocess: PrepSettings,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            generator: CompositionSpec::table_i(0.1, 0),
            preprocess: PrepSettings::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| NestError::parse(origin, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NestError::io(path, e))?;
        Self::from_toml(&text, path)
    }

    /// Composition with its seed derived from the top-level seed.
    pub fn composition(&self) -> CompositionSpec {
        CompositionSpec {
            seed: derive_seed(self.seed, "gen", 0),
            ..self.generator.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "train", 0),
            ..self.train.clone()
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            ratios: self.preprocess.ratios,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.composition().validate()?;
        self.split_spec().validate()?;
        NormalizationRange::new(self.preprocess.range.lo, self.preprocess.range.hi)?;
        if self.preprocess.denoise_window % 2 == 0 {
            return Err(NestError::InvalidConfig(format!(
                "denoise_window must be odd, got {}",
                self.preprocess.denoise_window
            )));
        }
        self.train_config().validate()?;
        self.eval.validate()
    }
}

/// Output locations under one run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn prep(&self) -> PathBuf {
        self.root.join("prep")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn figures(&self) -> PathBuf {
        self.report().join("figures")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.model().join("checkpoint.json")
    }
    pub fn baseline(&self) -> PathBuf {
        self.model().join("baseline.json")
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(NestError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "required input is missing"),
        ))
    }
}

fn timed<T>(label: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f();
    eprintln!("[time] {label}: {:.2}s", start.elapsed().as_secs_f64());
    out
}

pub fn cmd_gen(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    cfg.validate()?;
    let spec = cfg.composition();
    let ds = timed("generate", || gen_dataset(&spec))?;
    timed("write dataset", || write_dataset(&layout.data(), &ds))?;
    println!("generated {} traces (d = {}, seed = {})", ds.len(), ds.d, spec.seed);
    for (family, count) in &ds.manifest.families {
        println!("  {family}: {count}");
    }
    Ok(())
}

pub fn cmd_prep(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    cfg.validate()?;
    require(&layout.data().join("manifest.json"))?;
    let ds = timed("read dataset", || read_dataset(&layout.data()))?;
    let splits = stratified_split(&ds.traces, &cfg.split_spec())?;
    let p = &cfg.preprocess;
    let (pre, norm) = timed("preprocess", || {
        Preprocessor::fit(&splits, p.denoise_window, p.range, p.table_faithful, ds.manifest.family_tags.clone())
    })?;
    let mut held_out = norm.val.clone();
    held_out.extend(norm.test.iter().cloned());
    audit_stats(&pre.stats, &norm.train, &held_out)?;
    let dir = layout.prep();
    timed("write splits", || {
        write_traces(&dir.join("train.jsonl"), &norm.train)?;
        write_traces(&dir.join("val.jsonl"), &norm.val)?;
        write_traces(&dir.join("test.jsonl"), &norm.test)?;
        pre.sidecar().write(&dir.join("stats.json"))
    })?;
    println!(
        "split {} / {} / {} traces (train / val / test), stats provenance {:?}",
        norm.train.len(),
        norm.val.len(),
        norm.test.len(),
        pre.stats.provenance
    );
    Ok(())
}

fn log_rows(log: &[EpochLog]) -> Vec<Vec<String>> {
    log.iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                e.loss.total.to_string(),
                e.loss.bce.to_string(),
                e.loss.prediction.to_string(),
                e.loss.regularizer.to_string(),
                e.loss.weight_decay.to_string(),
                e.val_bce.to_string(),
                e.val_balanced_accuracy.to_string(),
                e.tau.to_string(),
            ]
        })
        .collect()
}

pub const TRAIN_LOG_HEADER: [&str; 9] = [
    "epoch",
    "loss",
    "bce",
    "prediction",
    "regularizer",
    "weight_decay",
    "val_bce",
    "val_balanced_accuracy",
    "tau",
];

pub fn cmd_train(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    cfg.validate()?;
    let dir = layout.prep();
    for f in ["train.jsonl", "val.jsonl", "stats.json"] {
        require(&dir.join(f))?;
    }
    let train_set = read_traces(&dir.join("train.jsonl"))?;
    let val = read_traces(&dir.join("val.jsonl"))?;
    let sidecar = StatsSidecar::read(&dir.join("stats.json"))?;
    audit_stats(&sidecar.stats(), &train_set, &val)?;
    let tc = cfg.train_config();
    let provenance = format!("val:{}", val.len());
    let outcome = timed("train", || train(&train_set, &val, &tc, &provenance))?;
    let baseline = timed("fit baseline", || fit_baseline(&train_set, &cfg.eval.baseline))?;
    let ckpt = Checkpoint::new(&outcome.params, outcome.threshold.clone(), outcome.best_epoch, sidecar, tc);
    ckpt.write(&layout.checkpoint())?;
    let json = serde_json::to_string_pretty(&baseline).expect("baseline serializes") + "\n";
    fsutil::write_string_atomic(&layout.baseline(), &json)?;
    write_csv(&layout.model().join("train_log.csv"), &TRAIN_LOG_HEADER, log_rows(&outcome.log))?;
    println!(
        "trained {} epochs, best epoch {}, tau {} (val balanced accuracy {})",
        outcome.log.len(),
        outcome.best_epoch,
        outcome.threshold.tau,
        outcome.log[outcome.best_epoch - 1].val_balanced_accuracy
    );
    Ok(())
}

pub fn read_baseline(path: &Path) -> Result<BaselineParams> {
    let text = std::fs::read_to_string(path).map_err(|e| NestError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| NestError::parse(path, e))
}

pub fn cmd_eval(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    cfg.validate()?;
    require(&layout.checkpoint())?;
    require(&layout.baseline())?;
    let dir = layout.prep();
    require(&dir.join("test.jsonl"))?;
    require(&dir.join("val.jsonl"))?;
    let ckpt = Checkpoint::read(&layout.checkpoint())?;
    let params = ckpt.model_params()?;
    let baseline = read_baseline(&layout.baseline())?;
    let pre = Preprocessor::from_sidecar(&ckpt.stats);
    let test = read_traces(&dir.join("test.jsonl"))?;
    let val = read_traces(&dir.join("val.jsonl"))?;
    let fitted: BTreeSet<String> = ckpt
        .stats
        .source_ids
        .iter()
        .cloned()
        .chain(val.iter().map(|t| t.id.clone()))
        .collect();
    let spec = cfg.composition();
    let e = &cfg.eval;
    let names: Vec<&str> = e.unseen_families.iter().map(String::as_str).collect();
    let unseen = timed("generate unseen", || {
        gen_unseen_families(&names, e.unseen_count, e.unseen_length, &spec, derive_seed(cfg.seed, "unseen", 0))
    })?;
    let sweep = timed("generate sweep", || {
        gen_speed_sweep(&e.sweep_speeds, e.per_speed, e.sweep_length, &spec, derive_seed(cfg.seed, "sweep", 0))
    })?;
    let report = timed("experiments", || {
        run_experiments(&ExperimentInputs {
            params: &params,
            tau: ckpt.threshold.tau,
            preprocessor: &pre,
            baseline: &baseline,
            fitted_ids: &fitted,
            test: &test,
            unseen: &unseen.traces,
            sweep: &sweep,
            settings: e,
        })
    })?;
    write_report(&layout.report(), &report)?;
    println!(
        "test accuracy: nest {:.4}, baseline {:.4} ({} traces)",
        report.nest.metrics.accuracy, report.baseline.metrics.accuracy, report.test_traces
    );
    Ok(())
}

fn copy_csv(from: &Path, to: &Path, header: &[&str]) -> Result<()> {
    require(from)?;
    let mut r = csv::Reader::from_path(from).map_err(|e| NestError::parse(from, e))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| NestError::parse(from, e))?;
        if rec.len() != header.len() {
            return Err(NestError::parse(from, format!("expected {} columns, got {}", header.len(), rec.len())));
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    write_csv(to, header, rows)
}

pub fn cmd_report(layout: &Layout) -> Result<()> {
    let src = layout.report();
    let figs = layout.figures();
    let jobs: [(&str, &str, &[&str]); 3] = [
        ("families.csv", "fig2_detection_rates.csv", &["family", "model", "rate"]),
        ("latency.csv", "fig3_latency.csv", &["family", "median_s", "detected", "missed"]),
        ("sweep.csv", "fig4_speed_accuracy.csv", &["speed_mbps", "model", "accuracy"]),
    ];
    for (from, _, _) in &jobs {
        require(&src.join(from))?;
    }
    for (from, to, header) in jobs {
        copy_csv(&src.join(from), &figs.join(to), header)?;
        println!("wrote {}", figs.join(to).display());
    }
    Ok(())
}

/// Exit code for an error.
pub fn exit_code(err: &NestError) -> i32 {
    match err {
        NestError::TrainingDivergence { .. } | NestError::Divergence { .. } => EXIT_DIVERGENCE,
        NestError::Leakage(_) => EXIT_LEAKAGE,
        _ => EXIT_INPUT,
    }
}

#[derive(Debug, Parser)]
#[command(name = "nest", version, about = "Encrypted-state transduction ransomware classifier")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "nest-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Gen {
        /// Fraction of the reference composition.
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Denoise, split and normalize.
    Prep {
        /// Honor per-family denoise tags and normalization ranges.
        #[arg(long)]
        table_faithful: bool,
    },
    /// Train the model and the baseline.
    Train,
    /// Run the experiment suite.
    Eval,
    /// Emit figure-ready CSVs from the evaluation outputs.
    Report,
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Gen { scale: Some(s) } => cfg.generator.scale = *s,
        Command::Prep { table_faithful: true } => cfg.preprocess.table_faithful = true,
        _ => {}
    }
    if !matches!(cli.command, Command::Report) {
        cfg.validate()?;
    }
    let layout = Layout::new(&cli.out);
    let _lock = DirLock::acquire(&layout.root)?;
    match cli.command {
        Command::Gen { .. } => cmd_gen(&cfg, &layout),
        Command::Prep { .. } => cmd_prep(&cfg, &layout),
        Command::Train => cmd_train(&cfg, &layout),
        Command::Eval => cmd_eval(&cfg, &layout),
        Command::Report => cmd_report(&layout),
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
