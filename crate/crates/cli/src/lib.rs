//! The `cellkd` command line: synthetic data, pseudo-labels, training,
//! prediction, evaluation and method comparison.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime or data
//! error.

pub mod config;

use std::path::{Path, PathBuf};

use cellkd::checkpoint::Checkpoint;
use cellkd::data::{save_prob_map, DatasetManifest, ProbMap, Split};
use cellkd::distill::generate_pseudo_labels;
use cellkd::eval::report::{
    compare_methods, save_overlay, write_boxplot_csv, write_comparisons_csv, write_evaluation, write_json,
    write_records_csv,
};
use cellkd::eval::{evaluate_split, find_prediction};
use cellkd::model::StudentModel;
use cellkd::synth::{write_dataset, MANIFEST_FILE};
use cellkd::train::{fit_manifest, predict_split};
use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<cellkd::Error> for CliError {
    fn from(e: cellkd::Error) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cellkd", version, about = "Knowledge-distilled nuclei segmentation")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Directory receiving every output of the command.
    #[arg(long, global = true, default_value = "out")]
    pub output: PathBuf,
    /// Seed for every random stream; overrides all seeds in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (images, instance labels, manifest).
    Synth,
    /// Run the teacher over train/val records and write binary pseudo-labels.
    Pseudolabel,
    /// Train the student on the manifest's train split.
    Train,
    /// Write probability maps for one split.
    Predict,
    /// Score predictions against ground truth.
    Evaluate,
    /// Pairwise Mann-Whitney U comparison of several prediction sets.
    Compare,
}

fn runtime(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{context}: {e}"))
}

fn create_output(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(&format!("cannot create {}", dir.display()), e))
}

fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest, CliError> {
    Ok(DatasetManifest::load(&cfg.manifest_path())?)
}

fn validate_for(cfg: &RunConfig, command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth => cfg.synth.validate()?,
        Command::Pseudolabel => {
            cfg.resolved_teacher()?.validate()?;
        }
        Command::Train => {
            cfg.model.validate()?;
            cfg.train.validate()?;
        }
        Command::Predict => {
            if cfg.predict.use_teacher {
                cfg.resolved_teacher()?.validate()?;
            }
        }
        Command::Evaluate => check_threshold(cfg.evaluate.threshold)?,
        Command::Compare => {
            check_threshold(cfg.compare.threshold)?;
            if cfg.compare.methods.len() < 2 {
                return Err(CliError::Config("compare needs at least two [[compare.methods]]".into()));
            }
            let mut names: Vec<&str> = cfg.compare.methods.iter().map(|m| m.name.as_str()).collect();
            names.sort_unstable();
            if names.windows(2).any(|w| w[0] == w[1]) {
                return Err(CliError::Config("compare method names must be unique".into()));
            }
            if cfg.compare.metrics.is_empty() {
                return Err(CliError::Config("compare needs at least one metric".into()));
            }
        }
    }
    Ok(())
}

fn check_threshold(t: f64) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(CliError::Config(format!("threshold {t} outside [0, 1]")));
    }
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let manifest = write_dataset(&cfg.synth, out)?;
    let sizes = manifest.split_sizes();
    println!(
        "wrote {} patches to {} (train {}, val {}, test {})",
        manifest.records.len(),
        out.display(),
        sizes.get(&Split::Train).unwrap_or(&0),
        sizes.get(&Split::Val).unwrap_or(&0),
        sizes.get(&Split::Test).unwrap_or(&0)
    );
    Ok(())
}

pub fn cmd_pseudolabel(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let teacher = cfg.resolved_teacher()?;
    let manifest = load_manifest(cfg)?;
    create_output(out)?;
    let (updated, counts) = generate_pseudo_labels(&teacher, &manifest, out)?;
    updated.rebase(out)?.save(&out.join(MANIFEST_FILE))?;
    println!("pseudo-labels: train {}, val {}", counts.train, counts.val);
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let manifest = load_manifest(cfg)?;
    create_output(out)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.checkpoint_dir = Some(out.to_path_buf());
    let mut model = StudentModel::build(cfg.model.clone(), cfg.seed)?;
    let outcome = fit_manifest(&mut model, &manifest, &train_cfg)?;
    write_json(&outcome.report, &out.join("train_report.json"))?;
    let r = &outcome.report;
    println!(
        "trained {} steps; best epoch {} (val dice {})",
        r.optimizer_steps,
        r.best_epoch + 1,
        r.val_dice
            .get(r.best_epoch)
            .copied()
            .flatten()
            .map_or("n/a".to_string(), |d| format!("{d:.4}"))
    );
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let manifest = load_manifest(cfg)?;
    create_output(out)?;
    let split = cfg.predict.split;
    let n = if cfg.predict.use_teacher {
        let teacher = cfg.resolved_teacher()?;
        let records: Vec<_> = manifest.split(split).collect();
        for r in &records {
            let mask = teacher.pseudo_label(&r.id())?;
            save_prob_map(&ProbMap::from_mask(&mask), &out.join(format!("{}.png", r.id())))?;
        }
        records.len()
    } else {
        let model = Checkpoint::load(&cfg.input(&cfg.predict.checkpoint))?.to_model()?;
        predict_split(&model, &manifest, split, out)?
    };
    println!("wrote {n} {split} predictions to {}", out.display());
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let manifest = load_manifest(cfg)?;
    let pred_dir = cfg.input(&cfg.evaluate.predictions);
    let report = evaluate_split(&pred_dir, &manifest, cfg.evaluate.split, cfg.evaluate.threshold)?;
    create_output(out)?;
    write_evaluation(&report, out)?;
    if cfg.evaluate.overlays {
        for r in manifest.split(cfg.evaluate.split) {
            let id = r.id();
            let path = find_prediction(&pred_dir, &id)
                .ok_or_else(|| CliError::Runtime(format!("missing prediction for {id}")))?;
            let pred = cellkd::data::load_prob_map(&path)?.threshold(cfg.evaluate.threshold);
            let image = manifest.load_image(r)?;
            save_overlay(&image, &pred, &out.join("overlays").join(format!("{id}.png")))?;
        }
    }
    for m in &report.summary.metrics {
        println!("{:>5}: {:.4} ± {:.4}", m.metric.name(), m.mean, m.std);
    }
    Ok(())
}

pub fn cmd_compare(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let manifest = load_manifest(cfg)?;
    let c = &cfg.compare;
    let mut methods = Vec::with_capacity(c.methods.len());
    for m in &c.methods {
        let report = evaluate_split(&cfg.input(&m.predictions), &manifest, c.split, c.threshold)?;
        methods.push((m.name.clone(), report.records));
    }
    create_output(out)?;
    for (name, records) in &methods {
        write_records_csv(records, &out.join(format!("metrics_{name}.csv")))?;
    }
    for &metric in &c.metrics {
        write_boxplot_csv(&methods, metric, &out.join(format!("boxplot_{}.csv", metric.name())))?;
    }
    let rows = compare_methods(&methods, &c.metrics)?;
    write_comparisons_csv(&rows, &out.join("compare.csv"))?;
    for r in &rows {
        println!(
            "{:>5} {} vs {}: U={} p={:.4} {}",
            r.metric.name(),
            r.method_a,
            r.method_b,
            r.test.u,
            r.test.p_value,
            r.test.label
        );
    }
    Ok(())
}

/// Loads and validates the configuration, then runs the command.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = config::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    validate_for(&cfg, cli.command)?;
    let out = cli.output.as_path();
    match cli.command {
        Command::Synth => cmd_synth(&cfg, out),
        Command::Pseudolabel => cmd_pseudolabel(&cfg, out),
        Command::Train => cmd_train(&cfg, out),
        Command::Predict => cmd_predict(&cfg, out),
        Command::Evaluate => cmd_evaluate(&cfg, out),
        Command::Compare => cmd_compare(&cfg, out),
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
