//! Run configuration: one TOML file with per-command sections, patched by
//! `--set key=value` overrides before deserialization.

use std::path::{Path, PathBuf};

use cellkd::data::Split;
use cellkd::distill::TeacherAdapter;
use cellkd::eval::Metric;
use cellkd::model::UNetSpec;
use cellkd::synth::SynthConfig;
use cellkd::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

/// Overrides the built-in data root (`.`) when the config does not set one.
pub const DATA_ROOT_ENV: &str = "CELLKD_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base for every relative input path.
    pub data_root: Option<PathBuf>,
    pub seed: u64,
    pub manifest: PathBuf,
    pub synth: SynthConfig,
    pub teacher: Option<TeacherAdapter>,
    pub model: UNetSpec,
    pub train: TrainConfig,
    pub predict: PredictConfig,
    pub evaluate: EvaluateConfig,
    pub compare: CompareConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_root: None,
            seed: 0,
            manifest: PathBuf::from("manifest.csv"),
            synth: SynthConfig::default(),
            teacher: None,
            model: UNetSpec::default(),
            train: TrainConfig::default(),
            predict: PredictConfig::default(),
            evaluate: EvaluateConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub checkpoint: PathBuf,
    pub split: Split,
    /// Write the teacher's masks instead of student probabilities.
    pub use_teacher: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            checkpoint: PathBuf::from("best.ckpt"),
            split: Split::Test,
            use_teacher: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub predictions: PathBuf,
    pub threshold: f64,
    pub split: Split,
    /// Also write boundary overlays of the binarized predictions.
    pub overlays: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            predictions: PathBuf::from("predictions"),
            threshold: 0.5,
            split: Split::Test,
            overlays: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub name: String,
    pub predictions: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub methods: Vec<MethodEntry>,
    pub metrics: Vec<Metric>,
    pub threshold: f64,
    pub split: Split,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            methods: Vec::new(),
            metrics: Metric::ALL.to_vec(),
            threshold: 0.5,
            split: Split::Test,
        }
    }
}

/// Parses `a.b.c=value`. The value is read as a TOML literal when possible
/// (`3`, `0.5`, `true`, `[1, 2]`, `"x"`), otherwise as a bare string.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Config(format!("override {spec:?} has an empty key segment")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply_override(table: &mut Table, path: &[String], value: Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut cur = table;
    for seg in parents {
        let entry = cur.entry(seg.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override path {} crosses non-table key {seg}", path.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

fn ensure_seed(table: &mut Table, section: &str, seed: i64, force: bool) {
    if let Some(Value::Table(t)) = table.get_mut(section) {
        if force || !t.contains_key("seed") {
            t.insert("seed".into(), Value::Integer(seed));
        }
    } else {
        let mut t = Table::new();
        t.insert("seed".into(), Value::Integer(seed));
        table.insert(section.into(), Value::Table(t));
    }
}

/// Reads the file (if any), applies overrides and `--seed`, and deserializes.
/// Section seeds default to the global seed; `--seed` forces all of them.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        let (key, value) = parse_override(o)?;
        apply_override(&mut table, &key, value)?;
    }
    if let Some(s) = seed {
        table.insert("seed".into(), Value::Integer(seed_to_toml(s)?));
    }
    let global = match table.get("seed") {
        Some(Value::Integer(s)) => *s,
        Some(_) => return Err(CliError::Config("seed must be an integer".into())),
        None => 0,
    };
    for section in ["synth", "train"] {
        ensure_seed(&mut table, section, global, seed.is_some());
    }
    if let Some(Value::Table(t)) = table.get_mut("teacher") {
        if seed.is_some() || !t.contains_key("seed") {
            if t.get("kind").and_then(Value::as_str) == Some("synthetic_corruptor") {
                t.insert("seed".into(), Value::Integer(global));
            }
        }
    }
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("invalid configuration: {e}")))?;
    Ok(cfg)
}

fn seed_to_toml(s: u64) -> Result<i64, CliError> {
    i64::try_from(s).map_err(|_| CliError::Config(format!("seed {s} exceeds {}", i64::MAX)))
}

impl RunConfig {
    pub fn data_root(&self) -> PathBuf {
        self.data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    /// Resolves an input path against the data root.
    pub fn input(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_root().join(p)
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.input(&self.manifest)
    }

    /// Teacher with its directories resolved against the data root.
    pub fn resolved_teacher(&self) -> Result<TeacherAdapter, CliError> {
        let t = self
            .teacher
            .clone()
            .ok_or_else(|| CliError::Config("missing [teacher] section".into()))?;
        Ok(match t {
            TeacherAdapter::FileBased { dir, prob_threshold } => TeacherAdapter::FileBased {
                dir: self.input(&dir),
                prob_threshold,
            },
            TeacherAdapter::SyntheticCorruptor {
                source_dir,
                drop_fraction,
                seed,
            } => TeacherAdapter::SyntheticCorruptor {
                source_dir: self.input(&source_dir),
                drop_fraction,
                seed,
            },
        })
    }
}
