//! Declarative experiment configuration.
//!
//! One TOML file drives dataset synthesis, variant selection, and training.
//! Unknown keys are rejected, every omitted field takes its documented
//! default, and `--set key=value` overrides (applied before deserialization)
//! beat the file. The fully materialized result is echoed into each run
//! directory so a run is reproducible from its own artifacts.
//!
//! ```toml
//! seeds = [1, 2, 3]
//!
//! [dataset]
//! file = "dataset.txt"
//! patients = 256
//! horizon = 180
//! seed = 7
//! classes = 1
//!
//! [variant]
//! variant = "vanilla-nonsaturating"
//!
//! [training]
//! steps = 3000
//! batch = 32
//!
//! [output]
//! root = "runs"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::TrainSettings;
use crate::losses::VariantConfig;
use crate::pkpd::dataset::DatasetConfig;
use crate::pkpd::synth::ProfileConfig;
use crate::pkpd::PatientModel;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid override `{0}`: expected key=value with a dotted key")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// `[dataset]` — synthesis parameters plus the on-disk location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub file: PathBuf,
    pub patients: usize,
    pub horizon: usize,
    pub seed: u64,
    pub classes: usize,
    pub profile: ProfileConfig,
    pub model: PatientModel,
}

impl Default for DatasetSection {
    fn default() -> DatasetSection {
        let base = DatasetConfig::default();
        DatasetSection {
            file: PathBuf::from("dataset.txt"),
            patients: base.patients,
            horizon: base.horizon,
            seed: base.seed,
            classes: base.classes,
            profile: base.profile,
            model: base.model,
        }
    }
}

impl DatasetSection {
    pub fn to_dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            patients: self.patients,
            horizon: self.horizon,
            seed: self.seed,
            classes: self.classes,
            profile: self.profile.clone(),
            model: self.model,
        }
    }
}

/// `[output]` — where run directories land.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub root: Option<PathBuf>,
}

/// The environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "GANLAB_OUT";

/// Whole experiment description; every field has a default.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds swept by `train`; one run per seed.
    pub seeds: Vec<u64>,
    pub dataset: DatasetSection,
    pub variant: VariantConfig,
    pub training: TrainSettings,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            seeds: vec![1],
            dataset: DatasetSection::default(),
            variant: VariantConfig::default(),
            training: TrainSettings::default(),
            output: OutputSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must not be empty".into()));
        }
        if self.dataset.classes == 0 {
            return Err(ConfigError::Invalid("dataset.classes must be >= 1".into()));
        }
        if self.training.batch == 0 {
            return Err(ConfigError::Invalid("training.batch must be >= 1".into()));
        }
        if self.training.hidden.is_empty() {
            return Err(ConfigError::Invalid(
                "training.hidden needs at least one layer".into(),
            ));
        }
        self.variant
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.dataset
            .model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Resolved output root: config beats the environment, which beats the
    /// built-in `runs` default. A `--out` flag beats all three (handled by
    /// the CLI).
    pub fn output_root(&self) -> PathBuf {
        if let Some(root) = &self.output.root {
            return root.clone();
        }
        if let Ok(env_root) = std::env::var(OUTPUT_ROOT_ENV) {
            if !env_root.is_empty() {
                return PathBuf::from(env_root);
            }
        }
        PathBuf::from("runs")
    }

    /// The materialized form: every default filled in, suitable for echoing
    /// into a run directory.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Parse one `key=value` override into (dotted path, raw value).
fn split_override(spec: &str) -> Result<(Vec<String>, String)> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }
    Ok((path, value.trim().to_string()))
}

fn parse_override_value(raw: &str) -> toml::Value {
    // Reuse the TOML grammar for numbers/bools/arrays; anything that does
    // not parse is a string.
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(table) => table["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = split_override(spec)?;
    let mut table = root;
    for key in &path[..path.len() - 1] {
        table = table
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    }
    table.insert(path.last().unwrap().clone(), parse_override_value(&raw));
    Ok(())
}

/// Load a config file with `--set` overrides applied; overrides beat the
/// file, and unknown keys anywhere are rejected.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, overrides)
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    for spec in overrides {
        apply_override(&mut table, spec)?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
