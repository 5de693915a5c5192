//! Synthetic dataset container and its on-disk format.
//!
//! The file is self-describing line-oriented text with a version header:
//!
//! ```text
//! ganlab-dataset v1
//! patients=<n> horizon=<T> classes=<k> step_seconds=10
//! model <compact JSON of the PatientModel used for BIS precomputation>
//! record <id> <class> <age> <weight> <height> <sex> <seed>
//! ppf <T space-separated values>
//! rftn <T values>
//! bis <T values>
//! ... (one record/ppf/rftn/bis quartet per patient)
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write → read cycle is lossless at 64-bit precision.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::synth::{synth_ground_truth, ProfileConfig};
use super::{
    simulate_bis, BisTrajectory, DoseHistory, PatientCovariates, PatientModel, PkpdError,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("dataset parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error(transparent)]
    Pkpd(#[from] PkpdError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

const FORMAT_HEADER: &str = "ganlab-dataset v1";

/// Everything needed to synthesize a dataset deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub patients: usize,
    /// Dose-history length T.
    pub horizon: usize,
    pub seed: u64,
    /// Profile families; class labels are assigned round-robin.
    pub classes: usize,
    pub profile: ProfileConfig,
    pub model: PatientModel,
}

impl Default for DatasetConfig {
    fn default() -> DatasetConfig {
        DatasetConfig {
            patients: 256,
            horizon: 180,
            seed: 7,
            classes: 1,
            profile: ProfileConfig::default(),
            model: PatientModel::reference(),
        }
    }
}

/// One synthetic patient: demographics, the generation seed, the dose
/// history, and its precomputed BIS response.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub id: usize,
    pub class_label: usize,
    pub covariates: PatientCovariates,
    pub seed: u64,
    pub doses: DoseHistory,
    pub bis: BisTrajectory,
}

/// In-memory dataset plus the model its BIS columns were computed with.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub horizon: usize,
    pub n_classes: usize,
    pub model: PatientModel,
    pub records: Vec<PatientRecord>,
}

impl Dataset {
    /// Deterministic synthesis: one RNG stream drives covariates and
    /// per-patient seeds, so (config, seed) fixes every byte.
    pub fn synthesize(cfg: &DatasetConfig) -> Result<Dataset> {
        cfg.model.validate()?;
        if cfg.classes == 0 {
            return Err(DatasetError::Pkpd(PkpdError::BadModel(
                "classes must be >= 1".into(),
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let family_profiles: Vec<ProfileConfig> = (0..cfg.classes)
            .map(|k| cfg.profile.for_family(k))
            .collect();
        let mut records = Vec::with_capacity(cfg.patients);
        for id in 0..cfg.patients {
            let covariates = PatientCovariates::new(
                rng.gen_range(18.0..=90.0),
                rng.gen_range(40.0..=150.0),
                rng.gen_range(140.0..=200.0),
                if rng.gen_bool(0.5) { 1.0 } else { 0.0 },
            )
            .expect("sampled within bounds");
            let seed: u64 = rng.gen();
            let class_label = id % cfg.classes;
            let doses = synth_ground_truth(
                &covariates,
                seed,
                &family_profiles[class_label],
                cfg.horizon,
                &cfg.model,
            )?;
            let bis = simulate_bis(&doses, &cfg.model.for_covariates(&covariates))?;
            records.push(PatientRecord {
                id,
                class_label,
                covariates,
                seed,
                doses,
                bis,
            });
        }
        Ok(Dataset {
            horizon: cfg.horizon,
            n_classes: cfg.classes,
            model: cfg.model,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Serialize to the documented text format.
    pub fn to_string_lossless(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{FORMAT_HEADER}");
        let _ = writeln!(
            out,
            "patients={} horizon={} classes={} step_seconds={}",
            self.records.len(),
            self.horizon,
            self.n_classes,
            super::DOSE_STEP_SECONDS
        );
        let model_json =
            serde_json::to_string(&self.model).expect("model serialization is infallible");
        let _ = writeln!(out, "model {model_json}");
        for r in &self.records {
            let _ = writeln!(
                out,
                "record {} {} {} {} {} {} {}",
                r.id,
                r.class_label,
                r.covariates.age,
                r.covariates.weight,
                r.covariates.height,
                r.covariates.sex,
                r.seed
            );
            let _ = writeln!(out, "ppf {}", join_floats(&r.doses.ppf));
            let _ = writeln!(out, "rftn {}", join_floats(&r.doses.rftn));
            let _ = writeln!(out, "bis {}", join_floats(&r.bis.0));
        }
        out
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string_lossless())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        Dataset::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Dataset> {
        let mut lines = text.lines().enumerate();
        let parse_err = |line: usize, detail: String| DatasetError::Parse {
            line: line + 1,
            detail,
        };

        let (n, header) = lines
            .next()
            .ok_or_else(|| parse_err(0, "empty file".into()))?;
        if header != FORMAT_HEADER {
            return Err(parse_err(n, format!("expected `{FORMAT_HEADER}`")));
        }

        let (n, counts) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing counts line".into()))?;
        let mut patients = 0usize;
        let mut horizon = 0usize;
        let mut classes = 1usize;
        for field in counts.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| parse_err(n, format!("bad field `{field}`")))?;
            match key {
                "patients" => {
                    patients = value
                        .parse()
                        .map_err(|e| parse_err(n, format!("patients: {e}")))?
                }
                "horizon" => {
                    horizon = value
                        .parse()
                        .map_err(|e| parse_err(n, format!("horizon: {e}")))?
                }
                "classes" => {
                    classes = value
                        .parse()
                        .map_err(|e| parse_err(n, format!("classes: {e}")))?
                }
                "step_seconds" => {}
                other => return Err(parse_err(n, format!("unknown field `{other}`"))),
            }
        }

        let (n, model_line) = lines
            .next()
            .ok_or_else(|| parse_err(2, "missing model line".into()))?;
        let model_json = model_line
            .strip_prefix("model ")
            .ok_or_else(|| parse_err(n, "expected `model <json>`".into()))?;
        let model: PatientModel = serde_json::from_str(model_json)
            .map_err(|e| parse_err(n, format!("model json: {e}")))?;

        let mut records = Vec::with_capacity(patients);
        while let Some((n, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let rest = line
                .strip_prefix("record ")
                .ok_or_else(|| parse_err(n, "expected `record ...`".into()))?;
            let fields: Vec<&str> = rest.split_whitespace().collect();
            if fields.len() != 7 {
                return Err(parse_err(n, format!("record needs 7 fields, got {}", fields.len())));
            }
            let id: usize = fields[0]
                .parse()
                .map_err(|e| parse_err(n, format!("id: {e}")))?;
            let class_label: usize = fields[1]
                .parse()
                .map_err(|e| parse_err(n, format!("class: {e}")))?;
            let nums: Vec<f64> = fields[2..6]
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(n, format!("covariates: {e}")))?;
            let seed: u64 = fields[6]
                .parse()
                .map_err(|e| parse_err(n, format!("seed: {e}")))?;
            let covariates = PatientCovariates::new(nums[0], nums[1], nums[2], nums[3])?;

            let ppf = expect_series(&mut lines, "ppf", horizon)?;
            let rftn = expect_series(&mut lines, "rftn", horizon)?;
            let bis = expect_series(&mut lines, "bis", horizon)?;
            records.push(PatientRecord {
                id,
                class_label,
                covariates,
                seed,
                doses: DoseHistory::new(ppf, rftn)?,
                bis: BisTrajectory(bis),
            });
        }
        if records.len() != patients {
            return Err(DatasetError::Parse {
                line: 0,
                detail: format!(
                    "header promises {patients} records, found {}",
                    records.len()
                ),
            });
        }
        Ok(Dataset {
            horizon,
            n_classes: classes,
            model,
            records,
        })
    }

    /// SHA-256 of the serialized form; the identity used to refuse
    /// cross-dataset comparisons.
    pub fn sha256_hex(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_string_lossless().as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn expect_series<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    tag: &str,
    horizon: usize,
) -> Result<Vec<f64>> {
    let (n, line) = lines.next().ok_or(DatasetError::Parse {
        line: 0,
        detail: format!("missing `{tag}` series"),
    })?;
    let rest = line.strip_prefix(tag).ok_or(DatasetError::Parse {
        line: n + 1,
        detail: format!("expected `{tag} ...`"),
    })?;
    let values: Vec<f64> = rest
        .split_whitespace()
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| DatasetError::Parse {
            line: n + 1,
            detail: format!("{tag}: {e}"),
        })?;
    if values.len() != horizon {
        return Err(DatasetError::Parse {
            line: n + 1,
            detail: format!("{tag} has {} values, expected {horizon}", values.len()),
        });
    }
    Ok(values)
}

fn join_floats(values: &[f64]) -> String {
    let mut out = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
    }
    out
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// SHA-256 of a file's raw bytes.
pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DatasetConfig {
        DatasetConfig {
            patients: 6,
            horizon: 60,
            seed: 3,
            classes: 2,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let ds = Dataset::synthesize(&small_config()).unwrap();
        let text = ds.to_string_lossless();
        let back = Dataset::parse(&text).unwrap();
        assert_eq!(ds, back);
        assert_eq!(text, back.to_string_lossless());
    }

    #[test]
    fn synthesis_is_deterministic() {
        let a = Dataset::synthesize(&small_config()).unwrap();
        let b = Dataset::synthesize(&small_config()).unwrap();
        assert_eq!(a.sha256_hex(), b.sha256_hex());

        let mut other = small_config();
        other.seed = 4;
        let c = Dataset::synthesize(&other).unwrap();
        assert_ne!(a.sha256_hex(), c.sha256_hex());
    }

    #[test]
    fn empty_dataset_still_carries_a_header() {
        let cfg = DatasetConfig {
            patients: 0,
            ..small_config()
        };
        let ds = Dataset::synthesize(&cfg).unwrap();
        let text = ds.to_string_lossless();
        assert!(text.starts_with(FORMAT_HEADER));
        let back = Dataset::parse(&text).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.horizon, 60);
    }

    #[test]
    fn class_labels_alternate_families() {
        let ds = Dataset::synthesize(&small_config()).unwrap();
        for r in &ds.records {
            assert_eq!(r.class_label, r.id % 2);
        }
    }

    #[test]
    fn truncated_file_is_rejected_with_line_info() {
        let ds = Dataset::synthesize(&small_config()).unwrap();
        let text = ds.to_string_lossless();
        let cut: String = text.lines().take(5).collect::<Vec<_>>().join("\n");
        let err = Dataset::parse(&cut).unwrap_err();
        assert!(matches!(err, DatasetError::Parse { .. }));
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let err = Dataset::parse("something-else v9\n").unwrap_err();
        assert!(err.to_string().contains("ganlab-dataset"));
    }
}
