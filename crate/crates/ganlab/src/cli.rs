//! Command-line entry points: dataset synthesis, training runs, report and
//! figure generation, and run self-verification.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical halt,
//! 4 missing artifact, 1 anything else.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{load_config, ConfigError, ExperimentConfig, OUTPUT_ROOT_ENV};
use crate::harness::{self, read_probe_dump, HarnessError, RunManifest};
use crate::losses::Variant;
use crate::metrics::{self, AugmentationScore, RunScore};
use crate::pkpd::dataset::{hex_string, Dataset};
use crate::pkpd::simulate_bis;
use crate::report::{render_figure, Panel};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("numerical halt: {0}")]
    NumericalHalt(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::NumericalHalt(_) => 3,
            CliError::MissingArtifact(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> CliError {
        CliError::Config(e.to_string())
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> CliError {
        if e.is_numerical() {
            CliError::NumericalHalt(e.to_string())
        } else {
            CliError::Other(e.to_string())
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Desk-scale GAN laboratory for anesthetic dosage augmentation.
#[derive(Parser, Debug)]
#[command(name = "ganlab", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize the ground-truth dataset described by the config.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. --set dataset.patients=64.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Directory for the dataset file (beats the config's path).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one variant across the configured seeds.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Variant name; beats the config's choice.
        #[arg(long)]
        variant: Option<String>,
        /// Single seed; beats the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        /// Step count; beats the config.
        #[arg(long)]
        steps: Option<usize>,
        /// Output root for run directories.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Build the comparison table and figure from completed runs.
    Report {
        /// Output directory for report.tsv and report.svg.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Completed run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Recompute a logged metric from a run's dumps and check it matches.
    Verify {
        /// Completed run directory.
        run: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, set, out } => cmd_synth(&config, &set, out.as_deref()),
        Command::Train {
            config,
            variant,
            seed,
            steps,
            out,
            set,
        } => cmd_train(
            &config,
            variant.as_deref(),
            seed,
            steps,
            out.as_deref(),
            &set,
        ),
        Command::Report { out, runs } => cmd_report(&runs, out.as_deref()),
        Command::Verify { run } => cmd_verify(&run),
    }
}

fn default_out_root() -> PathBuf {
    match std::env::var(OUTPUT_ROOT_ENV) {
        Ok(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("runs"),
    }
}

/// Synthesize the dataset and print its hash.
pub fn cmd_synth(config_path: &Path, overrides: &[String], out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config_path, overrides)?;
    let dataset = Dataset::synthesize(&cfg.dataset.to_dataset_config())
        .map_err(|e| CliError::Other(e.to_string()))?;
    let target = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Other(e.to_string()))?;
            dir.join(
                cfg.dataset
                    .file
                    .file_name()
                    .unwrap_or_else(|| std::ffi::OsStr::new("dataset.txt")),
            )
        }
        None => {
            if let Some(parent) = cfg.dataset.file.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)
                        .map_err(|e| CliError::Other(e.to_string()))?;
                }
            }
            cfg.dataset.file.clone()
        }
    };
    dataset
        .write_to(&target)
        .map_err(|e| CliError::Other(e.to_string()))?;
    println!("dataset {} records={}", target.display(), dataset.len());
    println!("dataset-hash {}", dataset.sha256_hex());
    Ok(())
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, String)> {
    let path = &cfg.dataset.file;
    if !path.exists() {
        return Err(CliError::MissingArtifact(format!(
            "dataset file {} (run `ganlab synth` first)",
            path.display()
        )));
    }
    let dataset = Dataset::read_from(path).map_err(|e| CliError::Other(e.to_string()))?;
    let hash = dataset.sha256_hex();
    Ok((dataset, hash))
}

fn manifest_hash(run_dir: &Path) -> Result<String> {
    let bytes = std::fs::read(run_dir.join("manifest.json")).map_err(|_| {
        CliError::MissingArtifact(format!("{}/manifest.json", run_dir.display()))
    })?;
    use sha2::Digest;
    let mut hasher = sha2::Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

/// Train the configured variant across seeds; seeds fan out in parallel.
pub fn cmd_train(
    config_path: &Path,
    variant: Option<&str>,
    seed: Option<u64>,
    steps: Option<usize>,
    out: Option<&Path>,
    overrides: &[String],
) -> Result<()> {
    let mut cfg = load_config(config_path, overrides)?;
    if let Some(name) = variant {
        cfg.variant.variant = name.parse::<Variant>().map_err(CliError::Config)?;
    }
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(n) = steps {
        cfg.training.steps = n;
    }
    cfg.validate()?;

    let (dataset, hash) = load_dataset(&cfg)?;
    let out_root = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.root.clone().unwrap_or_else(default_out_root));
    std::fs::create_dir_all(&out_root).map_err(|e| CliError::Other(e.to_string()))?;

    let materialized = cfg.to_toml();
    let variant_name = cfg.variant.variant.name();
    let outcomes: Vec<Result<PathBuf>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let run_dir = out_root.join(format!("{variant_name}-seed{seed}"));
            std::fs::create_dir_all(&run_dir).map_err(|e| CliError::Other(e.to_string()))?;
            std::fs::write(run_dir.join("config.toml"), &materialized)
                .map_err(|e| CliError::Other(e.to_string()))?;
            harness::run_experiment(
                &dataset,
                &hash,
                &cfg.variant,
                &cfg.training,
                seed,
                &run_dir,
            )?;
            Ok(run_dir)
        })
        .collect();

    for outcome in outcomes {
        let run_dir = outcome?;
        println!(
            "run {} manifest-hash {}",
            run_dir.display(),
            manifest_hash(&run_dir)?
        );
    }
    println!("dataset-hash {hash}");
    Ok(())
}

fn read_manifest(run_dir: &Path) -> Result<RunManifest> {
    let path = run_dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|_| CliError::MissingArtifact(path.display().to_string()))?;
    serde_json::from_str(&text).map_err(|e| CliError::Other(format!("manifest: {e}")))
}

fn last_metrics_row(run_dir: &Path) -> Result<(usize, AugmentationScore)> {
    let path = run_dir.join("metrics.csv");
    let text = std::fs::read_to_string(&path)
        .map_err(|_| CliError::MissingArtifact(path.display().to_string()))?;
    let line = text
        .lines()
        .last()
        .filter(|l| !l.starts_with("step,"))
        .ok_or_else(|| CliError::Other(format!("{}: no metric rows", path.display())))?;
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 6 {
        return Err(CliError::Other(format!(
            "{}: bad metrics row `{line}`",
            path.display()
        )));
    }
    let parse = |s: &str| {
        s.parse::<f64>()
            .map_err(|e| CliError::Other(format!("metrics.csv: {e}")))
    };
    Ok((
        fields[0]
            .parse::<usize>()
            .map_err(|e| CliError::Other(format!("metrics.csv: {e}")))?,
        AugmentationScore {
            bis_stability: parse(fields[1])?,
            bis_drift: parse(fields[2])?,
            peak_score: parse(fields[3])?,
            dose_dispersion: parse(fields[4])?,
            d_accuracy: parse(fields[5])?,
        },
    ))
}

fn final_dump_path(run_dir: &Path) -> Result<(usize, PathBuf)> {
    let dumps = run_dir.join("dumps");
    let mut best: Option<(usize, PathBuf)> = None;
    let entries = std::fs::read_dir(&dumps)
        .map_err(|_| CliError::MissingArtifact(dumps.display().to_string()))?;
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(step_str) = name
            .strip_prefix("probe_")
            .and_then(|s| s.strip_suffix(".txt"))
        {
            if let Ok(step) = step_str.parse::<usize>() {
                if best.as_ref().map_or(true, |(s, _)| step > *s) {
                    best = Some((step, entry.path()));
                }
            }
        }
    }
    best.ok_or_else(|| CliError::MissingArtifact(format!("{}: no probe dumps", dumps.display())))
}

/// First few samples of a dump rendered into a figure panel, with BIS
/// recomputed through the simulator.
fn panel_from_dump(title: &str, path: &Path, manifest: &RunManifest) -> Result<Panel> {
    let (_, doses, covs) = read_probe_dump(path).map_err(|e| CliError::Other(e.to_string()))?;
    let keep = doses.len().min(3);
    let mut panel = Panel {
        title: title.to_string(),
        ppf: Vec::with_capacity(keep),
        rftn: Vec::with_capacity(keep),
        bis: Vec::with_capacity(keep),
    };
    for (d, c) in doses.iter().zip(&covs).take(keep) {
        let model = manifest.patient_model.for_covariates(c);
        let bis = simulate_bis(d, &model).map_err(|e| CliError::Other(e.to_string()))?;
        panel.ppf.push(d.ppf.clone());
        panel.rftn.push(d.rftn.clone());
        panel.bis.push(bis.0);
    }
    Ok(panel)
}

/// Rank completed runs and emit the comparison table plus the multi-panel
/// figure. Completed run directories are never written to.
pub fn cmd_report(run_dirs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    if run_dirs.is_empty() {
        return Err(CliError::Config("report needs at least one run".into()));
    }
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_out_root().join("report"));
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Other(e.to_string()))?;

    let mut entries = Vec::new();
    let mut manifests = Vec::new();
    for dir in run_dirs {
        let manifest = read_manifest(dir)?;
        let (_, score) = last_metrics_row(dir)?;
        entries.push(RunScore {
            variant: manifest.variant.variant.name().to_string(),
            seed: manifest.seed,
            dataset_hash: manifest.dataset_hash.clone(),
            score,
        });
        println!("run {} manifest-hash {}", dir.display(), manifest_hash(dir)?);
        manifests.push((dir.clone(), manifest));
    }

    if entries.len() >= 2 {
        let report =
            metrics::compare_runs(&entries).map_err(|e| CliError::Other(e.to_string()))?;
        std::fs::write(out_dir.join("report.tsv"), report.to_tsv())
            .map_err(|e| CliError::Other(e.to_string()))?;
        println!("ranking:");
        print!("{}", report.to_tsv());
    }

    // Panels in the fixed variant order, ground truth first; one panel per
    // variant from its lowest-seed run.
    let mut panels = Vec::new();
    if manifests.len() >= 2 {
        let (first_dir, first_manifest) = &manifests[0];
        let real = first_dir.join("dumps").join("real.txt");
        if real.exists() {
            panels.push(panel_from_dump("Ground truth", &real, first_manifest)?);
        }
    }
    for variant in Variant::ALL {
        let mut candidates: Vec<&(PathBuf, RunManifest)> = manifests
            .iter()
            .filter(|(_, m)| m.variant.variant == variant)
            .collect();
        candidates.sort_by_key(|(_, m)| m.seed);
        if let Some((dir, manifest)) = candidates.first() {
            let (_, dump) = final_dump_path(dir)?;
            panels.push(panel_from_dump(variant.name(), &dump, manifest)?);
        }
    }
    std::fs::write(out_dir.join("report.svg"), render_figure(&panels))
        .map_err(|e| CliError::Other(e.to_string()))?;
    println!("report written to {}", out_dir.display());
    println!("dataset-hash {}", entries[0].dataset_hash);
    Ok(())
}

/// Recompute bis_stability from the final probe dump and require exact
/// agreement with the logged metrics row.
pub fn cmd_verify(run_dir: &Path) -> Result<()> {
    let manifest = read_manifest(run_dir)?;
    let (step, dump) = final_dump_path(run_dir)?;
    let (dump_step, doses, covs) =
        read_probe_dump(&dump).map_err(|e| CliError::Other(e.to_string()))?;
    if step != dump_step {
        return Err(CliError::Other(format!(
            "dump step {dump_step} does not match file name step {step}"
        )));
    }
    let rescored = metrics::score_batch(
        &doses,
        &covs,
        &manifest.patient_model,
        &manifest.window,
        0.0,
    )
    .map_err(|e| CliError::Other(e.to_string()))?;

    let path = run_dir.join("metrics.csv");
    let text = std::fs::read_to_string(&path)
        .map_err(|_| CliError::MissingArtifact(path.display().to_string()))?;
    let row = text
        .lines()
        .find(|l| l.split(',').next() == Some(&step.to_string()))
        .ok_or_else(|| CliError::Other(format!("metrics.csv has no row for step {step}")))?;
    let logged: f64 = row
        .split(',')
        .nth(1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CliError::Other("metrics.csv: bad bis_stability".into()))?;
    if rescored.bis_stability.to_bits() != logged.to_bits() {
        return Err(CliError::Other(format!(
            "bis_stability mismatch at step {step}: recomputed {} vs logged {logged}",
            rescored.bis_stability
        )));
    }
    println!(
        "verify {} ok: step {step} bis_stability {} matches dumps",
        run_dir.display(),
        logged
    );
    println!("manifest-hash {}", manifest_hash(run_dir)?);
    Ok(())
}
