//! Augmentation quality statistics and run comparison.
//!
//! The five statistics quantify what a clinician would read off a dose/BIS
//! panel: how tightly BIS holds the surgical target over maintenance
//! (`bis_stability`, the primary ranking key), whether it trends away
//! (`bis_drift`), whether the profile has the induction peak (`peak_score`),
//! how scattered the maintenance dosing is (`dose_dispersion`), and how well
//! a held-out discriminator still separates real from generated
//! (`d_accuracy`).

use std::fmt::Write as _;

use thiserror::Error;

use crate::pkpd::{simulate_bis, DoseHistory, PatientCovariates, PatientModel, PkpdError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("maintenance window {start}..{end} out of range for horizon {horizon}")]
    Window {
        start: usize,
        end: usize,
        horizon: usize,
    },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch sizes differ: {doses} dose histories vs {covariates} covariate sets")]
    BatchMismatch { doses: usize, covariates: usize },
    #[error("runs are not comparable: dataset hash {left} vs {right}")]
    DatasetMismatch { left: String, right: String },
    #[error("need at least one run to report on")]
    NoRuns,
    #[error(transparent)]
    Pkpd(#[from] PkpdError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Maintenance window boundaries on the dose grid, plus the BIS target.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WindowConfig {
    /// First maintenance step (inclusive).
    pub start: usize,
    /// End of maintenance (exclusive); taper begins here.
    pub end: usize,
    /// Steps counted as "first two minutes" for the peak statistic.
    pub induction_steps: usize,
    pub bis_target: f64,
}

impl WindowConfig {
    /// Default window: steps 15 through 0.9·T.
    pub fn default_for(horizon: usize) -> WindowConfig {
        WindowConfig {
            start: 15,
            end: (horizon as f64 * 0.9).floor() as usize,
            induction_steps: 12,
            bis_target: 50.0,
        }
    }

    fn validate(&self, horizon: usize) -> Result<()> {
        if self.start >= self.end || self.end > horizon {
            return Err(MetricsError::Window {
                start: self.start,
                end: self.end,
                horizon,
            });
        }
        Ok(())
    }
}

/// The five statistics, each a batch mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationScore {
    /// Mean |BIS − target| over the maintenance window.
    pub bis_stability: f64,
    /// Least-squares slope of BIS over maintenance, per step.
    pub bis_drift: f64,
    /// Max dose in the induction span over the maintenance mean dose.
    pub peak_score: f64,
    /// Coefficient of variation of the total dose over maintenance.
    pub dose_dispersion: f64,
    /// Held-out discriminator accuracy on real vs generated.
    pub d_accuracy: f64,
}

/// Slope of the least-squares line through (0, y₀), (1, y₁), …
pub fn least_squares_slope(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 2 {
        return 0.0;
    }
    let n_f = n as f64;
    let x_mean = (n_f - 1.0) / 2.0;
    let y_mean = series.iter().sum::<f64>() / n_f;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &y) in series.iter().enumerate() {
        let dx = i as f64 - x_mean;
        num += dx * (y - y_mean);
        den += dx * dx;
    }
    num / den
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Score one generated batch against the PK-PD simulator.
///
/// `d_accuracy` is supplied by the caller (it needs the discriminator); the
/// four dose/BIS statistics are pure functions of the arguments, so scores
/// are exactly recomputable from persisted dumps.
pub fn score_batch(
    doses: &[DoseHistory],
    covariates: &[PatientCovariates],
    base_model: &PatientModel,
    window: &WindowConfig,
    d_accuracy: f64,
) -> Result<AugmentationScore> {
    if doses.is_empty() {
        return Err(MetricsError::EmptyBatch);
    }
    if doses.len() != covariates.len() {
        return Err(MetricsError::BatchMismatch {
            doses: doses.len(),
            covariates: covariates.len(),
        });
    }
    let horizon = doses[0].len();
    window.validate(horizon)?;

    let mut stability = 0.0;
    let mut drift = 0.0;
    let mut peak = 0.0;
    let mut dispersion = 0.0;
    for (history, cov) in doses.iter().zip(covariates) {
        let model = base_model.for_covariates(cov);
        let bis = simulate_bis(history, &model)?;
        let bis_window = &bis.0[window.start..window.end];
        stability += bis_window
            .iter()
            .map(|v| (v - window.bis_target).abs())
            .sum::<f64>()
            / bis_window.len() as f64;
        drift += least_squares_slope(bis_window);

        let total: Vec<f64> = history
            .ppf
            .iter()
            .zip(&history.rftn)
            .map(|(p, r)| p + r)
            .collect();
        let induction_end = window.induction_steps.min(horizon);
        let induction_max = total[..induction_end]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let maint = &total[window.start..window.end];
        let maint_mean = mean(maint);
        peak += if maint_mean > 0.0 {
            induction_max / maint_mean
        } else {
            0.0
        };
        let variance = maint
            .iter()
            .map(|v| (v - maint_mean).powi(2))
            .sum::<f64>()
            / maint.len() as f64;
        dispersion += if maint_mean > 0.0 {
            variance.sqrt() / maint_mean
        } else {
            0.0
        };
    }
    let n = doses.len() as f64;
    Ok(AugmentationScore {
        bis_stability: stability / n,
        bis_drift: drift / n,
        peak_score: peak / n,
        dose_dispersion: dispersion / n,
        d_accuracy,
    })
}

/// One run's scored outcome, keyed for comparison.
#[derive(Clone, Debug)]
pub struct RunScore {
    pub variant: String,
    pub seed: u64,
    pub dataset_hash: String,
    pub score: AugmentationScore,
}

/// Aggregated row of the comparison table.
#[derive(Clone, Debug)]
pub struct ReportRow {
    pub variant: String,
    pub seeds: usize,
    pub bis_stability: f64,
    pub bis_stability_min: f64,
    pub bis_stability_max: f64,
    pub bis_drift: f64,
    pub peak_score: f64,
    pub dose_dispersion: f64,
    pub d_accuracy: f64,
}

/// Ranked comparison across variants.
#[derive(Clone, Debug)]
pub struct ComparisonReport {
    pub dataset_hash: String,
    /// Rows sorted by mean bis_stability ascending, ties broken by name.
    pub rows: Vec<ReportRow>,
}

impl ComparisonReport {
    /// Tab-delimited text with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "variant\tseeds\tbis_stability\tbis_stability_min\tbis_stability_max\t\
             bis_drift\tpeak_score\tdose_dispersion\td_accuracy\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.variant,
                r.seeds,
                r.bis_stability,
                r.bis_stability_min,
                r.bis_stability_max,
                r.bis_drift,
                r.peak_score,
                r.dose_dispersion,
                r.d_accuracy
            );
        }
        out
    }
}

/// Rank per-variant mean scores. Every entry must come from the same
/// dataset; mismatched hashes are refused as non-comparable.
pub fn compare_runs(entries: &[RunScore]) -> Result<ComparisonReport> {
    let first = entries.first().ok_or(MetricsError::NoRuns)?;
    for e in entries {
        if e.dataset_hash != first.dataset_hash {
            return Err(MetricsError::DatasetMismatch {
                left: first.dataset_hash.clone(),
                right: e.dataset_hash.clone(),
            });
        }
    }
    let mut variants: Vec<String> = entries.iter().map(|e| e.variant.clone()).collect();
    variants.sort();
    variants.dedup();

    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let group: Vec<&RunScore> = entries.iter().filter(|e| e.variant == variant).collect();
        let collect = |f: fn(&AugmentationScore) -> f64| -> Vec<f64> {
            group.iter().map(|e| f(&e.score)).collect()
        };
        let stability = collect(|s| s.bis_stability);
        rows.push(ReportRow {
            variant,
            seeds: group.len(),
            bis_stability: mean(&stability),
            bis_stability_min: stability.iter().cloned().fold(f64::INFINITY, f64::min),
            bis_stability_max: stability.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            bis_drift: mean(&collect(|s| s.bis_drift)),
            peak_score: mean(&collect(|s| s.peak_score)),
            dose_dispersion: mean(&collect(|s| s.dose_dispersion)),
            d_accuracy: mean(&collect(|s| s.d_accuracy)),
        });
    }
    rows.sort_by(|a, b| {
        a.bis_stability
            .partial_cmp(&b.bis_stability)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.variant.cmp(&b.variant))
    });
    Ok(ComparisonReport {
        dataset_hash: first.dataset_hash.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pkpd::dataset::{Dataset, DatasetConfig};

    fn covariates() -> PatientCovariates {
        PatientCovariates::new(45.0, 75.0, 172.0, 1.0).unwrap()
    }

    #[test]
    fn flat_series_statistics() {
        // A series pinned at the target has zero deviation and zero slope.
        let series = vec![50.0; 40];
        assert_eq!(least_squares_slope(&series), 0.0);
        let dev: f64 = series.iter().map(|v| (v - 50.0_f64).abs()).sum();
        assert_eq!(dev, 0.0);
    }

    #[test]
    fn slope_recovers_a_linear_trend() {
        let series: Vec<f64> = (0..30).map(|i| 3.0 + 0.25 * i as f64).collect();
        assert!((least_squares_slope(&series) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_dose_batch_scores_baseline_distance() {
        // No drug: BIS ≡ E0, so stability = |E0 − 50| and drift = 0.
        let model = PatientModel::reference();
        let horizon = 60;
        let doses = vec![DoseHistory::new(vec![0.0; horizon], vec![0.0; horizon]).unwrap()];
        let covs = vec![covariates()];
        let window = WindowConfig::default_for(horizon);
        let score = score_batch(&doses, &covs, &model, &window, 0.5).unwrap();
        assert_eq!(score.bis_stability, model.pd.e0 - 50.0);
        assert_eq!(score.bis_drift, 0.0);
        assert_eq!(score.d_accuracy, 0.5);
    }

    #[test]
    fn constant_profile_has_unit_peak_score() {
        let horizon = 60;
        let doses = vec![DoseHistory::new(vec![1.5; horizon], vec![1.0; horizon]).unwrap()];
        let covs = vec![covariates()];
        let window = WindowConfig::default_for(horizon);
        let score =
            score_batch(&doses, &covs, &PatientModel::reference(), &window, 0.5).unwrap();
        assert!((score.peak_score - 1.0).abs() < 1e-12);
        assert_eq!(score.dose_dispersion, 0.0);
    }

    #[test]
    fn ground_truth_batch_is_stable_by_calibration() {
        let cfg = DatasetConfig {
            patients: 8,
            horizon: 100,
            seed: 5,
            classes: 1,
            ..DatasetConfig::default()
        };
        let ds = Dataset::synthesize(&cfg).unwrap();
        let doses: Vec<DoseHistory> = ds.records.iter().map(|r| r.doses.clone()).collect();
        let covs: Vec<PatientCovariates> = ds.records.iter().map(|r| r.covariates).collect();
        let window = WindowConfig::default_for(cfg.horizon);
        let score = score_batch(&doses, &covs, &ds.model, &window, 0.5).unwrap();
        assert!(
            score.bis_stability <= 10.0,
            "ground truth scored {}",
            score.bis_stability
        );
        assert!(score.peak_score > 1.5, "induction peak missing");
    }

    #[test]
    fn window_out_of_range_is_refused() {
        let horizon = 30;
        let doses = vec![DoseHistory::new(vec![1.0; horizon], vec![1.0; horizon]).unwrap()];
        let covs = vec![covariates()];
        let window = WindowConfig {
            start: 15,
            end: 40,
            induction_steps: 12,
            bis_target: 50.0,
        };
        let err =
            score_batch(&doses, &covs, &PatientModel::reference(), &window, 0.5).unwrap_err();
        assert!(matches!(err, MetricsError::Window { .. }));
    }

    fn dummy_score(stability: f64) -> AugmentationScore {
        AugmentationScore {
            bis_stability: stability,
            bis_drift: 0.01,
            peak_score: 2.0,
            dose_dispersion: 0.1,
            d_accuracy: 0.6,
        }
    }

    #[test]
    fn identical_runs_tie_with_identical_statistics() {
        let entries = vec![
            RunScore {
                variant: "lsgan".into(),
                seed: 1,
                dataset_hash: "h".into(),
                score: dummy_score(5.0),
            },
            RunScore {
                variant: "wgan".into(),
                seed: 1,
                dataset_hash: "h".into(),
                score: dummy_score(5.0),
            },
        ];
        let report = compare_runs(&entries).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].bis_stability, report.rows[1].bis_stability);
        // Tie broken by name.
        assert_eq!(report.rows[0].variant, "lsgan");
    }

    #[test]
    fn ranking_ignores_presentation_order() {
        let a = RunScore {
            variant: "vanilla-nonsaturating".into(),
            seed: 1,
            dataset_hash: "h".into(),
            score: dummy_score(9.0),
        };
        let b = RunScore {
            variant: "vaegan".into(),
            seed: 1,
            dataset_hash: "h".into(),
            score: dummy_score(3.0),
        };
        let fwd = compare_runs(&[a.clone(), b.clone()]).unwrap();
        let rev = compare_runs(&[b, a]).unwrap();
        let names =
            |r: &ComparisonReport| r.rows.iter().map(|x| x.variant.clone()).collect::<Vec<_>>();
        assert_eq!(names(&fwd), names(&rev));
        assert_eq!(fwd.rows[0].variant, "vaegan");
    }

    #[test]
    fn mismatched_dataset_hashes_are_refused() {
        let a = RunScore {
            variant: "lsgan".into(),
            seed: 1,
            dataset_hash: "aaa".into(),
            score: dummy_score(5.0),
        };
        let b = RunScore {
            variant: "lsgan".into(),
            seed: 2,
            dataset_hash: "bbb".into(),
            score: dummy_score(5.0),
        };
        let err = compare_runs(&[a, b]).unwrap_err();
        assert!(matches!(err, MetricsError::DatasetMismatch { .. }));
    }

    #[test]
    fn spread_reflects_per_seed_variation() {
        let mk = |seed, stability| RunScore {
            variant: "acgan".into(),
            seed,
            dataset_hash: "h".into(),
            score: dummy_score(stability),
        };
        let report = compare_runs(&[mk(1, 4.0), mk(2, 6.0), mk(3, 5.0)]).unwrap();
        let row = &report.rows[0];
        assert_eq!(row.seeds, 3);
        assert_eq!(row.bis_stability, 5.0);
        assert_eq!(row.bis_stability_min, 4.0);
        assert_eq!(row.bis_stability_max, 6.0);
        let tsv = report.to_tsv();
        assert!(tsv.starts_with("variant\tseeds\t"));
        assert_eq!(tsv.lines().count(), 2);
    }
}
