//! Runtime detectors for the three classic adversarial-training pathologies:
//! vanishing generator gradients, mode collapse, and non-convergent
//! oscillation. Each detector is a pure function of persisted run data, so
//! every diagnosis can be recomputed from the logs alone.

use super::StepRecord;
use crate::metrics::least_squares_slope;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiagnosisKind {
    VanishingGradient,
    ModeCollapse,
    NonConvergence,
}

impl DiagnosisKind {
    pub fn name(self) -> &'static str {
        match self {
            DiagnosisKind::VanishingGradient => "vanishing-gradient",
            DiagnosisKind::ModeCollapse => "mode-collapse",
            DiagnosisKind::NonConvergence => "non-convergence",
        }
    }
}

/// One fired detector: what, where, and the measured statistic against its
/// threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diagnosis {
    pub kind: DiagnosisKind,
    pub step: usize,
    pub statistic: f64,
    pub threshold: f64,
}

/// Detector thresholds; the defaults realize the documented predicates.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Steps per vanishing-gradient window.
    pub vanish_window: usize,
    /// Median generator gradient norm below this fires (with the accuracy
    /// condition).
    pub vanish_grad_eps: f64,
    /// Median discriminator accuracy above this indicates an over-strong D.
    pub vanish_accuracy: f64,
    /// Generated spread below this fraction of the real spread collapses.
    pub collapse_ratio: f64,
    /// Minimum probe batch for the collapse statistic.
    pub collapse_min_batch: usize,
    /// Minimum series length before the oscillation detector runs.
    pub nonconv_min_len: usize,
    /// |least-squares slope| below this counts as trendless.
    pub nonconv_slope_eps: f64,
    /// Negative autocorrelation threshold.
    pub nonconv_autocorr: f64,
    /// Autocorrelation lags searched, 1..=max_lag.
    pub nonconv_max_lag: usize,
}

impl Default for DetectorConfig {
    fn default() -> DetectorConfig {
        DetectorConfig {
            vanish_window: 50,
            vanish_grad_eps: 1e-6,
            vanish_accuracy: 0.95,
            collapse_ratio: 0.05,
            collapse_min_batch: 64,
            nonconv_min_len: 200,
            nonconv_slope_eps: 1e-3,
            nonconv_autocorr: -0.3,
            nonconv_max_lag: 20,
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fires when the generator's median gradient norm over the window starves
/// while the discriminator stays near-perfect.
pub fn detect_vanishing_gradient(
    window: &[StepRecord],
    cfg: &DetectorConfig,
) -> Option<Diagnosis> {
    if window.len() < cfg.vanish_window {
        return None;
    }
    let mut grads: Vec<f64> = window.iter().map(|r| r.g_grad_norm).collect();
    let mut accs: Vec<f64> = window.iter().map(|r| r.d_accuracy_train).collect();
    let grad_median = median(&mut grads);
    let acc_median = median(&mut accs);
    if grad_median < cfg.vanish_grad_eps && acc_median > cfg.vanish_accuracy {
        Some(Diagnosis {
            kind: DiagnosisKind::VanishingGradient,
            step: window.last().map_or(0, |r| r.step),
            statistic: grad_median,
            threshold: cfg.vanish_grad_eps,
        })
    } else {
        None
    }
}

/// Step index of the first window that fires, scanning forward.
pub fn first_vanishing_step(records: &[StepRecord], cfg: &DetectorConfig) -> Option<usize> {
    if records.len() < cfg.vanish_window {
        return None;
    }
    for end in cfg.vanish_window..=records.len() {
        let window = &records[end - cfg.vanish_window..end];
        if detect_vanishing_gradient(window, cfg).is_some() {
            return Some(records[end - 1].step);
        }
    }
    None
}

/// Mean pairwise Euclidean distance between flattened samples.
pub fn mean_pairwise_distance(samples: &[Vec<f64>]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = samples[i]
                .iter()
                .zip(&samples[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            total += d;
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Fires when the generated probe batch has collapsed relative to an
/// equal-size real sample.
pub fn detect_mode_collapse(
    generated: &[Vec<f64>],
    real: &[Vec<f64>],
    at_step: usize,
    cfg: &DetectorConfig,
) -> Option<Diagnosis> {
    if generated.len() < cfg.collapse_min_batch || real.len() < cfg.collapse_min_batch {
        return None;
    }
    let gen_spread = mean_pairwise_distance(generated);
    let real_spread = mean_pairwise_distance(real);
    if real_spread <= 0.0 {
        return None;
    }
    let ratio = gen_spread / real_spread;
    if ratio < cfg.collapse_ratio {
        Some(Diagnosis {
            kind: DiagnosisKind::ModeCollapse,
            step: at_step,
            statistic: ratio,
            threshold: cfg.collapse_ratio,
        })
    } else {
        None
    }
}

/// Fired/not-fired at each candidate threshold, for the sensitivity report.
pub fn collapse_sensitivity(
    generated: &[Vec<f64>],
    real: &[Vec<f64>],
    at_step: usize,
    cfg: &DetectorConfig,
    thresholds: &[f64],
) -> Vec<(f64, bool)> {
    thresholds
        .iter()
        .map(|&ratio| {
            let probe_cfg = DetectorConfig {
                collapse_ratio: ratio,
                ..*cfg
            };
            let fired = detect_mode_collapse(generated, real, at_step, &probe_cfg).is_some();
            (ratio, fired)
        })
        .collect()
}

/// Sample autocorrelation at the given lag.
pub fn autocorrelation(series: &[f64], lag: usize) -> f64 {
    let n = series.len();
    if lag >= n {
        return 0.0;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let denom: f64 = series.iter().map(|v| (v - mean) * (v - mean)).sum();
    if denom == 0.0 {
        return 0.0;
    }
    let num: f64 = (0..n - lag)
        .map(|t| (series[t] - mean) * (series[t + lag] - mean))
        .sum();
    num / denom
}

/// Fires when the last half of the loss series is trendless yet oscillating:
/// |slope| below epsilon and some lag-k autocorrelation below the negative
/// threshold.
pub fn detect_non_convergence(series: &[f64], cfg: &DetectorConfig) -> Option<Diagnosis> {
    if series.len() < cfg.nonconv_min_len {
        return None;
    }
    let tail = &series[series.len() / 2..];
    let slope = least_squares_slope(tail);
    if slope.abs() >= cfg.nonconv_slope_eps {
        return None;
    }
    let mut worst = f64::INFINITY;
    for lag in 1..=cfg.nonconv_max_lag.min(tail.len().saturating_sub(1)) {
        worst = worst.min(autocorrelation(tail, lag));
    }
    if worst < cfg.nonconv_autocorr {
        Some(Diagnosis {
            kind: DiagnosisKind::NonConvergence,
            step: series.len(),
            statistic: worst,
            threshold: cfg.nonconv_autocorr,
        })
    } else {
        None
    }
}
