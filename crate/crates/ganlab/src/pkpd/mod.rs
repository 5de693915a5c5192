//! Patient-response simulator: a three-compartment mammillary PK model per
//! drug, a first-order effect site, and a response-surface PD stage mapping
//! effect-site concentrations of the two drugs to a BIS value.
//!
//! Dose units are abstract non-negative "dose per 10-second step" values —
//! the source data convention carries no mass/volume dimension, and the
//! simulator inherits that. Integration is fixed-step RK4 at a configurable
//! inner dt (default 1 s) under the 10 s dose grid.
//!
//! All functions here are pure in (doses, model, seed); patients are
//! embarrassingly parallel.

pub mod dataset;
pub mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PkpdError {
    #[error("non-finite compartment state")]
    NonFinite,
    #[error("non-finite state at dose step {step}")]
    NonFiniteAt { step: usize },
    #[error("invalid dose history: {0}")]
    BadDose(String),
    #[error("covariates out of physiological bounds: {0}")]
    BadCovariates(String),
    #[error("invalid patient model: {0}")]
    BadModel(String),
    #[error(
        "plateau calibration could not bracket the BIS target inside [{lo}, {hi}]; \
         widen the profile plateau bounds"
    )]
    CalibrationBracket { lo: f64, hi: f64 },
}

pub type Result<T> = std::result::Result<T, PkpdError>;

/// Seconds per dose-history step.
pub const DOSE_STEP_SECONDS: f64 = 10.0;

/// Default inner integration step, seconds.
pub const DEFAULT_INNER_DT: f64 = 1.0;

/// Two-drug dosage history; entries are dose units per 10-second step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoseHistory {
    pub ppf: Vec<f64>,
    pub rftn: Vec<f64>,
}

impl DoseHistory {
    pub fn new(ppf: Vec<f64>, rftn: Vec<f64>) -> Result<DoseHistory> {
        if ppf.len() != rftn.len() {
            return Err(PkpdError::BadDose(format!(
                "channel lengths differ: ppf {} vs rftn {}",
                ppf.len(),
                rftn.len()
            )));
        }
        for (name, series) in [("ppf", &ppf), ("rftn", &rftn)] {
            if let Some(v) = series.iter().copied().find(|v| !v.is_finite() || *v < 0.0) {
                return Err(PkpdError::BadDose(format!(
                    "{name} contains invalid entry {v}"
                )));
            }
        }
        Ok(DoseHistory { ppf, rftn })
    }

    pub fn len(&self) -> usize {
        self.ppf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ppf.is_empty()
    }

    /// Flatten to the generator layout: ppf then rftn.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.len());
        out.extend_from_slice(&self.ppf);
        out.extend_from_slice(&self.rftn);
        out
    }

    /// Inverse of [`DoseHistory::flat`]; negative entries are clamped to
    /// zero so generated data always forms a valid history.
    pub fn from_flat(flat: &[f64]) -> Result<DoseHistory> {
        if flat.len() % 2 != 0 {
            return Err(PkpdError::BadDose(format!(
                "flat layout must have even length, got {}",
                flat.len()
            )));
        }
        let horizon = flat.len() / 2;
        let clamp = |v: &f64| v.max(0.0);
        DoseHistory::new(
            flat[..horizon].iter().map(clamp).collect(),
            flat[horizon..].iter().map(clamp).collect(),
        )
    }
}

/// Demographic covariates; bounds are validated on construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientCovariates {
    pub age: f64,
    pub weight: f64,
    pub height: f64,
    /// Binary indicator (0 or 1).
    pub sex: f64,
}

pub const AGE_RANGE: (f64, f64) = (18.0, 90.0);
pub const WEIGHT_RANGE: (f64, f64) = (40.0, 150.0);
pub const HEIGHT_RANGE: (f64, f64) = (140.0, 200.0);

impl PatientCovariates {
    pub fn new(age: f64, weight: f64, height: f64, sex: f64) -> Result<PatientCovariates> {
        let cov = PatientCovariates {
            age,
            weight,
            height,
            sex,
        };
        cov.validate()?;
        Ok(cov)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v, (lo, hi)) in [
            ("age", self.age, AGE_RANGE),
            ("weight", self.weight, WEIGHT_RANGE),
            ("height", self.height, HEIGHT_RANGE),
        ] {
            if !(v >= lo && v <= hi) {
                return Err(PkpdError::BadCovariates(format!(
                    "{name} = {v} outside [{lo}, {hi}]"
                )));
            }
        }
        if self.sex != 0.0 && self.sex != 1.0 {
            return Err(PkpdError::BadCovariates(format!(
                "sex must be 0 or 1, got {}",
                self.sex
            )));
        }
        Ok(())
    }

    /// Unit-interval features for network input.
    pub fn normalized(&self) -> [f64; 4] {
        [
            (self.age - AGE_RANGE.0) / (AGE_RANGE.1 - AGE_RANGE.0),
            (self.weight - WEIGHT_RANGE.0) / (WEIGHT_RANGE.1 - WEIGHT_RANGE.0),
            (self.height - HEIGHT_RANGE.0) / (HEIGHT_RANGE.1 - HEIGHT_RANGE.0),
            self.sex,
        ]
    }
}

/// One drug's PK parameters: central volume, mammillary rate constants
/// (per second), and the effect-site equilibration rate ke0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrugModel {
    pub volume: f64,
    pub k10: f64,
    pub k12: f64,
    pub k21: f64,
    pub k13: f64,
    pub k31: f64,
    pub ke0: f64,
}

impl DrugModel {
    fn validate(&self, name: &str) -> Result<()> {
        for (field, v) in [
            ("volume", self.volume),
            ("k10", self.k10),
            ("k12", self.k12),
            ("k21", self.k21),
            ("k13", self.k13),
            ("k31", self.k31),
            ("ke0", self.ke0),
        ] {
            if !(v > 0.0) {
                return Err(PkpdError::BadModel(format!(
                    "{name}.{field} must be > 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Response-surface PD parameters for the two-drug interaction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseSurface {
    /// Baseline BIS with no drug.
    pub e0: f64,
    /// Maximum BIS depression.
    pub emax: f64,
    pub ec50_ppf: f64,
    pub ec50_rftn: f64,
    /// Hill steepness.
    pub gamma: f64,
    /// Interaction coefficient.
    pub beta: f64,
}

/// Full patient model: per-drug PK plus the PD surface.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientModel {
    pub ppf: DrugModel,
    pub rftn: DrugModel,
    pub pd: ResponseSurface,
}

impl Default for PatientModel {
    fn default() -> PatientModel {
        PatientModel::reference()
    }
}

impl PatientModel {
    /// Reference parameter set in abstract units. These are artifact
    /// defaults chosen for plausible desk-scale dynamics, recorded in every
    /// run manifest, and overridable from configuration.
    pub fn reference() -> PatientModel {
        PatientModel {
            ppf: DrugModel {
                volume: 10.0,
                k10: 0.008,
                k12: 0.002,
                k21: 0.0008,
                k13: 0.0004,
                k31: 0.00005,
                ke0: 0.02,
            },
            rftn: DrugModel {
                volume: 8.0,
                k10: 0.015,
                k12: 0.003,
                k21: 0.001,
                k13: 0.0003,
                k31: 0.00007,
                ke0: 0.03,
            },
            pd: ResponseSurface {
                e0: 95.0,
                emax: 85.0,
                ec50_ppf: 2.0,
                ec50_rftn: 1.5,
                gamma: 2.0,
                beta: 1.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ppf.validate("ppf")?;
        self.rftn.validate("rftn")?;
        let pd = &self.pd;
        if !(pd.gamma > 0.0) {
            return Err(PkpdError::BadModel(format!(
                "gamma must be > 0, got {}",
                pd.gamma
            )));
        }
        if !(pd.emax > 0.0 && pd.emax <= pd.e0) {
            return Err(PkpdError::BadModel(format!(
                "need 0 < emax <= e0, got emax {} e0 {}",
                pd.emax, pd.e0
            )));
        }
        for (field, v) in [("ec50_ppf", pd.ec50_ppf), ("ec50_rftn", pd.ec50_rftn)] {
            if !(v > 0.0) {
                return Err(PkpdError::BadModel(format!(
                    "{field} must be > 0, got {v}"
                )));
            }
        }
        if !(pd.beta >= 0.0) {
            return Err(PkpdError::BadModel(format!(
                "beta must be >= 0, got {}",
                pd.beta
            )));
        }
        Ok(())
    }

    /// Covariate adjustment: volumes scale linearly with weight around the
    /// 70 kg reference; elimination and effect-site rates scale affinely
    /// with age around 40 years. A documented stand-in, not a clinical
    /// parameterization.
    pub fn for_covariates(&self, cov: &PatientCovariates) -> PatientModel {
        let weight_factor = cov.weight / 70.0;
        let age_factor = 1.0 + 0.002 * (40.0 - cov.age);
        let ke_factor = 1.0 + 0.001 * (40.0 - cov.age);
        let scale = |d: &DrugModel| DrugModel {
            volume: d.volume * weight_factor,
            k10: d.k10 * age_factor,
            ke0: d.ke0 * ke_factor,
            ..*d
        };
        PatientModel {
            ppf: scale(&self.ppf),
            rftn: scale(&self.rftn),
            pd: self.pd,
        }
    }
}

/// Simulated BIS time series on the dose grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BisTrajectory(pub Vec<f64>);

impl BisTrajectory {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn derivatives(state: &[f64; 3], rate: f64, drug: &DrugModel) -> [f64; 3] {
    let [a1, a2, a3] = *state;
    [
        -(drug.k10 + drug.k12 + drug.k13) * a1 + drug.k21 * a2 + drug.k31 * a3 + rate,
        drug.k12 * a1 - drug.k21 * a2,
        drug.k13 * a1 - drug.k31 * a3,
    ]
}

/// One RK4 step of the mammillary system under a constant zero-order
/// infusion `rate` (units per second) into the central compartment.
pub fn pk_step(state: [f64; 3], rate: f64, drug: &DrugModel, dt: f64) -> Result<[f64; 3]> {
    debug_assert!(dt > 0.0);
    let k1 = derivatives(&state, rate, drug);
    let mid1 = [
        state[0] + 0.5 * dt * k1[0],
        state[1] + 0.5 * dt * k1[1],
        state[2] + 0.5 * dt * k1[2],
    ];
    let k2 = derivatives(&mid1, rate, drug);
    let mid2 = [
        state[0] + 0.5 * dt * k2[0],
        state[1] + 0.5 * dt * k2[1],
        state[2] + 0.5 * dt * k2[2],
    ];
    let k3 = derivatives(&mid2, rate, drug);
    let end = [
        state[0] + dt * k3[0],
        state[1] + dt * k3[1],
        state[2] + dt * k3[2],
    ];
    let k4 = derivatives(&end, rate, drug);
    let mut next = [0.0; 3];
    for i in 0..3 {
        next[i] = state[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        if !next[i].is_finite() {
            return Err(PkpdError::NonFinite);
        }
    }
    Ok(next)
}

/// One RK4 step of dCe/dt = ke0·(Cp − Ce) with Cp held constant over dt.
pub fn effect_site_step(ce: f64, cp: f64, ke0: f64, dt: f64) -> f64 {
    debug_assert!(ke0 > 0.0 && dt > 0.0);
    let f = |c: f64| ke0 * (cp - c);
    let k1 = f(ce);
    let k2 = f(ce + 0.5 * dt * k1);
    let k3 = f(ce + 0.5 * dt * k2);
    let k4 = f(ce + dt * k3);
    ce + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Response surface: U = u_p + u_r + β·u_p·u_r with u = Ce/EC50, and
/// BIS = E0 − Emax·Uᵞ/(1 + Uᵞ).
pub fn bis_response(ce_ppf: f64, ce_rftn: f64, pd: &ResponseSurface) -> f64 {
    debug_assert!(ce_ppf >= 0.0 && ce_rftn >= 0.0);
    let u_p = ce_ppf / pd.ec50_ppf;
    let u_r = ce_rftn / pd.ec50_rftn;
    let u = u_p + u_r + pd.beta * u_p * u_r;
    let effect = if u == 0.0 {
        0.0
    } else {
        let ug = u.powf(pd.gamma);
        ug / (1.0 + ug)
    };
    pd.e0 - pd.emax * effect
}

/// Per-drug state trajectory on the dose grid: compartment amounts and
/// effect-site concentration after each dose step.
#[derive(Clone, Debug)]
pub struct DrugTrajectory {
    pub amounts: Vec<[f64; 3]>,
    pub effect_site: Vec<f64>,
}

/// Integrate one drug channel over the whole dose history.
///
/// Within each 10 s dose step the infusion is a constant rate dose/10.
/// Compartments advance first; the effect site then relaxes toward the
/// midpoint of the old and new plasma concentrations, which keeps the
/// split coupling second-order in dt.
pub fn integrate_drug(series: &[f64], drug: &DrugModel, inner_dt: f64) -> Result<DrugTrajectory> {
    let n_inner = inner_steps(inner_dt)?;
    let dt = DOSE_STEP_SECONDS / n_inner as f64;
    let mut state = [0.0; 3];
    let mut ce = 0.0;
    let mut amounts = Vec::with_capacity(series.len());
    let mut effect_site = Vec::with_capacity(series.len());
    for (step, dose) in series.iter().enumerate() {
        let rate = dose / DOSE_STEP_SECONDS;
        for _ in 0..n_inner {
            let cp_before = state[0] / drug.volume;
            state = pk_step(state, rate, drug, dt)
                .map_err(|_| PkpdError::NonFiniteAt { step })?;
            let cp_mid = 0.5 * (cp_before + state[0] / drug.volume);
            ce = effect_site_step(ce, cp_mid, drug.ke0, dt);
        }
        if !ce.is_finite() {
            return Err(PkpdError::NonFiniteAt { step });
        }
        amounts.push(state);
        effect_site.push(ce);
    }
    Ok(DrugTrajectory {
        amounts,
        effect_site,
    })
}

fn inner_steps(inner_dt: f64) -> Result<usize> {
    if !(inner_dt > 0.0 && inner_dt <= DOSE_STEP_SECONDS) {
        return Err(PkpdError::BadModel(format!(
            "inner dt must lie in (0, {DOSE_STEP_SECONDS}], got {inner_dt}"
        )));
    }
    let n = DOSE_STEP_SECONDS / inner_dt;
    if (n - n.round()).abs() > 1e-9 {
        return Err(PkpdError::BadModel(format!(
            "inner dt {inner_dt} must divide the {DOSE_STEP_SECONDS} s dose step"
        )));
    }
    Ok(n.round() as usize)
}

/// Simulate the BIS trajectory for a dose history at the default inner dt.
pub fn simulate_bis(doses: &DoseHistory, model: &PatientModel) -> Result<BisTrajectory> {
    simulate_bis_with_dt(doses, model, DEFAULT_INNER_DT)
}

/// Simulate with an explicit inner integration step.
pub fn simulate_bis_with_dt(
    doses: &DoseHistory,
    model: &PatientModel,
    inner_dt: f64,
) -> Result<BisTrajectory> {
    let ppf = integrate_drug(&doses.ppf, &model.ppf, inner_dt)?;
    let rftn = integrate_drug(&doses.rftn, &model.rftn, inner_dt)?;
    let bis = ppf
        .effect_site
        .iter()
        .zip(&rftn.effect_site)
        .map(|(&cp, &cr)| bis_response(cp, cr, &model.pd))
        .collect();
    Ok(BisTrajectory(bis))
}
