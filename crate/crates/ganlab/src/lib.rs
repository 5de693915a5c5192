//! Desk-scale laboratory for GAN variants on anesthetic dosage time series.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — dense f64 tensors with a reverse-mode differentiation tape
//!   and gradient-based optimizers; everything downstream builds on it.
//! - [`nets`] — MLP-backed generators, discriminators (plain and
//!   auxiliary-classifier), and VAE generators with three conditioning
//!   placements.
//! - [`losses`] — the loss zoo: vanilla (saturating and non-saturating),
//!   LSGAN, WGAN, VAEGAN, ACGAN, ACVAE, and the entropy class-loss variant.
//! - [`pkpd`] — three-compartment PK model with effect site and a
//!   response-surface PD stage mapping two-drug dose histories to BIS
//!   trajectories, plus the synthetic ground-truth dataset generator.
//! - [`harness`] — the adversarial training loop, pathology detectors,
//!   run artifacts, and checkpointing.
//! - [`metrics`] — augmentation quality statistics and run comparison.
//! - [`config`], [`report`], [`cli`] — file-driven experiment configuration,
//!   figure/report emission, and the command-line entry points.

pub mod cli;
pub mod config;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod pkpd;
pub mod report;
pub mod tensor;
