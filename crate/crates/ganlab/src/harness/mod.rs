//! The adversarial training loop for every variant, run artifacts, and the
//! pathology detectors.
//!
//! A run is strictly sequential and fully determined by (seed, config,
//! dataset hash). Three ChaCha streams keep resume exact: an init stream
//! for weight initialization, a probe stream for the fixed probe noise, and
//! a train stream (whose word position is checkpointed) for batch indices
//! and per-step noise draws.

pub mod checkpoint;
pub mod detect;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{self, LossError, Variant, VariantConfig};
use crate::metrics::{self, AugmentationScore, MetricsError, WindowConfig};
use crate::nets::{
    standard_normal, Conditioning, Discriminator, Generator, Judgment, NetsError, SourceMode,
    VaeGenerator,
};
use crate::pkpd::dataset::Dataset;
use crate::pkpd::{DoseHistory, PatientCovariates, PatientModel, PkpdError};
use crate::tensor::optim::{clip_weights, grad_norm, zero_grads, OptimizerState};
use crate::tensor::{Tape, Tensor, TensorError};
use detect::{collapse_sensitivity, detect_mode_collapse, detect_non_convergence, DetectorConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(
        "numerical halt at step {step}: d_loss={d_loss} g_loss={g_loss} max|grad|={max_abs_grad}"
    )]
    NumericalHalt {
        step: usize,
        d_loss: f64,
        g_loss: f64,
        max_abs_grad: f64,
    },
    #[error("dataset too small: {found} patients")]
    DatasetTooSmall { found: usize },
    #[error("variant {variant} needs class labels; dataset has {classes} class(es)")]
    NeedsClasses { variant: String, classes: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nets(#[from] NetsError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Pkpd(#[from] PkpdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    /// True for failures caused by non-finite numerics rather than bad
    /// configuration or I/O.
    pub fn is_numerical(&self) -> bool {
        match self {
            HarnessError::NumericalHalt { .. } => true,
            HarnessError::Tensor(TensorError::NonFinite { .. }) => true,
            HarnessError::Nets(NetsError::Layer { source, .. }) => {
                matches!(source, TensorError::NonFinite { .. })
            }
            HarnessError::Nets(NetsError::Tensor(TensorError::NonFinite { .. })) => true,
            HarnessError::Loss(LossError::Tensor(TensorError::NonFinite { .. })) => true,
            _ => false,
        }
    }
}

/// Training-loop hyperparameters; everything lands in the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch: usize,
    /// Probe-set evaluation cadence, in steps.
    pub probe_every: usize,
    pub checkpoint_every: usize,
    pub probe_size: usize,
    /// Fraction of patients held out as the probe set.
    pub probe_fraction: f64,
    pub noise_width: usize,
    pub latent_width: usize,
    pub hidden: Vec<usize>,
    pub g_learning_rate: f64,
    pub d_learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Plain-descent learning rate for the Wasserstein critic.
    pub wgan_critic_lr: f64,
    /// Class-condition placement for the ACVAE generator.
    pub acvae_placement: Conditioning,
    pub detectors: DetectorConfig,
}

impl Default for TrainSettings {
    fn default() -> TrainSettings {
        TrainSettings {
            steps: 3000,
            batch: 32,
            probe_every: 100,
            checkpoint_every: 1000,
            probe_size: 64,
            probe_fraction: 0.25,
            noise_width: 16,
            latent_width: 16,
            hidden: vec![128, 128],
            g_learning_rate: 2e-4,
            d_learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            wgan_critic_lr: 5e-5,
            acvae_placement: Conditioning::Both,
            detectors: DetectorConfig::default(),
        }
    }
}

/// Everything that identifies a run; serialized to manifest.json before the
/// first step and never mutated.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub variant: VariantConfig,
    pub train: TrainSettings,
    pub seed: u64,
    pub dataset_hash: String,
    pub horizon: usize,
    pub n_classes: usize,
    pub patient_model: PatientModel,
    pub window: WindowConfig,
}

pub const MANIFEST_FORMAT: &str = "ganlab-run v1";

/// One training step's log record.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub d_grad_norm: f64,
    pub g_grad_norm: f64,
    /// Accuracy on the training batch.
    pub d_accuracy_train: f64,
    /// Accuracy on the fixed held-out probe set.
    pub d_accuracy_probe: f64,
    pub wgan_distance: Option<f64>,
    pub rec_loss: Option<f64>,
    pub kld_loss: Option<f64>,
}

fn opt_field(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "-".to_string(),
    }
}

fn parse_opt_field(s: &str) -> std::result::Result<Option<f64>, std::num::ParseFloatError> {
    if s == "-" {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

impl StepRecord {
    /// Space-delimited line; `-` marks fields the variant does not produce.
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {} {} {} {} {} {}",
            self.step,
            self.d_loss,
            self.g_loss,
            self.d_grad_norm,
            self.g_grad_norm,
            self.d_accuracy_train,
            self.d_accuracy_probe,
            opt_field(self.wgan_distance),
            opt_field(self.rec_loss),
            opt_field(self.kld_loss),
        )
    }

    pub fn parse(line: &str) -> Result<StepRecord> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 10 {
            return Err(HarnessError::Checkpoint(format!(
                "step record needs 10 fields, got {}",
                fields.len()
            )));
        }
        let bad = |e: &dyn std::fmt::Display| HarnessError::Checkpoint(format!("step record: {e}"));
        Ok(StepRecord {
            step: fields[0].parse().map_err(|e| bad(&e))?,
            d_loss: fields[1].parse().map_err(|e| bad(&e))?,
            g_loss: fields[2].parse().map_err(|e| bad(&e))?,
            d_grad_norm: fields[3].parse().map_err(|e| bad(&e))?,
            g_grad_norm: fields[4].parse().map_err(|e| bad(&e))?,
            d_accuracy_train: fields[5].parse().map_err(|e| bad(&e))?,
            d_accuracy_probe: fields[6].parse().map_err(|e| bad(&e))?,
            wgan_distance: parse_opt_field(fields[7]).map_err(|e| bad(&e))?,
            rec_loss: parse_opt_field(fields[8]).map_err(|e| bad(&e))?,
            kld_loss: parse_opt_field(fields[9]).map_err(|e| bad(&e))?,
        })
    }
}

/// The per-variant model pair.
pub enum ModelSet {
    Gan {
        g: Generator,
        d: Discriminator,
    },
    Vae {
        v: VaeGenerator,
        d: Discriminator,
    },
}

impl ModelSet {
    pub fn generator_params(&self) -> Vec<(String, Tensor)> {
        match self {
            ModelSet::Gan { g, .. } => g.named_params(),
            ModelSet::Vae { v, .. } => v.named_params(),
        }
    }

    pub fn discriminator_params(&self) -> Vec<(String, Tensor)> {
        match self {
            ModelSet::Gan { d, .. } | ModelSet::Vae { d, .. } => d.named_params(),
        }
    }

    fn discriminator(&self) -> &Discriminator {
        match self {
            ModelSet::Gan { d, .. } | ModelSet::Vae { d, .. } => d,
        }
    }
}

/// FNV-1a over the exact parameter bits; used to check the alternation
/// contract (D untouched during G's update and vice versa).
pub fn params_fingerprint(params: &[(String, Tensor)]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for (name, tensor) in params {
        for b in name.as_bytes() {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        tensor.with_data(|d| {
            for v in d {
                hash ^= v.to_bits();
                hash = hash.wrapping_mul(0x100000001b3);
            }
        });
    }
    hash
}

struct Batch {
    x: Tensor,
    cov: Tensor,
    onehot: Option<Tensor>,
}

/// Fixed probe data, derived once per run from the probe stream.
struct ProbeSet {
    x: Tensor,
    cov: Tensor,
    onehot: Option<Tensor>,
    covariates: Vec<PatientCovariates>,
    real_flat: Vec<Vec<f64>>,
    /// Noise for GAN generators (probe_size × noise_width) or latent draws
    /// for VAE decoders (probe_size × latent_width).
    z: Tensor,
}

const PROBE_SALT: u64 = 0x70726f6265; // "probe"
const TRAIN_SALT: u64 = 0x747261696e; // "train"

/// A live training run: models, optimizers, RNG streams, and logs.
pub struct TrainRun {
    pub manifest: RunManifest,
    pub models: ModelSet,
    opt_g: OptimizerState,
    opt_d: OptimizerState,
    train_rng: ChaCha8Rng,
    pub step: usize,
    pub records: Vec<StepRecord>,
    train_indices: Vec<usize>,
    probe: ProbeSet,
    class_width: usize,
}

fn one_hot_tensor(classes: &[usize], width: usize) -> Tensor {
    let mut data = vec![0.0; classes.len() * width];
    for (i, &c) in classes.iter().enumerate() {
        data[i * width + c % width] = 1.0;
    }
    Tensor::new(&[classes.len(), width], data).expect("one-hot data is finite")
}

fn accuracy_threshold(cfg: &VariantConfig) -> f64 {
    match cfg.variant {
        Variant::Wgan => 0.0,
        Variant::Lsgan => 0.5 * (cfg.lsgan_fake_label + cfg.lsgan_real_label),
        _ => 0.5,
    }
}

fn classification_accuracy(real: &Tensor, fake: &Tensor, threshold: f64) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    real.with_data(|d| {
        for v in d {
            if *v > threshold {
                correct += 1;
            }
            total += 1;
        }
    });
    fake.with_data(|d| {
        for v in d {
            if *v < threshold {
                correct += 1;
            }
            total += 1;
        }
    });
    correct as f64 / total as f64
}

impl TrainRun {
    /// Build the models and fixed probe set; deterministic in the seed.
    pub fn initialize(
        dataset: &Dataset,
        dataset_hash: &str,
        cfg: &VariantConfig,
        settings: &TrainSettings,
        seed: u64,
    ) -> Result<TrainRun> {
        cfg.validate()?;
        if dataset.is_empty() && settings.steps > 0 {
            return Err(HarnessError::DatasetTooSmall { found: 0 });
        }
        let labeled = matches!(cfg.variant, Variant::Acgan | Variant::Acvae);
        if labeled && dataset.n_classes < 2 {
            return Err(HarnessError::NeedsClasses {
                variant: cfg.variant.name().to_string(),
                classes: dataset.n_classes,
            });
        }

        let horizon = dataset.horizon;
        let class_width = if cfg.variant.uses_class_head() {
            dataset.n_classes.max(2)
        } else {
            0
        };

        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let d_mode = if cfg.variant.linear_score() {
            SourceMode::Critic
        } else {
            SourceMode::Probabilistic
        };
        let models = if cfg.variant.uses_vae() {
            let vae_class = if cfg.variant == Variant::Acvae {
                class_width
            } else {
                0
            };
            let v = VaeGenerator::new(
                &mut init_rng,
                horizon,
                settings.latent_width,
                vae_class,
                settings.acvae_placement,
                &settings.hidden,
            );
            let d = Discriminator::new(
                &mut init_rng,
                2 * horizon,
                4,
                class_width,
                d_mode,
                &settings.hidden,
            );
            ModelSet::Vae { v, d }
        } else {
            let g_class = if cfg.variant.class_conditioned_generator() {
                class_width
            } else {
                0
            };
            let g = Generator::new(
                &mut init_rng,
                4,
                settings.noise_width,
                g_class,
                horizon,
                &settings.hidden,
            );
            let d = Discriminator::new(
                &mut init_rng,
                2 * horizon,
                4,
                class_width,
                d_mode,
                &settings.hidden,
            );
            ModelSet::Gan { g, d }
        };

        let (opt_g, opt_d) = match cfg.variant {
            Variant::Wgan => (
                OptimizerState::adaptive_moment(
                    settings.g_learning_rate,
                    settings.adam_beta1,
                    settings.adam_beta2,
                ),
                OptimizerState::descent(settings.wgan_critic_lr),
            ),
            _ => (
                OptimizerState::adaptive_moment(
                    settings.g_learning_rate,
                    settings.adam_beta1,
                    settings.adam_beta2,
                ),
                OptimizerState::adaptive_moment(
                    settings.d_learning_rate,
                    settings.adam_beta1,
                    settings.adam_beta2,
                ),
            ),
        };

        // Hold out the trailing fraction as the probe set; a one-record
        // dataset serves as both (the degenerate matchable case).
        let n = dataset.len();
        let (train_indices, probe_indices): (Vec<usize>, Vec<usize>) = if n == 1 {
            (vec![0], vec![0])
        } else {
            let probe_count = ((n as f64 * settings.probe_fraction).round() as usize)
                .clamp(1, n - 1);
            let split = n - probe_count;
            ((0..split).collect(), (split..n).collect())
        };

        let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ PROBE_SALT);
        let probe = build_probe_set(
            dataset,
            &probe_indices,
            settings,
            cfg,
            class_width,
            &mut probe_rng,
        );

        let manifest = RunManifest {
            format: MANIFEST_FORMAT.to_string(),
            variant: cfg.clone(),
            train: settings.clone(),
            seed,
            dataset_hash: dataset_hash.to_string(),
            horizon,
            n_classes: dataset.n_classes,
            patient_model: dataset.model,
            window: WindowConfig::default_for(horizon),
        };

        Ok(TrainRun {
            manifest,
            models,
            opt_g,
            opt_d,
            train_rng: ChaCha8Rng::seed_from_u64(seed ^ TRAIN_SALT),
            step: 0,
            records: Vec::new(),
            train_indices,
            probe,
            class_width,
        })
    }

    fn cfg(&self) -> VariantConfig {
        self.manifest.variant.clone()
    }

    fn fresh_noise(&mut self, rows: usize, width: usize) -> Tensor {
        let data: Vec<f64> = (0..rows * width)
            .map(|_| standard_normal(&mut self.train_rng))
            .collect();
        Tensor::new(&[rows, width], data).expect("normal draws are finite")
    }

    fn sample_batch(&mut self, dataset: &Dataset) -> Batch {
        let batch = self.manifest.train.batch;
        let indices: Vec<usize> = (0..batch)
            .map(|_| self.train_indices[self.train_rng.gen_range(0..self.train_indices.len())])
            .collect();
        let records: Vec<_> = indices.iter().map(|&i| &dataset.records[i]).collect();
        let horizon = dataset.horizon;
        let mut x_data = Vec::with_capacity(batch * 2 * horizon);
        let mut cov_data = Vec::with_capacity(batch * 4);
        let mut classes = Vec::with_capacity(batch);
        for r in &records {
            x_data.extend(r.doses.flat());
            cov_data.extend(r.covariates.normalized());
            classes.push(r.class_label);
        }
        let x = Tensor::new(&[batch, 2, horizon], x_data).expect("dataset values are finite");
        let cov = Tensor::new(&[batch, 4], cov_data).expect("covariates are finite");
        let onehot = (self.class_width > 0).then(|| {
            if self.manifest.variant.variant == Variant::AcganEntropy {
                // Unlabeled setting: condition fakes on freshly drawn classes.
                let drawn: Vec<usize> = (0..batch)
                    .map(|_| self.train_rng.gen_range(0..self.class_width))
                    .collect();
                one_hot_tensor(&drawn, self.class_width)
            } else {
                one_hot_tensor(&classes, self.class_width)
            }
        });
        Batch { x, cov, onehot }
    }

    /// Fresh fakes detached from their construction tape; gradients stop at
    /// the values, so the discriminator phase cannot touch generator
    /// parameters.
    fn make_detached_fakes(&mut self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let rows = batch.x.shape()[0];
        let fakes = if self.is_vae() {
            let eps: Vec<f64> = (0..rows * self.vae_latent())
                .map(|_| standard_normal(&mut self.train_rng))
                .collect();
            let ModelSet::Vae { v, .. } = &self.models else {
                unreachable!()
            };
            let class = self.vae_class_arg(batch);
            let sample = v.encode_with_eps(&mut tape, &batch.x, class, &eps)?;
            v.decode(&mut tape, &sample.z, class)?
        } else {
            let z = self.fresh_noise(rows, self.generator_noise_width());
            let ModelSet::Gan { g, .. } = &self.models else {
                unreachable!()
            };
            g.generate(&mut tape, &batch.cov, &z, batch.onehot.as_ref())?
        };
        Ok(fakes.detach())
    }

    fn is_vae(&self) -> bool {
        matches!(self.models, ModelSet::Vae { .. })
    }

    fn vae_latent(&self) -> usize {
        match &self.models {
            ModelSet::Vae { v, .. } => v.latent_width(),
            ModelSet::Gan { .. } => 0,
        }
    }

    fn generator_noise_width(&self) -> usize {
        match &self.models {
            ModelSet::Gan { g, .. } => g.noise_width(),
            ModelSet::Vae { .. } => 0,
        }
    }

    fn vae_class_arg<'a>(&self, batch: &'a Batch) -> Option<&'a Tensor> {
        if self.manifest.variant.variant == Variant::Acvae {
            batch.onehot.as_ref()
        } else {
            None
        }
    }

    /// One discriminator (or critic) update on (real, fresh fakes).
    fn discriminator_update(&mut self, dataset: &Dataset) -> Result<(f64, f64, f64, Option<f64>)> {
        let cfg = self.cfg();
        let batch = self.sample_batch(dataset);
        let fakes = self.make_detached_fakes(&batch)?;
        let mut tape = Tape::new();
        let d = self.models.discriminator();
        let jr = d.discriminate(&mut tape, &batch.x, &batch.cov)?;
        let jf = d.discriminate(&mut tape, &fakes, &batch.cov)?;
        let loss = match cfg.variant {
            Variant::VanillaSaturating | Variant::VanillaNonSaturating | Variant::Vaegan => {
                losses::d_loss_vanilla_logits(&mut tape, &jr.source_logit, &jf.source_logit)?
            }
            Variant::Lsgan => losses::lsgan_d_loss(&mut tape, &jr.score, &jf.score, &cfg)?,
            Variant::Wgan => losses::wgan_critic_loss(&mut tape, &jr.score, &jf.score)?,
            Variant::Acgan | Variant::Acvae => losses::acgan_d_loss_logits(
                &mut tape,
                &jr.source_logit,
                &jf.source_logit,
                jr.class_log_probs()?,
                jf.class_log_probs()?,
                batch.onehot.as_ref().expect("class variants carry one-hots"),
                &cfg,
            )?,
            Variant::AcganEntropy => {
                let source =
                    losses::d_loss_vanilla_logits(&mut tape, &jr.source_logit, &jf.source_logit)?;
                let h_real = losses::entropy_class_loss(
                    &mut tape,
                    jr.class_probs()?,
                    losses::EntropyDirection::Minimize,
                )?;
                let h_fake = losses::entropy_class_loss(
                    &mut tape,
                    jf.class_probs()?,
                    losses::EntropyDirection::Minimize,
                )?;
                let h = tape.add(&h_real, &h_fake)?;
                let scaled = tape.mul_scalar(&h, cfg.lambda_dc)?;
                tape.add(&source, &scaled)?
            }
        };
        let d_params = self.models.discriminator_params();
        let g_params = self.models.generator_params();
        zero_grads(&d_params);
        zero_grads(&g_params);
        tape.backward(&loss)?;
        let norm = grad_norm(&d_params);
        self.opt_d.step(&d_params)?;
        if cfg.variant == Variant::Wgan {
            clip_weights(&d_params, cfg.wgan_clip);
        }
        let acc = classification_accuracy(&jr.score, &jf.score, accuracy_threshold(&cfg));
        let wdist = (cfg.variant == Variant::Wgan)
            .then(|| losses::wgan_distance(&jr.score, &jf.score));
        Ok((loss.item(), norm, acc, wdist))
    }

    /// One generator (or VAE) update against the frozen discriminator.
    fn generator_update(
        &mut self,
        dataset: &Dataset,
    ) -> Result<(f64, f64, Option<f64>, Option<f64>)> {
        let cfg = self.cfg();
        let batch = self.sample_batch(dataset);
        let mut tape = Tape::new();
        let mut rec_item = None;
        let mut kld_item = None;
        let loss = if !self.is_vae() {
            {
                let rows = batch.x.shape()[0];
                let z = self.fresh_noise(rows, self.generator_noise_width());
                let ModelSet::Gan { g, d } = &self.models else {
                    unreachable!()
                };
                let fakes = g.generate(&mut tape, &batch.cov, &z, batch.onehot.as_ref())?;
                let jf = d.discriminate(&mut tape, &fakes, &batch.cov)?;
                match cfg.variant {
                    Variant::VanillaSaturating => {
                        losses::g_loss_saturating_logits(&mut tape, &jf.source_logit)?
                    }
                    Variant::VanillaNonSaturating => {
                        losses::g_loss_nonsaturating_logits(&mut tape, &jf.source_logit)?
                    }
                    Variant::Lsgan => losses::lsgan_g_loss(&mut tape, &jf.score, &cfg)?,
                    Variant::Wgan => losses::wgan_g_loss(&mut tape, &jf.score)?,
                    Variant::Acgan => losses::acgan_g_loss_logits(
                        &mut tape,
                        &jf.source_logit,
                        jf.class_log_probs()?,
                        batch.onehot.as_ref().expect("acgan carries one-hots"),
                        &cfg,
                    )?,
                    Variant::AcganEntropy => {
                        let source =
                            losses::g_loss_nonsaturating_logits(&mut tape, &jf.source_logit)?;
                        let h = losses::entropy_class_loss(
                            &mut tape,
                            jf.class_probs()?,
                            cfg.entropy_direction,
                        )?;
                        let scaled = tape.mul_scalar(&h, cfg.lambda_gc)?;
                        tape.add(&source, &scaled)?
                    }
                    Variant::Vaegan | Variant::Acvae => unreachable!("VAE variants use Vae models"),
                }
            }
        } else {
            let rows = batch.x.shape()[0];
            let eps: Vec<f64> = (0..rows * self.vae_latent())
                .map(|_| standard_normal(&mut self.train_rng))
                .collect();
            let ModelSet::Vae { v, d } = &self.models else {
                unreachable!()
            };
            let class = self.vae_class_arg(&batch);
            let sample = v.encode_with_eps(&mut tape, &batch.x, class, &eps)?;
            let x_hat = v.decode(&mut tape, &sample.z, class)?;
            let jf = d.discriminate(&mut tape, &x_hat, &batch.cov)?;
            let adv = losses::g_loss_nonsaturating_logits(&mut tape, &jf.source_logit)?;
            let rec = losses::reconstruction_loss(&mut tape, &batch.x, &x_hat)?;
            let kld = losses::kl_gaussian(
                &mut tape,
                &sample.mu,
                &sample.sigma,
                &losses::LatentPrior,
            )?;
            rec_item = Some(rec.item());
            kld_item = Some(kld.item());
            match cfg.variant {
                Variant::Vaegan => losses::vaegan_vae_loss(&mut tape, &adv, &rec, &kld, &cfg)?,
                Variant::Acvae => {
                    let g_class = losses::class_nll(
                        &mut tape,
                        jf.class_log_probs()?,
                        batch.onehot.as_ref().expect("acvae carries one-hots"),
                    )?;
                    losses::acvae_vae_loss(&mut tape, &adv, &g_class, &rec, &kld, &cfg)?
                }
                _ => unreachable!("GAN variants use Gan models"),
            }
        };
        let d_params = self.models.discriminator_params();
        let g_params = self.models.generator_params();
        zero_grads(&d_params);
        zero_grads(&g_params);
        tape.backward(&loss)?;
        let norm = grad_norm(&g_params);
        self.opt_g.step(&g_params)?;
        // Backward also deposited gradients on D; clear them so the next
        // discriminator phase starts clean.
        zero_grads(&d_params);
        Ok((loss.item(), norm, rec_item, kld_item))
    }

    /// Generate the fixed probe batch with the current generator.
    fn generate_probe(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fakes = match &self.models {
            ModelSet::Gan { g, .. } => g.generate(
                &mut tape,
                &self.probe.cov,
                &self.probe.z,
                self.probe.onehot.as_ref(),
            )?,
            ModelSet::Vae { v, .. } => {
                let class = if self.manifest.variant.variant == Variant::Acvae {
                    self.probe.onehot.as_ref()
                } else {
                    None
                };
                v.decode(&mut tape, &self.probe.z, class)?
            }
        };
        Ok(fakes.detach())
    }

    /// Held-out discriminator accuracy on (probe reals, current fakes).
    fn probe_accuracy(&self, probe_fakes: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let d = self.models.discriminator();
        let jr: Judgment = d.discriminate(&mut tape, &self.probe.x, &self.probe.cov)?;
        let jf: Judgment = d.discriminate(&mut tape, probe_fakes, &self.probe.cov)?;
        Ok(classification_accuracy(
            &jr.score,
            &jf.score,
            accuracy_threshold(&self.cfg()),
        ))
    }

    /// One full training step: discriminator update(s) then one generator
    /// update, with the WGAN critic looping n_critic times.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<StepRecord> {
        let cfg = self.cfg();
        let critic_iters = if cfg.variant == Variant::Wgan {
            cfg.wgan_n_critic
        } else {
            1
        };
        let mut d_loss = 0.0;
        let mut d_norm = 0.0;
        let mut d_acc = 0.0;
        let mut wdist = None;
        for _ in 0..critic_iters {
            let (loss, norm, acc, dist) = self.discriminator_update(dataset)?;
            d_loss = loss;
            d_norm = norm;
            d_acc = acc;
            wdist = dist;
        }
        let (g_loss, g_norm, rec, kld) = self.generator_update(dataset)?;
        let probe_fakes = self.generate_probe()?;
        let probe_acc = self.probe_accuracy(&probe_fakes)?;
        self.step += 1;
        let record = StepRecord {
            step: self.step,
            d_loss,
            g_loss,
            d_grad_norm: d_norm,
            g_grad_norm: g_norm,
            d_accuracy_train: d_acc,
            d_accuracy_probe: probe_acc,
            wgan_distance: wdist,
            rec_loss: rec,
            kld_loss: kld,
        };
        self.records.push(record.clone());
        Ok(record)
    }

    /// Score the current generator on the probe set.
    pub fn probe_score(&self) -> Result<AugmentationScore> {
        let fakes = self.generate_probe()?;
        let acc = self.probe_accuracy(&fakes)?;
        let doses = tensor_to_histories(&fakes)?;
        Ok(metrics::score_batch(
            &doses,
            &self.probe.covariates,
            &self.manifest.patient_model,
            &self.manifest.window,
            acc,
        )?)
    }

    fn rng_word_pos(&self) -> u128 {
        self.train_rng.get_word_pos()
    }

    fn set_rng_word_pos(&mut self, pos: u128) {
        self.train_rng.set_word_pos(pos);
    }
}

/// Split a (batch, 2, T) dose tensor into per-sample histories.
pub fn tensor_to_histories(t: &Tensor) -> Result<Vec<DoseHistory>> {
    let shape = t.shape();
    let (batch, width) = (shape[0], shape[1..].iter().product::<usize>());
    let data = t.data();
    let mut out = Vec::with_capacity(batch);
    for row in data.chunks(width) {
        out.push(DoseHistory::from_flat(row)?);
    }
    Ok(out)
}

fn build_probe_set(
    dataset: &Dataset,
    probe_indices: &[usize],
    settings: &TrainSettings,
    cfg: &VariantConfig,
    class_width: usize,
    probe_rng: &mut ChaCha8Rng,
) -> ProbeSet {
    let size = settings.probe_size.max(1);
    let horizon = dataset.horizon;
    let mut x_data = Vec::with_capacity(size * 2 * horizon);
    let mut cov_data = Vec::with_capacity(size * 4);
    let mut classes = Vec::with_capacity(size);
    let mut covariates = Vec::with_capacity(size);
    let mut real_flat = Vec::with_capacity(size);
    for i in 0..size {
        let record = &dataset.records[probe_indices[i % probe_indices.len()]];
        let flat = record.doses.flat();
        x_data.extend(&flat);
        real_flat.push(flat);
        cov_data.extend(record.covariates.normalized());
        classes.push(record.class_label);
        covariates.push(record.covariates);
    }
    let z_width = if cfg.variant.uses_vae() {
        settings.latent_width
    } else {
        settings.noise_width
    };
    let z_data: Vec<f64> = (0..size * z_width)
        .map(|_| standard_normal(probe_rng))
        .collect();
    ProbeSet {
        x: Tensor::new(&[size, 2, horizon], x_data).expect("dataset values are finite"),
        cov: Tensor::new(&[size, 4], cov_data).expect("covariates are finite"),
        onehot: (class_width > 0).then(|| one_hot_tensor(&classes, class_width)),
        covariates,
        real_flat,
        z: Tensor::new(&[size, z_width], z_data).expect("normal draws are finite"),
    }
}

/// Completed-run summary handed back to callers.
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub records: Vec<StepRecord>,
    pub final_score: AugmentationScore,
    pub dataset_hash: String,
    pub diagnostics: Vec<String>,
}

fn probe_dump_text(
    step: usize,
    doses: &[DoseHistory],
    covariates: &[PatientCovariates],
    classes: Option<&Tensor>,
) -> String {
    let mut out = String::from("ganlab-probe v1\n");
    let horizon = doses.first().map_or(0, |d| d.len());
    let _ = writeln!(
        out,
        "step={step} samples={} horizon={horizon}",
        doses.len()
    );
    let class_of = |i: usize| -> usize {
        classes.map_or(0, |t| {
            let width = *t.shape().last().unwrap();
            t.with_data(|d| {
                d[i * width..(i + 1) * width]
                    .iter()
                    .position(|v| *v == 1.0)
                    .unwrap_or(0)
            })
        })
    };
    for (i, (d, c)) in doses.iter().zip(covariates).enumerate() {
        let _ = writeln!(
            out,
            "sample {} {} {} {} {}",
            class_of(i),
            c.age,
            c.weight,
            c.height,
            c.sex
        );
        let fmt = |series: &[f64]| {
            series
                .iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(out, "ppf {}", fmt(&d.ppf));
        let _ = writeln!(out, "rftn {}", fmt(&d.rftn));
    }
    out
}

fn write_probe_dump(
    dir: &Path,
    step: usize,
    doses: &[DoseHistory],
    covariates: &[PatientCovariates],
    classes: Option<&Tensor>,
) -> std::io::Result<()> {
    let text = probe_dump_text(step, doses, covariates, classes);
    std::fs::write(dir.join(format!("probe_{step:06}.txt")), text)
}

/// Parse a probe dump back into scoring inputs.
pub fn read_probe_dump(
    path: &Path,
) -> Result<(usize, Vec<DoseHistory>, Vec<PatientCovariates>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let bad = |msg: &str| HarnessError::Checkpoint(format!("probe dump: {msg}"));
    if lines.next() != Some("ganlab-probe v1") {
        return Err(bad("missing header"));
    }
    let counts = lines.next().ok_or_else(|| bad("missing counts"))?;
    let mut step = 0usize;
    for field in counts.split_whitespace() {
        if let Some(v) = field.strip_prefix("step=") {
            step = v.parse().map_err(|_| bad("bad step"))?;
        }
    }
    let mut doses = Vec::new();
    let mut covs = Vec::new();
    while let Some(line) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let rest = line
            .strip_prefix("sample ")
            .ok_or_else(|| bad("expected sample line"))?;
        let parts: Vec<f64> = rest
            .split_whitespace()
            .skip(1) // class label
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad covariates"))?;
        covs.push(
            PatientCovariates::new(parts[0], parts[1], parts[2], parts[3])
                .map_err(HarnessError::Pkpd)?,
        );
        let ppf_line = lines.next().ok_or_else(|| bad("missing ppf"))?;
        let rftn_line = lines.next().ok_or_else(|| bad("missing rftn"))?;
        let series = |l: &str, tag: &str| -> Result<Vec<f64>> {
            l.strip_prefix(tag)
                .ok_or_else(|| bad(&format!("expected {tag}")))?
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|_| bad("bad float")))
                .collect()
        };
        doses.push(
            DoseHistory::new(series(ppf_line, "ppf ")?, series(rftn_line, "rftn ")?)
                .map_err(HarnessError::Pkpd)?,
        );
    }
    Ok((step, doses, covs))
}

fn append_registry(out_root: &Path, line: &str) -> std::io::Result<()> {
    use std::os::unix::io::AsRawFd;
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_root.join("registry.tsv"))?;
    // Exclusive advisory lock: parallel runs append atomically.
    let fd = file.as_raw_fd();
    unsafe {
        libc::flock(fd, libc::LOCK_EX);
    }
    let mut file = file;
    let result = writeln!(file, "{line}");
    unsafe {
        libc::flock(fd, libc::LOCK_UN);
    }
    result
}

/// Execute a full experiment: train, probe, checkpoint, and persist every
/// artifact under `run_dir`. Partial artifacts are flushed before a halt
/// error propagates.
pub fn run_experiment(
    dataset: &Dataset,
    dataset_hash: &str,
    cfg: &VariantConfig,
    settings: &TrainSettings,
    seed: u64,
    run_dir: &Path,
) -> Result<RunOutcome> {
    let mut run = TrainRun::initialize(dataset, dataset_hash, cfg, settings, seed)?;
    run_to_completion(&mut run, dataset, run_dir)
}

/// Drive an initialized (or checkpoint-restored) run to `settings.steps`.
pub fn run_to_completion(
    run: &mut TrainRun,
    dataset: &Dataset,
    run_dir: &Path,
) -> Result<RunOutcome> {
    std::fs::create_dir_all(run_dir)?;
    let dumps_dir = run_dir.join("dumps");
    let ckpt_dir = run_dir.join("checkpoints");
    std::fs::create_dir_all(&dumps_dir)?;
    std::fs::create_dir_all(&ckpt_dir)?;

    // Manifest goes down before step 1 and is never touched again.
    let manifest_json =
        serde_json::to_string_pretty(&run.manifest).expect("manifest serializes");
    std::fs::write(run_dir.join("manifest.json"), &manifest_json)?;

    // Probe reals, dumped once so reports can draw the ground-truth panel
    // from run artifacts alone.
    let real_doses: Vec<DoseHistory> = run
        .probe
        .real_flat
        .iter()
        .map(|flat| DoseHistory::from_flat(flat))
        .collect::<std::result::Result<_, _>>()?;
    std::fs::write(
        dumps_dir.join("real.txt"),
        probe_dump_text(0, &real_doses, &run.probe.covariates, run.probe.onehot.as_ref()),
    )?;

    let settings = run.manifest.train.clone();
    let mut metrics_rows = String::from(
        "step,bis_stability,bis_drift,peak_score,dose_dispersion,d_accuracy\n",
    );

    let probe_eval = |run: &TrainRun, rows: &mut String| -> Result<AugmentationScore> {
        let score = run.probe_score()?;
        let _ = writeln!(
            rows,
            "{},{},{},{},{},{}",
            run.step,
            score.bis_stability,
            score.bis_drift,
            score.peak_score,
            score.dose_dispersion,
            score.d_accuracy
        );
        let fakes = run.generate_probe()?;
        let doses = tensor_to_histories(&fakes)?;
        write_probe_dump(
            &dumps_dir,
            run.step,
            &doses,
            &run.probe.covariates,
            run.probe.onehot.as_ref(),
        )?;
        Ok(score)
    };

    // Baseline metrics before any update.
    let mut final_score = probe_eval(run, &mut metrics_rows)?;

    let flush =
        |run: &TrainRun, metrics_rows: &str, run_dir: &Path| -> std::io::Result<()> {
            let mut log = String::new();
            for r in &run.records {
                let _ = writeln!(log, "{}", r.to_line());
            }
            std::fs::write(run_dir.join("steps.log"), log)?;
            std::fs::write(run_dir.join("metrics.csv"), metrics_rows)?;
            Ok(())
        };

    let start = run.step;
    for _ in start..settings.steps {
        let record = match run.train_step(dataset) {
            Ok(r) => r,
            Err(e) => {
                flush(run, &metrics_rows, run_dir)?;
                if e.is_numerical() {
                    let last = run.records.last();
                    let max_abs_grad = run
                        .models
                        .generator_params()
                        .iter()
                        .chain(run.models.discriminator_params().iter())
                        .filter_map(|(_, t)| {
                            t.grad()
                                .map(|g| g.iter().fold(0.0f64, |m, v| m.max(v.abs())))
                        })
                        .fold(0.0f64, f64::max);
                    return Err(HarnessError::NumericalHalt {
                        step: run.step + 1,
                        d_loss: last.map_or(f64::NAN, |r| r.d_loss),
                        g_loss: last.map_or(f64::NAN, |r| r.g_loss),
                        max_abs_grad,
                    });
                }
                return Err(e);
            }
        };
        if !record.d_loss.is_finite() || !record.g_loss.is_finite() {
            flush(run, &metrics_rows, run_dir)?;
            return Err(HarnessError::NumericalHalt {
                step: record.step,
                d_loss: record.d_loss,
                g_loss: record.g_loss,
                max_abs_grad: 0.0,
            });
        }
        if settings.probe_every > 0 && record.step % settings.probe_every == 0 {
            final_score = probe_eval(run, &mut metrics_rows)?;
        }
        if settings.checkpoint_every > 0 && record.step % settings.checkpoint_every == 0 {
            checkpoint::save(&ckpt_dir.join(format!("step_{:06}.ckpt", record.step)), run)?;
        }
    }
    let already_evaluated = run.step == start
        || (settings.probe_every > 0 && run.step % settings.probe_every == 0);
    if !already_evaluated {
        final_score = probe_eval(run, &mut metrics_rows)?;
    }
    checkpoint::save(&ckpt_dir.join("final.ckpt"), run)?;
    flush(run, &metrics_rows, run_dir)?;

    // Diagnostics are recomputable from the persisted logs and dumps alone.
    let mut diagnostics = Vec::new();
    let det = &settings.detectors;
    if let Some(step) = detect::first_vanishing_step(&run.records, det) {
        diagnostics.push(format!("vanishing-gradient step={step}"));
    }
    let probe_fakes = run.generate_probe()?;
    let fake_flat: Vec<Vec<f64>> = tensor_to_histories(&probe_fakes)?
        .iter()
        .map(|d| d.flat())
        .collect();
    if let Some(d) = detect_mode_collapse(&fake_flat, &run.probe.real_flat, run.step, det) {
        diagnostics.push(format!(
            "mode-collapse step={} ratio={} threshold={}",
            d.step, d.statistic, d.threshold
        ));
    }
    for (ratio, fired) in
        collapse_sensitivity(&fake_flat, &run.probe.real_flat, run.step, det, &[0.01, 0.05, 0.10])
    {
        diagnostics.push(format!("mode-collapse-sensitivity threshold={ratio} fired={fired}"));
    }
    let g_series: Vec<f64> = run.records.iter().map(|r| r.g_loss).collect();
    if let Some(d) = detect_non_convergence(&g_series, det) {
        diagnostics.push(format!(
            "non-convergence autocorr={} threshold={}",
            d.statistic, d.threshold
        ));
    }
    std::fs::write(run_dir.join("diagnostics.txt"), diagnostics.join("\n") + "\n")?;

    if let Some(root) = run_dir.parent() {
        let line = format!(
            "{}\t{}\t{}\t{}",
            run.manifest.variant.variant.name(),
            run.manifest.seed,
            run_dir.display(),
            run.manifest.dataset_hash
        );
        append_registry(root, &line)?;
    }

    Ok(RunOutcome {
        run_dir: run_dir.to_path_buf(),
        records: run.records.clone(),
        final_score,
        dataset_hash: run.manifest.dataset_hash.clone(),
        diagnostics,
    })
}

/// Restore a run from a checkpoint and drive it to completion in
/// `out_dir`. The remaining step records must match a never-interrupted
/// run's records exactly.
pub fn resume_experiment(
    dataset: &Dataset,
    manifest: &RunManifest,
    checkpoint_path: &Path,
    out_dir: &Path,
) -> Result<RunOutcome> {
    let data = checkpoint::load(checkpoint_path)?;
    let mut run = TrainRun::initialize(
        dataset,
        &manifest.dataset_hash,
        &manifest.variant,
        &manifest.train,
        manifest.seed,
    )?;
    checkpoint::restore_into(&mut run, &data)?;
    run_to_completion(&mut run, dataset, out_dir)
}
