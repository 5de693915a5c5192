//! The loss zoo: vanilla GAN (saturating and non-saturating generator),
//! LSGAN, WGAN, VAEGAN, ACGAN, ACVAE, and the entropy class-loss variant.
//!
//! Every loss is a pure, differentiable scalar over tape tensors.
//! Expectations are realized as arithmetic batch means. Losses over
//! probabilistic discriminator outputs come in two equivalent forms: a
//! score form taking probabilities in (0,1), matching the textbook
//! expressions, and a logits form that fuses log∘σ through the stable
//! log-sigmoid primitive — the form the training loop uses, since scores
//! saturate long before logits do.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{what}: score {value} outside the open interval (0,1)")]
    ScoreRange { what: &'static str, value: f64 },
    #[error("negative probability {value}")]
    NegativeProbability { value: f64 },
    #[error("invalid variant config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// The eight trainable variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "vanilla-saturating")]
    VanillaSaturating,
    #[serde(rename = "vanilla-nonsaturating")]
    VanillaNonSaturating,
    #[serde(rename = "lsgan")]
    Lsgan,
    #[serde(rename = "wgan")]
    Wgan,
    #[serde(rename = "vaegan")]
    Vaegan,
    #[serde(rename = "acgan")]
    Acgan,
    #[serde(rename = "acvae")]
    Acvae,
    #[serde(rename = "acgan-entropy")]
    AcganEntropy,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::VanillaSaturating,
        Variant::VanillaNonSaturating,
        Variant::Lsgan,
        Variant::Wgan,
        Variant::Vaegan,
        Variant::Acgan,
        Variant::Acvae,
        Variant::AcganEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::VanillaSaturating => "vanilla-saturating",
            Variant::VanillaNonSaturating => "vanilla-nonsaturating",
            Variant::Lsgan => "lsgan",
            Variant::Wgan => "wgan",
            Variant::Vaegan => "vaegan",
            Variant::Acgan => "acgan",
            Variant::Acvae => "acvae",
            Variant::AcganEntropy => "acgan-entropy",
        }
    }

    /// Variants whose discriminator emits a raw linear score.
    pub fn linear_score(self) -> bool {
        matches!(self, Variant::Lsgan | Variant::Wgan)
    }

    /// Variants whose generator is a VAE.
    pub fn uses_vae(self) -> bool {
        matches!(self, Variant::Vaegan | Variant::Acvae)
    }

    /// Variants whose discriminator carries a class head.
    pub fn uses_class_head(self) -> bool {
        matches!(
            self,
            Variant::Acgan | Variant::Acvae | Variant::AcganEntropy
        )
    }

    /// Variants whose generator input includes the class vector.
    pub fn class_conditioned_generator(self) -> bool {
        matches!(self, Variant::Acgan | Variant::AcganEntropy)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Variant, String> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                format!("unknown variant `{s}`; valid names: {}", names.join(", "))
            })
    }
}

/// Whether the entropy class loss is driven down or up by the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyDirection {
    Minimize,
    Maximize,
}

/// Variant selection plus every loss hyperparameter.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantConfig {
    pub variant: Variant,
    /// LSGAN label for fake data (a).
    pub lsgan_fake_label: f64,
    /// LSGAN label for real data (b).
    pub lsgan_real_label: f64,
    /// LSGAN value the generator wants the discriminator to believe (c).
    pub lsgan_target: f64,
    pub lambda_rec: f64,
    pub lambda_kld: f64,
    pub lambda_dc: f64,
    pub lambda_gc: f64,
    /// Generator-side direction for the entropy class loss; the
    /// discriminator side always minimizes.
    pub entropy_direction: EntropyDirection,
    /// Critic weight-clip bound.
    pub wgan_clip: f64,
    /// Critic updates per generator update.
    pub wgan_n_critic: usize,
}

impl Default for VariantConfig {
    fn default() -> VariantConfig {
        VariantConfig::new(Variant::VanillaNonSaturating)
    }
}

impl VariantConfig {
    pub fn new(variant: Variant) -> VariantConfig {
        VariantConfig {
            variant,
            lsgan_fake_label: 0.0,
            lsgan_real_label: 1.0,
            lsgan_target: 1.0,
            lambda_rec: 1.0,
            lambda_kld: 0.1,
            lambda_dc: 1.0,
            lambda_gc: 1.0,
            entropy_direction: EntropyDirection::Maximize,
            wgan_clip: 0.01,
            wgan_n_critic: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_kld", self.lambda_kld),
            ("lambda_dc", self.lambda_dc),
            ("lambda_gc", self.lambda_gc),
        ] {
            if !(v >= 0.0) {
                return Err(LossError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.variant == Variant::Lsgan && self.lsgan_fake_label >= self.lsgan_real_label {
            return Err(LossError::Config(format!(
                "lsgan labels must be ordered a < b, got a={} b={}",
                self.lsgan_fake_label, self.lsgan_real_label
            )));
        }
        if !self.lsgan_target.is_finite() {
            return Err(LossError::Config("lsgan target c must be finite".into()));
        }
        if self.variant == Variant::Wgan {
            if !(self.wgan_clip > 0.0) {
                return Err(LossError::Config(format!(
                    "wgan clip bound must be > 0, got {}",
                    self.wgan_clip
                )));
            }
            if self.wgan_n_critic == 0 {
                return Err(LossError::Config("wgan n_critic must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// The fixed standard-normal latent prior, p(z) = N(0, I).
#[derive(Clone, Copy, Debug, Default)]
pub struct LatentPrior;

impl LatentPrior {
    pub const MU: f64 = 0.0;
    pub const SIGMA: f64 = 1.0;
}

fn check_scores_open_unit(what: &'static str, t: &Tensor) -> Result<()> {
    let bad = t.with_data(|d| d.iter().copied().find(|&v| v <= 0.0 || v >= 1.0));
    if let Some(value) = bad {
        return Err(LossError::ScoreRange { what, value });
    }
    Ok(())
}

/// Batch mean of a per-sample column, as a scalar tensor.
fn batch_mean(tape: &mut Tape, t: &Tensor) -> Result<Tensor> {
    let m = tape.mean_batch(t)?;
    if m.numel() == 1 {
        Ok(m)
    } else {
        Ok(tape.mean_batch(&m)?)
    }
}

/// ln(1 − s) chain.
fn ln_one_minus(tape: &mut Tape, s: &Tensor) -> Result<Tensor> {
    let negated = tape.neg(s)?;
    let shifted = tape.add_scalar(&negated, 1.0)?;
    Ok(tape.ln(&shifted)?)
}

// ---------------------------------------------------------------------------
// Vanilla GAN
// ---------------------------------------------------------------------------

/// Discriminator loss −E[ln s_real] − E[ln(1 − s_fake)], score form.
pub fn d_loss_vanilla(tape: &mut Tape, s_real: &Tensor, s_fake: &Tensor) -> Result<Tensor> {
    check_scores_open_unit("real score", s_real)?;
    check_scores_open_unit("fake score", s_fake)?;
    let ln_real = tape.ln(s_real)?;
    let real_term = batch_mean(tape, &ln_real)?;
    let ln_not_fake = ln_one_minus(tape, s_fake)?;
    let fake_term = batch_mean(tape, &ln_not_fake)?;
    let total = tape.add(&real_term, &fake_term)?;
    Ok(tape.neg(&total)?)
}

/// Same loss on source logits: −E[lnσ(l_real)] − E[lnσ(−l_fake)].
pub fn d_loss_vanilla_logits(
    tape: &mut Tape,
    real_logits: &Tensor,
    fake_logits: &Tensor,
) -> Result<Tensor> {
    let ls_real = tape.log_sigmoid(real_logits)?;
    let real_term = batch_mean(tape, &ls_real)?;
    let neg_fake = tape.neg(fake_logits)?;
    let ls_not_fake = tape.log_sigmoid(&neg_fake)?;
    let fake_term = batch_mean(tape, &ls_not_fake)?;
    let total = tape.add(&real_term, &fake_term)?;
    Ok(tape.neg(&total)?)
}

/// Saturating generator loss E[ln(1 − s_fake)], score form.
pub fn g_loss_saturating(tape: &mut Tape, s_fake: &Tensor) -> Result<Tensor> {
    check_scores_open_unit("fake score", s_fake)?;
    let ln_not_fake = ln_one_minus(tape, s_fake)?;
    batch_mean(tape, &ln_not_fake)
}

/// Saturating generator loss on logits: E[lnσ(−l_fake)].
pub fn g_loss_saturating_logits(tape: &mut Tape, fake_logits: &Tensor) -> Result<Tensor> {
    let neg = tape.neg(fake_logits)?;
    let ls = tape.log_sigmoid(&neg)?;
    batch_mean(tape, &ls)
}

/// Non-saturating generator loss −E[ln s_fake], score form.
pub fn g_loss_nonsaturating(tape: &mut Tape, s_fake: &Tensor) -> Result<Tensor> {
    check_scores_open_unit("fake score", s_fake)?;
    let ln_fake = tape.ln(s_fake)?;
    let term = batch_mean(tape, &ln_fake)?;
    Ok(tape.neg(&term)?)
}

/// Non-saturating generator loss on logits: −E[lnσ(l_fake)].
pub fn g_loss_nonsaturating_logits(tape: &mut Tape, fake_logits: &Tensor) -> Result<Tensor> {
    let ls = tape.log_sigmoid(fake_logits)?;
    let term = batch_mean(tape, &ls)?;
    Ok(tape.neg(&term)?)
}

// ---------------------------------------------------------------------------
// LSGAN
// ---------------------------------------------------------------------------

/// ½E[(s_real − b)²] + ½E[(s_fake − a)²] over raw linear scores.
pub fn lsgan_d_loss(
    tape: &mut Tape,
    s_real: &Tensor,
    s_fake: &Tensor,
    cfg: &VariantConfig,
) -> Result<Tensor> {
    let real_dev = tape.add_scalar(s_real, -cfg.lsgan_real_label)?;
    let real_sq = tape.square(&real_dev)?;
    let real_term = batch_mean(tape, &real_sq)?;
    let fake_dev = tape.add_scalar(s_fake, -cfg.lsgan_fake_label)?;
    let fake_sq = tape.square(&fake_dev)?;
    let fake_term = batch_mean(tape, &fake_sq)?;
    let total = tape.add(&real_term, &fake_term)?;
    Ok(tape.mul_scalar(&total, 0.5)?)
}

/// ½E[(s_fake − c)²] over raw linear scores.
pub fn lsgan_g_loss(tape: &mut Tape, s_fake: &Tensor, cfg: &VariantConfig) -> Result<Tensor> {
    let dev = tape.add_scalar(s_fake, -cfg.lsgan_target)?;
    let sq = tape.square(&dev)?;
    let term = batch_mean(tape, &sq)?;
    Ok(tape.mul_scalar(&term, 0.5)?)
}

// ---------------------------------------------------------------------------
// WGAN
// ---------------------------------------------------------------------------

/// |E[s_real] − E[s_fake]| — the printed distance, exposed as a monitoring
/// metric (the trainable decomposition is below).
pub fn wgan_distance(s_real: &Tensor, s_fake: &Tensor) -> f64 {
    let mean = |t: &Tensor| t.with_data(|d| d.iter().sum::<f64>() / d.len() as f64);
    (mean(s_real) - mean(s_fake)).abs()
}

/// Critic loss E[s_fake] − E[s_real]; descending it widens the score gap.
/// Critic weights are clipped to ±c after each step by the training loop.
pub fn wgan_critic_loss(tape: &mut Tape, s_real: &Tensor, s_fake: &Tensor) -> Result<Tensor> {
    let fake_mean = batch_mean(tape, s_fake)?;
    let real_mean = batch_mean(tape, s_real)?;
    Ok(tape.sub(&fake_mean, &real_mean)?)
}

/// Generator loss −E[s_fake].
pub fn wgan_g_loss(tape: &mut Tape, s_fake: &Tensor) -> Result<Tensor> {
    let fake_mean = batch_mean(tape, s_fake)?;
    Ok(tape.neg(&fake_mean)?)
}

// ---------------------------------------------------------------------------
// VAE pieces
// ---------------------------------------------------------------------------

/// Unit-variance Gaussian negative log-likelihood with constants dropped:
/// ½·(mean over batch of Σ(x − x̂)²).
pub fn reconstruction_loss(tape: &mut Tape, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    let (sx, sxh) = (x.shape(), x_hat.shape());
    if sx != sxh {
        return Err(LossError::Tensor(TensorError::ShapeMismatch {
            op: "reconstruction",
            left: sx,
            right: sxh,
        }));
    }
    let batch = sx[0];
    let width: usize = sx[1..].iter().product::<usize>().max(1);
    let diff = tape.sub(x, x_hat)?;
    let flat = tape.reshape(&diff, &[batch, width])?;
    let sq = tape.square(&flat)?;
    let per_sample = tape.row_sum(&sq)?;
    let mean = batch_mean(tape, &per_sample)?;
    Ok(tape.mul_scalar(&mean, 0.5)?)
}

/// Closed-form KL(q ‖ p) against the fixed N(0, I) prior: per dimension
/// −ln σ_q + (σ_q² + μ_q²)/2 − ½, summed over dimensions and averaged over
/// the batch.
pub fn kl_gaussian(
    tape: &mut Tape,
    mu: &Tensor,
    sigma: &Tensor,
    _prior: &LatentPrior,
) -> Result<Tensor> {
    let bad = sigma.with_data(|d| d.iter().copied().find(|&v| v <= 0.0));
    if let Some(value) = bad {
        return Err(LossError::Config(format!(
            "kl_gaussian needs sigma > 0, got {value}"
        )));
    }
    let ln_sigma = tape.ln(sigma)?;
    let neg_ln_sigma = tape.neg(&ln_sigma)?;
    let sigma_sq = tape.square(sigma)?;
    let mu_sq = tape.square(mu)?;
    let sum_sq = tape.add(&sigma_sq, &mu_sq)?;
    let half_sum = tape.mul_scalar(&sum_sq, 0.5)?;
    let combined = tape.add(&neg_ln_sigma, &half_sum)?;
    let per_dim = tape.add_scalar(&combined, -0.5)?;
    let per_sample = tape.row_sum(&per_dim)?;
    batch_mean(tape, &per_sample)
}

/// L_VAE = L_G + λ_rec·L_rec + λ_KLD·L_KLD.
pub fn vaegan_vae_loss(
    tape: &mut Tape,
    g_adv: &Tensor,
    rec: &Tensor,
    kld: &Tensor,
    cfg: &VariantConfig,
) -> Result<Tensor> {
    let rec_term = tape.mul_scalar(rec, cfg.lambda_rec)?;
    let kld_term = tape.mul_scalar(kld, cfg.lambda_kld)?;
    let partial = tape.add(g_adv, &rec_term)?;
    Ok(tape.add(&partial, &kld_term)?)
}

// ---------------------------------------------------------------------------
// ACGAN / ACVAE
// ---------------------------------------------------------------------------

/// −E[ln p(class = c)] from log-probabilities, with `class_one_hot`
/// selecting the conditioned class per row.
pub fn class_nll(tape: &mut Tape, log_probs: &Tensor, class_one_hot: &Tensor) -> Result<Tensor> {
    let selected = tape.mul(class_one_hot, log_probs)?;
    let per_sample = tape.row_sum(&selected)?;
    let mean = batch_mean(tape, &per_sample)?;
    Ok(tape.neg(&mean)?)
}

/// Probability-form class term: −E[ln Σ(onehot ⊙ p)].
fn class_nll_from_probs(
    tape: &mut Tape,
    probs: &Tensor,
    class_one_hot: &Tensor,
) -> Result<Tensor> {
    let selected = tape.mul(class_one_hot, probs)?;
    let picked = tape.row_sum(&selected)?;
    let ln_picked = tape.ln(&picked)?;
    let mean = batch_mean(tape, &ln_picked)?;
    Ok(tape.neg(&mean)?)
}

/// L_D = L_Dₛ + λ_Dc·L_Dc over scores and class probabilities. The class
/// term trains the discriminator to classify fakes by their conditioned
/// class — the heads cooperate rather than compete.
pub fn acgan_d_loss(
    tape: &mut Tape,
    s_real: &Tensor,
    s_fake: &Tensor,
    p_real: &Tensor,
    p_fake: &Tensor,
    class_one_hot: &Tensor,
    cfg: &VariantConfig,
) -> Result<Tensor> {
    let source = d_loss_vanilla(tape, s_real, s_fake)?;
    let real_class = class_nll_from_probs(tape, p_real, class_one_hot)?;
    let fake_class = class_nll_from_probs(tape, p_fake, class_one_hot)?;
    let class_sum = tape.add(&real_class, &fake_class)?;
    let class_term = tape.mul_scalar(&class_sum, cfg.lambda_dc)?;
    Ok(tape.add(&source, &class_term)?)
}

/// Logits/log-probability form of [`acgan_d_loss`].
pub fn acgan_d_loss_logits(
    tape: &mut Tape,
    real_logits: &Tensor,
    fake_logits: &Tensor,
    log_p_real: &Tensor,
    log_p_fake: &Tensor,
    class_one_hot: &Tensor,
    cfg: &VariantConfig,
) -> Result<Tensor> {
    let source = d_loss_vanilla_logits(tape, real_logits, fake_logits)?;
    let real_class = class_nll(tape, log_p_real, class_one_hot)?;
    let fake_class = class_nll(tape, log_p_fake, class_one_hot)?;
    let class_sum = tape.add(&real_class, &fake_class)?;
    let class_term = tape.mul_scalar(&class_sum, cfg.lambda_dc)?;
    Ok(tape.add(&source, &class_term)?)
}

/// L_G = L_Gₛ + λ_Gc·L_Gc over scores and class probabilities.
pub fn acgan_g_loss(
    tape: &mut Tape,
    s_fake: &Tensor,
    p_fake: &Tensor,
    class_one_hot: &Tensor,
    cfg: &VariantConfig,
) -> Result<Tensor> {
    let source = g_loss_nonsaturating(tape, s_fake)?;
    let class = class_nll_from_probs(tape, p_fake, class_one_hot)?;
    let class_term = tape.mul_scalar(&class, cfg.lambda_gc)?;
    Ok(tape.add(&source, &class_term)?)
}

/// Logits/log-probability form of [`acgan_g_loss`].
pub fn acgan_g_loss_logits(
    tape: &mut Tape,
    fake_logits: &Tensor,
    log_p_fake: &Tensor,
    class_one_hot: &Tensor,
    cfg: &VariantConfig,
) -> Result<Tensor> {
    let source = g_loss_nonsaturating_logits(tape, fake_logits)?;
    let class = class_nll(tape, log_p_fake, class_one_hot)?;
    let class_term = tape.mul_scalar(&class, cfg.lambda_gc)?;
    Ok(tape.add(&source, &class_term)?)
}

/// Mean Shannon entropy of the class head, H(p) = −Σ p ln p per row, for the
/// unlabeled-data variant. Minimize returns +H; maximize returns −H so that
/// descending the result raises the entropy.
pub fn entropy_class_loss(
    tape: &mut Tape,
    probs: &Tensor,
    direction: EntropyDirection,
) -> Result<Tensor> {
    let bad = probs.with_data(|d| d.iter().copied().find(|&v| v < 0.0));
    if let Some(value) = bad {
        return Err(LossError::NegativeProbability { value });
    }
    let plogp = tape.x_ln_x(probs)?;
    let per_sample = tape.row_sum(&plogp)?;
    let mean = batch_mean(tape, &per_sample)?;
    // mean holds E[Σ p ln p] = −H
    match direction {
        EntropyDirection::Minimize => Ok(tape.neg(&mean)?),
        EntropyDirection::Maximize => Ok(mean),
    }
}

/// L_VAE = L_Gₛ + λ_Gc·L_Gc + λ_rec·L_rec + λ_KLD·L_KLD — the conditioned
/// VAE generator's loss; the discriminator side reuses [`acgan_d_loss`].
pub fn acvae_vae_loss(
    tape: &mut Tape,
    g_source: &Tensor,
    g_class: &Tensor,
    rec: &Tensor,
    kld: &Tensor,
    cfg: &VariantConfig,
) -> Result<Tensor> {
    let class_term = tape.mul_scalar(g_class, cfg.lambda_gc)?;
    let rec_term = tape.mul_scalar(rec, cfg.lambda_rec)?;
    let kld_term = tape.mul_scalar(kld, cfg.lambda_kld)?;
    let a = tape.add(g_source, &class_term)?;
    let b = tape.add(&a, &rec_term)?;
    Ok(tape.add(&b, &kld_term)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    fn col(values: &[f64]) -> Tensor {
        t(&[values.len(), 1], values.to_vec())
    }

    fn logit(s: f64) -> f64 {
        (s / (1.0 - s)).ln()
    }

    #[test]
    fn vanilla_d_loss_at_uninformative_scores() {
        let mut tape = Tape::new();
        let loss = d_loss_vanilla(&mut tape, &col(&[0.5]), &col(&[0.5])).unwrap();
        assert!((loss.item() - 2.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn vanilla_d_loss_vanishes_for_perfect_discriminator() {
        let mut tape = Tape::new();
        let loss = d_loss_vanilla(&mut tape, &col(&[1.0 - 1e-9]), &col(&[1e-9])).unwrap();
        assert!(loss.item().abs() < 1e-6);
    }

    #[test]
    fn vanilla_d_loss_matches_scalar_substitution_oracle() {
        // Independent oracle: evaluate the expression element by element.
        let real = [0.9, 0.8];
        let fake = [0.1, 0.3];
        let oracle = -(real.iter().map(|s: &f64| s.ln()).sum::<f64>() / 2.0)
            - (fake.iter().map(|s: &f64| (1.0 - s).ln()).sum::<f64>() / 2.0);
        let mut tape = Tape::new();
        let loss = d_loss_vanilla(&mut tape, &col(&real), &col(&fake)).unwrap();
        assert!((loss.item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn vanilla_d_loss_rejects_out_of_range_scores() {
        let mut tape = Tape::new();
        let err = d_loss_vanilla(&mut tape, &col(&[1.0]), &col(&[0.5])).unwrap_err();
        assert!(matches!(err, LossError::ScoreRange { .. }));
    }

    #[test]
    fn logits_form_equals_score_form() {
        let scores = [0.9, 0.8, 0.2, 0.6];
        let fakes = [0.1, 0.3, 0.7, 0.4];
        let logits_r = col(&scores.map(logit));
        let logits_f = col(&fakes.map(logit));
        let mut tape = Tape::new();
        let via_scores = d_loss_vanilla(&mut tape, &col(&scores), &col(&fakes))
            .unwrap()
            .item();
        let via_logits = d_loss_vanilla_logits(&mut tape, &logits_r, &logits_f)
            .unwrap()
            .item();
        assert!((via_scores - via_logits).abs() < 1e-12);

        let sat_scores = g_loss_saturating(&mut tape, &col(&fakes)).unwrap().item();
        let sat_logits = g_loss_saturating_logits(&mut tape, &logits_f)
            .unwrap()
            .item();
        assert!((sat_scores - sat_logits).abs() < 1e-12);

        let ns_scores = g_loss_nonsaturating(&mut tape, &col(&fakes)).unwrap().item();
        let ns_logits = g_loss_nonsaturating_logits(&mut tape, &logits_f)
            .unwrap()
            .item();
        assert!((ns_scores - ns_logits).abs() < 1e-12);
    }

    #[test]
    fn saturating_loss_values() {
        let mut tape = Tape::new();
        let sym = g_loss_saturating(&mut tape, &col(&[0.5])).unwrap();
        assert!((sym.item() - 0.5_f64.ln()).abs() < 1e-12);
        let rejected = g_loss_saturating(&mut tape, &col(&[1e-12])).unwrap();
        assert!(rejected.item().abs() < 1e-9);
    }

    #[test]
    fn nonsaturating_loss_values() {
        let mut tape = Tape::new();
        let sym = g_loss_nonsaturating(&mut tape, &col(&[0.5])).unwrap();
        assert!((sym.item() - LN_2).abs() < 1e-12);
        let fooled = g_loss_nonsaturating(&mut tape, &col(&[1.0 - 1e-12])).unwrap();
        assert!(fooled.item().abs() < 1e-9);
    }

    /// d(loss)/d(score) at a given fake score, by autodiff.
    fn score_gradient(loss: impl Fn(&mut Tape, &Tensor) -> Result<Tensor>, s: f64) -> f64 {
        let score = Tensor::param(&[1, 1], vec![s]).unwrap();
        let mut tape = Tape::new();
        let l = loss(&mut tape, &score).unwrap();
        tape.backward(&l).unwrap();
        score.grad().unwrap()[0]
    }

    #[test]
    fn saturating_gradient_vanishes_where_nonsaturating_does_not() {
        // The saturating form is flat near s = 0 while the non-saturating
        // form is steep there; at s = 0.5 the magnitudes cross.
        let sat_near_zero = score_gradient(g_loss_saturating, 0.01).abs();
        let sat_mid = score_gradient(g_loss_saturating, 0.5).abs();
        assert!(sat_near_zero < sat_mid);

        let ns_near_zero = score_gradient(g_loss_nonsaturating, 0.01).abs();
        assert!(ns_near_zero > sat_near_zero);
    }

    #[test]
    fn steeper_gradient_holds_across_the_grid() {
        for i in 1..50 {
            let s = i as f64 / 100.0; // (0, 0.5)
            let ns = score_gradient(g_loss_nonsaturating, s).abs();
            let sat = score_gradient(g_loss_saturating, s).abs();
            assert!(ns > sat, "at s = {s}: non-saturating {ns} vs saturating {sat}");
        }
    }

    #[test]
    fn lsgan_losses_match_substitution() {
        let cfg = VariantConfig::new(Variant::Lsgan);
        let mut tape = Tape::new();
        let zero = lsgan_d_loss(&mut tape, &col(&[1.0]), &col(&[0.0]), &cfg).unwrap();
        assert_eq!(zero.item(), 0.0);

        let mid = lsgan_d_loss(&mut tape, &col(&[0.5]), &col(&[0.5]), &cfg).unwrap();
        assert!((mid.item() - 0.25).abs() < 1e-15);

        let g_zero = lsgan_g_loss(&mut tape, &col(&[1.0]), &cfg).unwrap();
        assert_eq!(g_zero.item(), 0.0);
        let g_half = lsgan_g_loss(&mut tape, &col(&[0.0]), &cfg).unwrap();
        assert!((g_half.item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn lsgan_loss_is_batch_order_invariant() {
        let cfg = VariantConfig::new(Variant::Lsgan);
        let mut tape = Tape::new();
        let a = lsgan_d_loss(&mut tape, &col(&[0.7, 0.2]), &col(&[0.4, 0.1]), &cfg)
            .unwrap()
            .item();
        let b = lsgan_d_loss(&mut tape, &col(&[0.2, 0.7]), &col(&[0.1, 0.4]), &cfg)
            .unwrap()
            .item();
        assert_eq!(a, b);
    }

    #[test]
    fn lsgan_gradient_nonzero_for_correct_but_far_samples() {
        // Correctly classified (score 0.2 < 0.5) but far from the target
        // label c = 1; the least-squares pull must still be live.
        let cfg = VariantConfig::new(Variant::Lsgan);
        let score = Tensor::param(&[1, 1], vec![0.2]).unwrap();
        let mut tape = Tape::new();
        let l = lsgan_g_loss(&mut tape, &score, &cfg).unwrap();
        tape.backward(&l).unwrap();
        assert!(score.grad().unwrap()[0].abs() > 0.1);
    }

    #[test]
    fn wgan_distance_examples() {
        assert_eq!(wgan_distance(&col(&[1.0, 1.0]), &col(&[1.0, 1.0])), 0.0);
        assert_eq!(wgan_distance(&col(&[3.0]), &col(&[1.0])), 2.0);
        // Symmetry under argument exchange.
        assert_eq!(
            wgan_distance(&col(&[3.0]), &col(&[1.0])),
            wgan_distance(&col(&[1.0]), &col(&[3.0]))
        );
    }

    #[test]
    fn wgan_critic_loss_identities() {
        let mut tape = Tape::new();
        let same = wgan_critic_loss(&mut tape, &col(&[0.3, 0.7]), &col(&[0.3, 0.7])).unwrap();
        assert_eq!(same.item(), 0.0);

        // When means are ordered, |critic loss| reproduces the distance.
        let real = col(&[3.0, 5.0]);
        let fake = col(&[1.0, 1.0]);
        let loss = wgan_critic_loss(&mut tape, &real, &fake).unwrap();
        assert!((loss.item().abs() - wgan_distance(&real, &fake)).abs() < 1e-12);

        // Adding a constant to every score leaves the loss unchanged.
        let shift = |v: &[f64]| col(&v.iter().map(|x| x + 10.0).collect::<Vec<_>>());
        let shifted =
            wgan_critic_loss(&mut tape, &shift(&[3.0, 5.0]), &shift(&[1.0, 1.0])).unwrap();
        assert!((shifted.item() - loss.item()).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_loss_values() {
        let mut tape = Tape::new();
        let x = t(&[1, 2], vec![1.0, 0.0]);
        let same = reconstruction_loss(&mut tape, &x, &x).unwrap();
        assert_eq!(same.item(), 0.0);
        let x_hat = t(&[1, 2], vec![0.0, 0.0]);
        let half = reconstruction_loss(&mut tape, &x, &x_hat).unwrap();
        assert!((half.item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_loss_decreases_along_the_segment() {
        let mut tape = Tape::new();
        let x = t(&[1, 3], vec![1.0, -2.0, 0.5]);
        let x0 = [3.0, 1.0, -1.0];
        let mut last = f64::INFINITY;
        for step in 0..3 {
            let alpha = step as f64 / 3.0;
            let interp: Vec<f64> = x0
                .iter()
                .zip([1.0, -2.0, 0.5])
                .map(|(&a, b)| a + alpha * (b - a))
                .collect();
            let x_hat = t(&[1, 3], interp);
            let loss = reconstruction_loss(&mut tape, &x, &x_hat).unwrap().item();
            assert!(loss < last);
            last = loss;
        }
    }

    #[test]
    fn kl_gaussian_closed_form_values() {
        let prior = LatentPrior;
        let mut tape = Tape::new();
        let at_prior = kl_gaussian(
            &mut tape,
            &t(&[1, 1], vec![0.0]),
            &t(&[1, 1], vec![1.0]),
            &prior,
        )
        .unwrap();
        assert_eq!(at_prior.item(), 0.0);

        let shifted = kl_gaussian(
            &mut tape,
            &t(&[1, 1], vec![1.0]),
            &t(&[1, 1], vec![1.0]),
            &prior,
        )
        .unwrap();
        assert!((shifted.item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_gaussian_rejects_non_positive_sigma() {
        let mut tape = Tape::new();
        let err = kl_gaussian(
            &mut tape,
            &t(&[1, 1], vec![0.0]),
            &t(&[1, 1], vec![0.0]),
            &LatentPrior,
        )
        .unwrap_err();
        assert!(err.to_string().contains("sigma"));
    }

    #[test]
    fn kl_gaussian_matches_monte_carlo_oracle() {
        // E_{z~q}[ln q(z) − ln p(z)] sampled directly; light version of the
        // acceptance-level oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..3 {
            let mu: f64 = rng.gen_range(-1.5..1.5);
            let sigma: f64 = rng.gen_range(0.3..3.0);
            let n = 200_000;
            let mut acc = 0.0;
            for _ in 0..n {
                let z = mu + sigma * crate::nets::standard_normal(&mut rng);
                let log_q = -0.5 * ((z - mu) / sigma).powi(2) - sigma.ln();
                let log_p = -0.5 * z * z;
                acc += log_q - log_p;
            }
            let mc = acc / n as f64;
            let mut tape = Tape::new();
            let closed = kl_gaussian(
                &mut tape,
                &t(&[1, 1], vec![mu]),
                &t(&[1, 1], vec![sigma]),
                &LatentPrior,
            )
            .unwrap()
            .item();
            let tol = (0.02 * closed.abs()).max(0.01);
            assert!(
                (closed - mc).abs() <= tol,
                "mu={mu} sigma={sigma}: closed {closed} vs mc {mc}"
            );
        }
    }

    #[test]
    fn kl_gaussian_non_negative_on_grid() {
        let prior = LatentPrior;
        for mu_i in -4..=4 {
            for sg_i in 1..=10 {
                let mu = mu_i as f64 * 0.5;
                let sigma = sg_i as f64 * 0.3;
                let mut tape = Tape::new();
                let v = kl_gaussian(
                    &mut tape,
                    &t(&[1, 1], vec![mu]),
                    &t(&[1, 1], vec![sigma]),
                    &prior,
                )
                .unwrap()
                .item();
                assert!(v >= 0.0, "KL({mu},{sigma}) = {v}");
                if mu == 0.0 && (sigma - 1.0).abs() < 1e-12 {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn vaegan_loss_degenerates_and_is_linear_in_lambdas() {
        let mut cfg = VariantConfig::new(Variant::Vaegan);
        let mut tape = Tape::new();
        let g = Tensor::scalar(0.8);
        let rec = Tensor::scalar(1.5);
        let kld = Tensor::scalar(0.3);

        cfg.lambda_rec = 0.0;
        cfg.lambda_kld = 0.0;
        let bare = vaegan_vae_loss(&mut tape, &g, &rec, &kld, &cfg).unwrap();
        assert_eq!(bare.item(), 0.8);

        cfg.lambda_rec = 1.0;
        let with_rec = vaegan_vae_loss(&mut tape, &g, &rec, &kld, &cfg).unwrap();
        cfg.lambda_rec = 2.0;
        let with_double = vaegan_vae_loss(&mut tape, &g, &rec, &kld, &cfg).unwrap();
        assert!((with_double.item() - with_rec.item() - 1.5).abs() < 1e-12);

        let zero = vaegan_vae_loss(
            &mut tape,
            &Tensor::scalar(0.0),
            &Tensor::scalar(0.0),
            &Tensor::scalar(0.0),
            &cfg,
        )
        .unwrap();
        assert_eq!(zero.item(), 0.0);
    }

    fn one_hot(rows: &[usize], k: usize) -> Tensor {
        let mut data = vec![0.0; rows.len() * k];
        for (r, &c) in rows.iter().enumerate() {
            data[r * k + c] = 1.0;
        }
        t(&[rows.len(), k], data)
    }

    #[test]
    fn acgan_d_loss_uniform_head_gives_two_ln_k() {
        // Perfect source head, uniform 4-way class head: the class term is
        // 2·ln 4 and the source term vanishes.
        let cfg = VariantConfig::new(Variant::Acgan);
        let mut tape = Tape::new();
        let s_real = col(&[1.0 - 1e-12]);
        let s_fake = col(&[1e-12]);
        let uniform = t(&[1, 4], vec![0.25; 4]);
        let classes = one_hot(&[2], 4);
        let loss = acgan_d_loss(
            &mut tape, &s_real, &s_fake, &uniform, &uniform, &classes, &cfg,
        )
        .unwrap();
        assert!((loss.item() - 2.0 * 4.0_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn acgan_losses_degenerate_to_vanilla_when_lambda_is_zero() {
        let mut cfg = VariantConfig::new(Variant::Acgan);
        cfg.lambda_dc = 0.0;
        cfg.lambda_gc = 0.0;
        let s_real = col(&[0.7, 0.6]);
        let s_fake = col(&[0.4, 0.2]);
        let p = t(&[2, 3], vec![0.2, 0.5, 0.3, 0.1, 0.8, 0.1]);
        let c = one_hot(&[0, 2], 3);
        let mut tape = Tape::new();
        let ac = acgan_d_loss(&mut tape, &s_real, &s_fake, &p, &p, &c, &cfg)
            .unwrap()
            .item();
        let vanilla = d_loss_vanilla(&mut tape, &s_real, &s_fake).unwrap().item();
        assert!((ac - vanilla).abs() <= 1e-12);

        let ac_g = acgan_g_loss(&mut tape, &s_fake, &p, &c, &cfg).unwrap().item();
        let vanilla_g = g_loss_nonsaturating(&mut tape, &s_fake).unwrap().item();
        assert!((ac_g - vanilla_g).abs() <= 1e-12);
    }

    #[test]
    fn acgan_g_class_term_vanishes_on_confident_correct_head() {
        let cfg = VariantConfig::new(Variant::Acgan);
        let mut tape = Tape::new();
        let s_fake = col(&[0.5]);
        let p = t(&[1, 3], vec![0.0, 1.0, 0.0]);
        let c = one_hot(&[1], 3);
        let loss = acgan_g_loss(&mut tape, &s_fake, &p, &c, &cfg).unwrap();
        assert!((loss.item() - LN_2).abs() < 1e-12); // only the source term remains
    }

    #[test]
    fn acgan_d_loss_matches_scalar_oracle_on_random_batch() {
        let cfg = VariantConfig::new(Variant::Acgan);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let b = 4;
        let k = 3;
        let s_real: Vec<f64> = (0..b).map(|_| rng.gen_range(0.05..0.95)).collect();
        let s_fake: Vec<f64> = (0..b).map(|_| rng.gen_range(0.05..0.95)).collect();
        let mut p_real = vec![0.0; b * k];
        let mut p_fake = vec![0.0; b * k];
        for row in 0..b {
            let mut raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.iter_mut().for_each(|v| *v /= total);
            p_real[row * k..(row + 1) * k].copy_from_slice(&raw);
            let mut raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.iter_mut().for_each(|v| *v /= total);
            p_fake[row * k..(row + 1) * k].copy_from_slice(&raw);
        }
        let classes: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();

        // Scalar substitution oracle.
        let mut oracle = 0.0;
        for i in 0..b {
            oracle += -s_real[i].ln() / b as f64 - (1.0 - s_fake[i]).ln() / b as f64;
            oracle += cfg.lambda_dc
                * (-p_real[i * k + classes[i]].ln() / b as f64
                    - p_fake[i * k + classes[i]].ln() / b as f64);
        }

        let mut tape = Tape::new();
        let loss = acgan_d_loss(
            &mut tape,
            &col(&s_real),
            &col(&s_fake),
            &t(&[b, k], p_real),
            &t(&[b, k], p_fake),
            &one_hot(&classes, k),
            &cfg,
        )
        .unwrap();
        assert!((loss.item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn entropy_values_and_symmetry() {
        let mut tape = Tape::new();
        let sharp = one_hot(&[1], 4);
        let zero = entropy_class_loss(&mut tape, &sharp, EntropyDirection::Minimize).unwrap();
        assert_eq!(zero.item(), 0.0);

        let uniform = t(&[1, 4], vec![0.25; 4]);
        let max = entropy_class_loss(&mut tape, &uniform, EntropyDirection::Minimize).unwrap();
        assert!((max.item() - 4.0_f64.ln()).abs() < 1e-12);

        let p = t(&[1, 4], vec![0.1, 0.2, 0.3, 0.4]);
        let permuted = t(&[1, 4], vec![0.4, 0.1, 0.2, 0.3]);
        let h1 = entropy_class_loss(&mut tape, &p, EntropyDirection::Minimize).unwrap();
        let h2 = entropy_class_loss(&mut tape, &permuted, EntropyDirection::Minimize).unwrap();
        assert!((h1.item() - h2.item()).abs() < 1e-15);

        let maxed = entropy_class_loss(&mut tape, &p, EntropyDirection::Maximize).unwrap();
        assert!((maxed.item() + h1.item()).abs() < 1e-15);
    }

    #[test]
    fn entropy_rejects_negative_probability() {
        let mut tape = Tape::new();
        let p = t(&[1, 2], vec![1.2, -0.2]);
        let err = entropy_class_loss(&mut tape, &p, EntropyDirection::Minimize).unwrap_err();
        assert!(matches!(err, LossError::NegativeProbability { .. }));
    }

    #[test]
    fn variant_lattice_equalities() {
        // acvae → vaegan → vanilla under zero weights.
        let mut tape = Tape::new();
        let g_source = Tensor::scalar(0.9);
        let g_class = Tensor::scalar(0.4);
        let rec = Tensor::scalar(1.1);
        let kld = Tensor::scalar(0.2);

        let mut cfg = VariantConfig::new(Variant::Acvae);
        cfg.lambda_gc = 0.0;
        let acvae = acvae_vae_loss(&mut tape, &g_source, &g_class, &rec, &kld, &cfg).unwrap();
        let vaegan = vaegan_vae_loss(&mut tape, &g_source, &rec, &kld, &cfg).unwrap();
        assert!((acvae.item() - vaegan.item()).abs() <= 1e-12);

        cfg.lambda_rec = 0.0;
        cfg.lambda_kld = 0.0;
        let bare = vaegan_vae_loss(&mut tape, &g_source, &rec, &kld, &cfg).unwrap();
        assert!((bare.item() - g_source.item()).abs() <= 1e-12);
    }

    #[test]
    fn acvae_loss_linear_in_each_lambda() {
        let mut tape = Tape::new();
        let g_source = Tensor::scalar(0.9);
        let g_class = Tensor::scalar(0.4);
        let rec = Tensor::scalar(1.1);
        let kld = Tensor::scalar(0.2);
        let mut cfg = VariantConfig::new(Variant::Acvae);
        for (field, component) in [("gc", 0.4), ("rec", 1.1), ("kld", 0.2)] {
            let set = |cfg: &mut VariantConfig, v: f64| match field {
                "gc" => cfg.lambda_gc = v,
                "rec" => cfg.lambda_rec = v,
                _ => cfg.lambda_kld = v,
            };
            set(&mut cfg, 1.0);
            let base = acvae_vae_loss(&mut tape, &g_source, &g_class, &rec, &kld, &cfg)
                .unwrap()
                .item();
            set(&mut cfg, 2.0);
            let doubled = acvae_vae_loss(&mut tape, &g_source, &g_class, &rec, &kld, &cfg)
                .unwrap()
                .item();
            assert!((doubled - base - component).abs() < 1e-12);
            set(&mut cfg, 1.0);
        }
    }

    #[test]
    fn config_validation_catches_bad_settings() {
        let mut cfg = VariantConfig::new(Variant::Lsgan);
        cfg.lsgan_fake_label = 1.0;
        cfg.lsgan_real_label = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = VariantConfig::new(Variant::Vaegan);
        cfg.lambda_rec = -0.5;
        assert!(cfg.validate().is_err());

        let mut cfg = VariantConfig::new(Variant::Wgan);
        cfg.wgan_clip = 0.0;
        assert!(cfg.validate().is_err());

        assert!(VariantConfig::new(Variant::Acgan).validate().is_ok());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            let parsed: Variant = v.name().parse().unwrap();
            assert_eq!(parsed, v);
        }
        let err = "dcgan".parse::<Variant>().unwrap_err();
        assert!(err.contains("lsgan") && err.contains("acvae"));
    }

    #[test]
    fn losses_are_non_negative_on_their_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let cfg = VariantConfig::new(Variant::Lsgan);
        for _ in 0..50 {
            let s_real: Vec<f64> = (0..4).map(|_| rng.gen_range(0.01..0.99)).collect();
            let s_fake: Vec<f64> = (0..4).map(|_| rng.gen_range(0.01..0.99)).collect();
            let mut tape = Tape::new();
            assert!(
                d_loss_vanilla(&mut tape, &col(&s_real), &col(&s_fake))
                    .unwrap()
                    .item()
                    >= 0.0
            );
            assert!(
                g_loss_nonsaturating(&mut tape, &col(&s_fake))
                    .unwrap()
                    .item()
                    >= 0.0
            );
            assert!(
                lsgan_d_loss(&mut tape, &col(&s_real), &col(&s_fake), &cfg)
                    .unwrap()
                    .item()
                    >= 0.0
            );
            assert!(lsgan_g_loss(&mut tape, &col(&s_fake), &cfg).unwrap().item() >= 0.0);
        }
    }
}
