//! Model builders and forward passes: generator, discriminator (plain,
//! critic, and auxiliary-classifier), and the VAE generator with its three
//! conditioning placements.
//!
//! Every network is an MLP over flattened time series with tanh hidden
//! activations. Dosage outputs pass through softplus so generated doses are
//! non-negative with a nonzero gradient everywhere. Weights are initialized
//! uniform in ±√(6/(fan_in+fan_out)) from a caller-supplied seeded RNG;
//! biases start at zero.

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NetsError {
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        source: TensorError,
    },
    #[error("{what} width mismatch: network was built for {expected}, got {got}")]
    InputWidth {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("class head queried on a discriminator built without one")]
    NoClassHead,
    #[error("conditioning placement `{placement}` requires a class vector, none given")]
    MissingCondition { placement: &'static str },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NetsError>;

fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect()
}

/// Fully connected layer; weight is (fan_in, fan_out), bias is (fan_out).
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: Tensor::param(&[fan_in, fan_out], xavier_uniform(rng, fan_in, fan_out))
                .expect("init values are finite"),
            bias: Tensor::param(&[fan_out], vec![0.0; fan_out]).expect("zeros are finite"),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> crate::tensor::Result<Tensor> {
        let product = tape.matmul(x, &self.weight)?;
        tape.add(&product, &self.bias)
    }

    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Multilayer perceptron: tanh between layers, linear final output.
pub struct Mlp {
    layers: Vec<Linear>,
    widths: Vec<usize>,
}

impl Mlp {
    /// `widths` chains input through hidden sizes to the output width.
    pub fn new(rng: &mut impl Rng, widths: &[usize]) -> Mlp {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths
            .windows(2)
            .map(|pair| Linear::new(rng, pair[0], pair[1]))
            .collect();
        Mlp {
            layers,
            widths: widths.to_vec(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Forward pass; tensor failures are reported with the layer index.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        let got = *shape.last().unwrap_or(&0);
        if got != self.input_width() {
            return Err(NetsError::InputWidth {
                what: "input",
                expected: self.input_width(),
                got,
            });
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer
                .forward(tape, &h)
                .map_err(|source| NetsError::Layer { layer: i, source })?;
            if i != last {
                h = tape
                    .tanh(&h)
                    .map_err(|source| NetsError::Layer { layer: i, source })?;
            }
        }
        Ok(h)
    }

    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.named_params(&format!("{prefix}.l{i}"), out);
        }
    }
}

/// Dose-history generator: covariates ++ noise ++ optional class one-hot in,
/// softplus-mapped (batch, 2, T) dose tensor out. Channel 0 is PPF,
/// channel 1 is RFTN.
pub struct Generator {
    mlp: Mlp,
    covariate_width: usize,
    noise_width: usize,
    class_width: usize,
    horizon: usize,
}

impl Generator {
    pub fn new(
        rng: &mut impl Rng,
        covariate_width: usize,
        noise_width: usize,
        class_width: usize,
        horizon: usize,
        hidden: &[usize],
    ) -> Generator {
        let mut widths = vec![covariate_width + noise_width + class_width];
        widths.extend_from_slice(hidden);
        widths.push(2 * horizon);
        Generator {
            mlp: Mlp::new(rng, &widths),
            covariate_width,
            noise_width,
            class_width,
            horizon,
        }
    }

    pub fn noise_width(&self) -> usize {
        self.noise_width
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn class_width(&self) -> usize {
        self.class_width
    }

    pub fn generate(
        &self,
        tape: &mut Tape,
        covariates: &Tensor,
        noise: &Tensor,
        class: Option<&Tensor>,
    ) -> Result<Tensor> {
        check_width("covariates", covariates, self.covariate_width)?;
        check_width("noise", noise, self.noise_width)?;
        let mut parts = vec![covariates, noise];
        match (class, self.class_width) {
            (Some(c), w) if w > 0 => {
                check_width("class vector", c, w)?;
                parts.push(c);
            }
            (Some(c), _) => {
                return Err(NetsError::InputWidth {
                    what: "class vector",
                    expected: 0,
                    got: *c.shape().last().unwrap_or(&0),
                })
            }
            (None, w) if w > 0 => {
                return Err(NetsError::InputWidth {
                    what: "class vector",
                    expected: w,
                    got: 0,
                })
            }
            (None, _) => {}
        }
        let input = tape.concat(&parts)?;
        let raw = self.mlp.forward(tape, &input)?;
        let doses = tape.softplus(&raw)?;
        let batch = doses.shape()[0];
        Ok(tape.reshape(&doses, &[batch, 2, self.horizon])?)
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.mlp.named_params("generator", &mut out);
        out
    }
}

fn check_width(what: &'static str, t: &Tensor, expected: usize) -> Result<()> {
    let got = *t.shape().last().unwrap_or(&0);
    if got != expected {
        return Err(NetsError::InputWidth {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// Source-head behavior: probability in (0,1) or an unbounded critic score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceMode {
    Probabilistic,
    Critic,
}

/// Discriminator output bundle for one forward pass.
pub struct Judgment {
    /// Pre-activation source output, shape (batch, 1).
    pub source_logit: Tensor,
    /// σ(logit) in probabilistic mode; the raw logit in critic mode.
    pub score: Tensor,
    class_log_probs: Option<Tensor>,
    class_probs: Option<Tensor>,
}

impl Judgment {
    pub fn class_log_probs(&self) -> Result<&Tensor> {
        self.class_log_probs.as_ref().ok_or(NetsError::NoClassHead)
    }

    pub fn class_probs(&self) -> Result<&Tensor> {
        self.class_probs.as_ref().ok_or(NetsError::NoClassHead)
    }

    pub fn has_class_head(&self) -> bool {
        self.class_probs.is_some()
    }
}

/// Discriminator over flattened dose history plus covariates, with a source
/// head and an optional class head.
pub struct Discriminator {
    trunk: Mlp,
    head_source: Linear,
    head_class: Option<Linear>,
    mode: SourceMode,
    covariate_width: usize,
    data_width: usize,
}

impl Discriminator {
    pub fn new(
        rng: &mut impl Rng,
        data_width: usize,
        covariate_width: usize,
        n_classes: usize,
        mode: SourceMode,
        hidden: &[usize],
    ) -> Discriminator {
        assert!(!hidden.is_empty(), "discriminator needs a hidden trunk");
        let mut widths = vec![data_width + covariate_width];
        widths.extend_from_slice(hidden);
        let trunk = Mlp::new(rng, &widths);
        let top = *hidden.last().unwrap();
        Discriminator {
            trunk,
            head_source: Linear::new(rng, top, 1),
            head_class: (n_classes > 0).then(|| Linear::new(rng, top, n_classes)),
            mode,
            covariate_width,
            data_width,
        }
    }

    pub fn mode(&self) -> SourceMode {
        self.mode
    }

    pub fn n_classes(&self) -> usize {
        self.head_class.as_ref().map_or(0, |h| h.bias.shape()[0])
    }

    pub fn discriminate(
        &self,
        tape: &mut Tape,
        sample: &Tensor,
        covariates: &Tensor,
    ) -> Result<Judgment> {
        check_width("covariates", covariates, self.covariate_width)?;
        let batch = sample.shape()[0];
        let flat = if sample.shape().len() > 2 {
            tape.reshape(sample, &[batch, self.data_width])?
        } else {
            sample.clone()
        };
        check_width("sample", &flat, self.data_width)?;
        let input = tape.concat(&[&flat, covariates])?;
        let trunk_out = self.trunk.forward(tape, &input)?;
        let features = tape.tanh(&trunk_out)?;
        let source_logit = self
            .head_source
            .forward(tape, &features)
            .map_err(NetsError::Tensor)?;
        let score = match self.mode {
            SourceMode::Probabilistic => tape.sigmoid(&source_logit)?,
            SourceMode::Critic => source_logit.clone(),
        };
        let (class_log_probs, class_probs) = match &self.head_class {
            Some(head) => {
                let logits = head.forward(tape, &features).map_err(NetsError::Tensor)?;
                let log_probs = tape.log_softmax(&logits)?;
                let probs = tape.exp(&log_probs)?;
                (Some(log_probs), Some(probs))
            }
            None => (None, None),
        };
        Ok(Judgment {
            source_logit,
            score,
            class_log_probs,
            class_probs,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.trunk.named_params("discriminator.trunk", &mut out);
        self.head_source
            .named_params("discriminator.source", &mut out);
        if let Some(head) = &self.head_class {
            head.named_params("discriminator.class", &mut out);
        }
        out
    }

    /// Shift the source-head bias by δ; used to reason about critic
    /// translation behavior in tests.
    pub fn shift_source_bias(&self, delta: f64) {
        let mut b = self.head_source.bias.data();
        for v in b.iter_mut() {
            *v += delta;
        }
        self.head_source
            .bias
            .set_data(&b)
            .expect("finite bias shift");
    }
}

/// Which VAE submodules receive the class condition vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Conditioning {
    #[serde(rename = "encoder-only")]
    EncoderOnly,
    #[serde(rename = "decoder-only")]
    DecoderOnly,
    #[serde(rename = "both")]
    Both,
}

impl Conditioning {
    pub fn encoder_receives(self) -> bool {
        matches!(self, Conditioning::EncoderOnly | Conditioning::Both)
    }

    pub fn decoder_receives(self) -> bool {
        matches!(self, Conditioning::DecoderOnly | Conditioning::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            Conditioning::EncoderOnly => "encoder-only",
            Conditioning::DecoderOnly => "decoder-only",
            Conditioning::Both => "both",
        }
    }
}

/// One reparameterized draw from the encoder's latent distribution.
pub struct LatentSample {
    /// ẑ = μ + σ⊙ε, differentiable w.r.t. encoder outputs.
    pub z: Tensor,
    pub mu: Tensor,
    pub sigma: Tensor,
    pub log_sigma: Tensor,
    /// The ε draw, recorded so the same sample can be replayed.
    pub eps: Vec<f64>,
}

/// Log-σ clamp bounds applied before exponentiation.
const LOG_SIGMA_RANGE: (f64, f64) = (-20.0, 2.0);

/// VAE generator: encoder q(x[,c]) → (μ, σ), decoder G′(ẑ[,c]) → doses.
pub struct VaeGenerator {
    encoder: Mlp,
    decoder: Mlp,
    latent: usize,
    class_width: usize,
    placement: Conditioning,
    horizon: usize,
}

impl VaeGenerator {
    pub fn new(
        rng: &mut impl Rng,
        horizon: usize,
        latent: usize,
        class_width: usize,
        placement: Conditioning,
        hidden: &[usize],
    ) -> VaeGenerator {
        let data_width = 2 * horizon;
        let enc_extra = if class_width > 0 && placement.encoder_receives() {
            class_width
        } else {
            0
        };
        let dec_extra = if class_width > 0 && placement.decoder_receives() {
            class_width
        } else {
            0
        };
        let mut enc_widths = vec![data_width + enc_extra];
        enc_widths.extend_from_slice(hidden);
        enc_widths.push(2 * latent);
        let mut dec_widths = vec![latent + dec_extra];
        dec_widths.extend_from_slice(hidden);
        dec_widths.push(data_width);
        VaeGenerator {
            encoder: Mlp::new(rng, &enc_widths),
            decoder: Mlp::new(rng, &dec_widths),
            latent,
            class_width,
            placement,
            horizon,
        }
    }

    pub fn latent_width(&self) -> usize {
        self.latent
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn placement(&self) -> Conditioning {
        self.placement
    }

    fn conditioned_input(
        &self,
        tape: &mut Tape,
        base: &Tensor,
        class: Option<&Tensor>,
        receives: bool,
    ) -> Result<Tensor> {
        if self.class_width == 0 || !receives {
            return Ok(base.clone());
        }
        let c = class.ok_or(NetsError::MissingCondition {
            placement: self.placement.name(),
        })?;
        check_width("class vector", c, self.class_width)?;
        Ok(tape.concat(&[base, c])?)
    }

    /// Encode and draw ẑ = μ + σ⊙ε with the provided ε values.
    pub fn encode_with_eps(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        class: Option<&Tensor>,
        eps: &[f64],
    ) -> Result<LatentSample> {
        let batch = x.shape()[0];
        let flat = if x.shape().len() > 2 {
            tape.reshape(x, &[batch, 2 * self.horizon])?
        } else {
            x.clone()
        };
        let input =
            self.conditioned_input(tape, &flat, class, self.placement.encoder_receives())?;
        let stats = self.encoder.forward(tape, &input)?;
        let mu = tape.slice(&stats, 0, self.latent)?;
        let log_sigma_raw = tape.slice(&stats, self.latent, 2 * self.latent)?;
        let log_sigma = tape.clamp(&log_sigma_raw, LOG_SIGMA_RANGE.0, LOG_SIGMA_RANGE.1)?;
        let sigma = tape.exp(&log_sigma)?;
        assert_eq!(eps.len(), batch * self.latent, "one ε per latent element");
        let eps_t = Tensor::new(&[batch, self.latent], eps.to_vec())?;
        let scaled = tape.mul(&sigma, &eps_t)?;
        let z = tape.add(&mu, &scaled)?;
        Ok(LatentSample {
            z,
            mu,
            sigma,
            log_sigma,
            eps: eps.to_vec(),
        })
    }

    /// Encode and sample with fresh ε ~ N(0, I); the draw is recorded in the
    /// returned sample for exact replay.
    pub fn encode_sample(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        class: Option<&Tensor>,
        rng: &mut impl Rng,
    ) -> Result<LatentSample> {
        let batch = x.shape()[0];
        let eps: Vec<f64> = (0..batch * self.latent)
            .map(|_| standard_normal(rng))
            .collect();
        self.encode_with_eps(tape, x, class, &eps)
    }

    /// Decode a latent batch into a non-negative (batch, 2, T) dose tensor.
    ///
    /// Under encoder-only placement the class argument is ignored; under
    /// decoder-only or both placements it is required.
    pub fn decode(&self, tape: &mut Tape, z: &Tensor, class: Option<&Tensor>) -> Result<Tensor> {
        check_width("latent", z, self.latent)?;
        let input = self.conditioned_input(tape, z, class, self.placement.decoder_receives())?;
        let raw = self.decoder.forward(tape, &input)?;
        let doses = tape.softplus(&raw)?;
        let batch = doses.shape()[0];
        Ok(tape.reshape(&doses, &[batch, 2, self.horizon])?)
    }

    /// Decode fresh prior samples z ~ N(0, I); how new data is generated
    /// after training.
    pub fn generate_from_prior(
        &self,
        tape: &mut Tape,
        batch: usize,
        class: Option<&Tensor>,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let z_data: Vec<f64> = (0..batch * self.latent)
            .map(|_| standard_normal(rng))
            .collect();
        let z = Tensor::new(&[batch, self.latent], z_data)?;
        self.decode(tape, &z, class)
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.encoder.named_params("vae.encoder", &mut out);
        self.decoder.named_params("vae.decoder", &mut out);
        out
    }
}

/// Box–Muller standard normal draw; keeps RNG consumption at exactly two
/// uniforms per value so runs are resumable from a stream position.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let r = (-2.0 * u1.ln()).sqrt();
    r * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Set every parameter in the list to zero; degenerate-case helper.
pub fn zero_parameters(params: &[(String, Tensor)]) {
    for (_, t) in params {
        let zeros = vec![0.0; t.numel()];
        t.set_data(&zeros).expect("zeros are finite");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn batch_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(
            &[rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_parameter_generator_emits_constant_ln2() {
        let mut r = rng(1);
        let g = Generator::new(&mut r, 4, 8, 0, 10, &[16]);
        zero_parameters(&g.named_params());
        let mut tape = Tape::new();
        let cov = batch_tensor(3, 4, &mut r);
        let z = batch_tensor(3, 8, &mut r);
        let out = g.generate(&mut tape, &cov, &z, None).unwrap();
        assert_eq!(out.shape(), vec![3, 2, 10]);
        for v in out.data() {
            assert!((v - LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn generator_is_deterministic_for_identical_inputs() {
        let mut r = rng(2);
        let g = Generator::new(&mut r, 4, 8, 0, 12, &[16, 16]);
        let cov = batch_tensor(2, 4, &mut r);
        let z = batch_tensor(2, 8, &mut r);
        let mut t1 = Tape::new();
        let a = g.generate(&mut t1, &cov, &z, None).unwrap();
        let mut t2 = Tape::new();
        let b = g.generate(&mut t2, &cov, &z, None).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn generator_output_is_non_negative() {
        let mut r = rng(3);
        let g = Generator::new(&mut r, 4, 8, 0, 12, &[32]);
        let cov = batch_tensor(16, 4, &mut r);
        let z = batch_tensor(16, 8, &mut r);
        let mut tape = Tape::new();
        let out = g.generate(&mut tape, &cov, &z, None).unwrap();
        assert!(out.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn generator_varies_with_noise() {
        // Sampled over 1000 draws, every output element should move.
        let mut r = rng(4);
        let g = Generator::new(&mut r, 2, 4, 0, 5, &[16]);
        let cov = Tensor::new(&[1, 2], vec![0.3, -0.2]).unwrap();
        let n = 1000;
        let mut sums = vec![0.0; 10];
        let mut sq_sums = vec![0.0; 10];
        for _ in 0..n {
            let z = batch_tensor(1, 4, &mut r);
            let mut tape = Tape::new();
            let out = g.generate(&mut tape, &cov, &z, None).unwrap();
            for (i, v) in out.data().iter().enumerate() {
                sums[i] += v;
                sq_sums[i] += v * v;
            }
        }
        for i in 0..10 {
            let mean = sums[i] / n as f64;
            let var = sq_sums[i] / n as f64 - mean * mean;
            assert!(var > 0.0, "element {i} shows no variation");
        }
    }

    #[test]
    fn generator_rejects_covariate_width_mismatch() {
        let mut r = rng(5);
        let g = Generator::new(&mut r, 4, 8, 0, 10, &[16]);
        let cov = batch_tensor(2, 3, &mut r);
        let z = batch_tensor(2, 8, &mut r);
        let mut tape = Tape::new();
        let err = g.generate(&mut tape, &cov, &z, None).unwrap_err();
        assert!(matches!(
            err,
            NetsError::InputWidth {
                what: "covariates",
                ..
            }
        ));
    }

    #[test]
    fn zero_parameter_discriminator_scores_one_half() {
        let mut r = rng(6);
        let d = Discriminator::new(&mut r, 20, 4, 0, SourceMode::Probabilistic, &[8]);
        zero_parameters(&d.named_params());
        let mut tape = Tape::new();
        let x = batch_tensor(3, 20, &mut r);
        let cov = batch_tensor(3, 4, &mut r);
        let j = d.discriminate(&mut tape, &x, &cov).unwrap();
        for s in j.score.data() {
            assert_eq!(s, 0.5);
        }
    }

    #[test]
    fn zero_parameter_class_head_is_uniform() {
        let mut r = rng(7);
        let d = Discriminator::new(&mut r, 20, 4, 4, SourceMode::Probabilistic, &[8]);
        zero_parameters(&d.named_params());
        let mut tape = Tape::new();
        let x = batch_tensor(2, 20, &mut r);
        let cov = batch_tensor(2, 4, &mut r);
        let j = d.discriminate(&mut tape, &x, &cov).unwrap();
        for p in j.class_probs().unwrap().data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn class_probabilities_sum_to_one() {
        let mut r = rng(8);
        let d = Discriminator::new(&mut r, 12, 4, 5, SourceMode::Probabilistic, &[16, 8]);
        let mut tape = Tape::new();
        let x = batch_tensor(6, 12, &mut r);
        let cov = batch_tensor(6, 4, &mut r);
        let j = d.discriminate(&mut tape, &x, &cov).unwrap();
        let probs = j.class_probs().unwrap().data();
        for row in probs.chunks(5) {
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn source_score_stays_in_open_unit_interval() {
        let mut r = rng(9);
        let d = Discriminator::new(&mut r, 12, 4, 0, SourceMode::Probabilistic, &[16]);
        let mut tape = Tape::new();
        let x = batch_tensor(32, 12, &mut r);
        let cov = batch_tensor(32, 4, &mut r);
        let j = d.discriminate(&mut tape, &x, &cov).unwrap();
        for s in j.score.data() {
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn class_head_query_without_head_is_rejected() {
        let mut r = rng(10);
        let d = Discriminator::new(&mut r, 12, 4, 0, SourceMode::Probabilistic, &[8]);
        let mut tape = Tape::new();
        let x = batch_tensor(1, 12, &mut r);
        let cov = batch_tensor(1, 4, &mut r);
        let j = d.discriminate(&mut tape, &x, &cov).unwrap();
        assert!(matches!(j.class_probs(), Err(NetsError::NoClassHead)));
    }

    #[test]
    fn critic_score_translates_with_bias() {
        let mut r = rng(11);
        let d = Discriminator::new(&mut r, 12, 4, 0, SourceMode::Critic, &[16]);
        let x = batch_tensor(4, 12, &mut r);
        let cov = batch_tensor(4, 4, &mut r);
        let mut tape = Tape::new();
        let before = d.discriminate(&mut tape, &x, &cov).unwrap().score.data();
        d.shift_source_bias(0.37);
        let mut tape = Tape::new();
        let after = d.discriminate(&mut tape, &x, &cov).unwrap().score.data();
        for (b, a) in before.iter().zip(&after) {
            assert!((a - b - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_with_zero_eps_returns_mu() {
        let mut r = rng(12);
        let v = VaeGenerator::new(&mut r, 6, 4, 0, Conditioning::Both, &[8]);
        let x = batch_tensor(2, 12, &mut r);
        let mut tape = Tape::new();
        let s = v.encode_with_eps(&mut tape, &x, None, &[0.0; 8]).unwrap();
        assert_eq!(s.z.data(), s.mu.data());
    }

    #[test]
    fn tiny_log_sigma_collapses_sample_to_mu() {
        // The clamp floor forces σ = e^-20, so ẑ sits within 1e-8 of μ.
        let mut r = rng(13);
        let v = VaeGenerator::new(&mut r, 6, 4, 0, Conditioning::Both, &[8]);
        // Drive log σ far below the floor through the last encoder layer.
        for (name, t) in &v.named_params() {
            if name == "vae.encoder.l1.bias" {
                let mut b = t.data();
                for slot in b.iter_mut().skip(4) {
                    *slot = -60.0;
                }
                t.set_data(&b).unwrap();
            } else if name == "vae.encoder.l1.weight" {
                let mut w = t.data();
                let cols = 8;
                for row in w.chunks_mut(cols) {
                    for slot in row.iter_mut().skip(4) {
                        *slot = 0.0;
                    }
                }
                t.set_data(&w).unwrap();
            }
        }
        let x = batch_tensor(1, 12, &mut r);
        let mut tape = Tape::new();
        let mut r2 = rng(14);
        let s = v.encode_sample(&mut tape, &x, None, &mut r2).unwrap();
        for (z, m) in s.z.data().iter().zip(s.mu.data()) {
            assert!((z - m).abs() < 1e-8);
        }
        for sg in s.sigma.data() {
            assert!(sg > 0.0);
        }
    }

    #[test]
    fn sample_mean_approaches_mu() {
        // Monte-Carlo oracle: mean of ẑ over 10⁵ draws ≈ μ within 3σ/√n.
        let mut r = rng(15);
        let v = VaeGenerator::new(&mut r, 3, 2, 0, Conditioning::Both, &[6]);
        let x = batch_tensor(1, 6, &mut r);
        let n = 100_000;
        let mut draw_rng = rng(16);
        let mut sums = vec![0.0; 2];
        let mut mu = Vec::new();
        let mut sigma = Vec::new();
        for _ in 0..n {
            let mut tape = Tape::new();
            let s = v.encode_sample(&mut tape, &x, None, &mut draw_rng).unwrap();
            for (acc, z) in sums.iter_mut().zip(s.z.data()) {
                *acc += z;
            }
            if mu.is_empty() {
                mu = s.mu.data();
                sigma = s.sigma.data();
            }
        }
        for i in 0..2 {
            let mean = sums[i] / n as f64;
            let bound = 3.0 * sigma[i] / (n as f64).sqrt();
            assert!(
                (mean - mu[i]).abs() <= bound,
                "dim {i}: mean {mean} vs mu {} (bound {bound})",
                mu[i]
            );
        }
    }

    #[test]
    fn encoder_only_placement_ignores_class_at_decode() {
        let mut r = rng(17);
        let v = VaeGenerator::new(&mut r, 5, 3, 2, Conditioning::EncoderOnly, &[8]);
        let z = batch_tensor(2, 3, &mut r);
        let c1 = Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let c2 = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let a = v.decode(&mut tape, &z, Some(&c1)).unwrap();
        let b = v.decode(&mut tape, &z, Some(&c2)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn both_placement_decode_depends_on_class() {
        let mut r = rng(18);
        let v = VaeGenerator::new(&mut r, 5, 3, 2, Conditioning::Both, &[8]);
        let z = batch_tensor(1, 3, &mut r);
        let c1 = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let c2 = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let a = v.decode(&mut tape, &z, Some(&c1)).unwrap();
        let b = v.decode(&mut tape, &z, Some(&c2)).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn decoder_placement_requires_class() {
        let mut r = rng(19);
        let v = VaeGenerator::new(&mut r, 5, 3, 2, Conditioning::DecoderOnly, &[8]);
        let z = batch_tensor(1, 3, &mut r);
        let mut tape = Tape::new();
        let err = v.decode(&mut tape, &z, None).unwrap_err();
        assert!(matches!(err, NetsError::MissingCondition { .. }));
    }

    #[test]
    fn zero_parameter_decoder_is_constant() {
        let mut r = rng(20);
        let v = VaeGenerator::new(&mut r, 5, 3, 0, Conditioning::Both, &[8]);
        zero_parameters(&v.named_params());
        let mut tape = Tape::new();
        let z1 = batch_tensor(1, 3, &mut r);
        let z2 = batch_tensor(1, 3, &mut r);
        let a = v.decode(&mut tape, &z1, None).unwrap();
        let b = v.decode(&mut tape, &z2, None).unwrap();
        assert_eq!(a.data(), b.data());
        for val in a.data() {
            assert!((val - LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn reparameterization_gradients_match_finite_differences() {
        // dẑ/dμ = 1 and dẑ/dσ = ε, checked through encoder parameters.
        let mut r = rng(21);
        let v = VaeGenerator::new(&mut r, 3, 2, 0, Conditioning::Both, &[4]);
        let x = batch_tensor(1, 6, &mut r);
        let eps = [0.7, -1.3];
        let params = v.named_params();

        let analytic: Vec<Vec<f64>> = {
            let mut tape = Tape::new();
            let s = v.encode_with_eps(&mut tape, &x, None, &eps).unwrap();
            let root = tape.sum(&s.z).unwrap();
            tape.backward(&root).unwrap();
            params
                .iter()
                .map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
                .collect()
        };
        for (_, t) in &params {
            t.zero_grad();
        }

        let h = 1e-5;
        for ((_, tensor), grads) in params.iter().zip(&analytic) {
            let base = tensor.data();
            for i in 0..base.len() {
                let mut bump = base.clone();
                bump[i] = base[i] + h;
                tensor.set_data(&bump).unwrap();
                let up = {
                    let mut tape = Tape::new();
                    let s = v.encode_with_eps(&mut tape, &x, None, &eps).unwrap();
                    tape.sum(&s.z).unwrap().item()
                };
                bump[i] = base[i] - h;
                tensor.set_data(&bump).unwrap();
                let down = {
                    let mut tape = Tape::new();
                    let s = v.encode_with_eps(&mut tape, &x, None, &eps).unwrap();
                    tape.sum(&s.z).unwrap().item()
                };
                tensor.set_data(&base).unwrap();
                let fd = (up - down) / (2.0 * h);
                let denom = grads[i].abs().max(fd.abs()).max(1e-6);
                assert!(
                    (grads[i] - fd).abs() / denom <= 1e-4,
                    "param grad {} vs fd {fd}",
                    grads[i]
                );
            }
        }
    }
}
