//! Gradient-based parameter updates: plain descent and adaptive-moment, plus
//! the weight clamp used by the Wasserstein critic.

use super::{Result, Tensor, TensorError};

/// Update rule selector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// w ← w − lr·g
    Descent,
    /// Adaptive-moment estimation with bias correction.
    AdaptiveMoment { beta1: f64, beta2: f64, epsilon: f64 },
}

struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer state over a fixed parameter list.
///
/// `step` must always be called with the same parameters in the same order;
/// moment buffers are keyed by position.
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    step_count: u64,
    moments: Vec<Moments>,
}

impl OptimizerState {
    pub fn descent(learning_rate: f64) -> OptimizerState {
        OptimizerState {
            kind: OptimizerKind::Descent,
            learning_rate,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn adaptive_moment(learning_rate: f64, beta1: f64, beta2: f64) -> OptimizerState {
        OptimizerState {
            kind: OptimizerKind::AdaptiveMoment {
                beta1,
                beta2,
                epsilon: 1e-8,
            },
            learning_rate,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update to every parameter, then zero its gradient.
    ///
    /// Every parameter must carry a populated gradient; the first one that
    /// does not is reported by name.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        if let OptimizerKind::AdaptiveMoment { .. } = self.kind {
            if self.moments.is_empty() {
                self.moments = params
                    .iter()
                    .map(|(_, t)| Moments {
                        first: vec![0.0; t.numel()],
                        second: vec![0.0; t.numel()],
                    })
                    .collect();
            } else if self.moments.len() != params.len() {
                return Err(TensorError::ParamCountChanged {
                    expected: self.moments.len(),
                    got: params.len(),
                });
            }
        }
        // Validate all gradients before mutating anything.
        let mut grads = Vec::with_capacity(params.len());
        for (name, tensor) in params {
            match tensor.grad() {
                Some(g) => grads.push(g),
                None => {
                    return Err(TensorError::MissingGrad { name: name.clone() });
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        for (idx, ((_, tensor), grad)) in params.iter().zip(grads).enumerate() {
            let mut data = tensor.data();
            match self.kind {
                OptimizerKind::Descent => {
                    for (w, g) in data.iter_mut().zip(&grad) {
                        *w -= self.learning_rate * g;
                    }
                }
                OptimizerKind::AdaptiveMoment {
                    beta1,
                    beta2,
                    epsilon,
                } => {
                    let m = &mut self.moments[idx];
                    let bias1 = 1.0 - beta1.powi(t);
                    let bias2 = 1.0 - beta2.powi(t);
                    for i in 0..data.len() {
                        m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * grad[i];
                        m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * grad[i] * grad[i];
                        let m_hat = m.first[i] / bias1;
                        let v_hat = m.second[i] / bias2;
                        data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
            tensor.set_data(&data)?;
            tensor.zero_grad();
        }
        Ok(())
    }

    /// Moment buffers flattened for checkpointing; empty for plain descent.
    pub fn export_moments(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.moments
            .iter()
            .map(|m| (m.first.clone(), m.second.clone()))
            .collect()
    }

    pub fn import_moments(&mut self, moments: Vec<(Vec<f64>, Vec<f64>)>, step_count: u64) {
        self.moments = moments
            .into_iter()
            .map(|(first, second)| Moments { first, second })
            .collect();
        self.step_count = step_count;
    }
}

/// Clamp every parameter element into [−c, c].
pub fn clip_weights(params: &[(String, Tensor)], c: f64) {
    assert!(c > 0.0, "clip bound must be positive");
    for (_, tensor) in params {
        let mut data = tensor.data();
        let mut changed = false;
        for v in data.iter_mut() {
            let clamped = v.clamp(-c, c);
            if clamped != *v {
                *v = clamped;
                changed = true;
            }
        }
        if changed {
            tensor
                .set_data(&data)
                .expect("clamped values stay finite");
        }
    }
}

/// Clear gradient buffers without stepping; used between the alternating
/// discriminator/generator phases.
pub fn zero_grads(params: &[(String, Tensor)]) {
    for (_, tensor) in params {
        tensor.zero_grad();
    }
}

/// L2 norm of all gradients in the set; parameters without gradients
/// contribute nothing.
pub fn grad_norm(params: &[(String, Tensor)]) -> f64 {
    let mut total = 0.0;
    for (_, tensor) in params {
        if let Some(g) = tensor.grad() {
            total += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    total.sqrt()
}
