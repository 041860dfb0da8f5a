//! Deterministic Adam training and a finite-difference check of the backward pass.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 16,
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and non-negative"));
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if beta.is_nan() || beta <= 0.0 || beta >= 1.0 {
                return Err(Error::config(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::config("adam_eps must be positive"));
        }
        if let Some(clip) = self.grad_clip {
            if clip.is_nan() || clip <= 0.0 {
                return Err(Error::config("grad_clip must be positive when set"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub steps: Vec<StepLoss>,
    /// Token-weighted mean training loss per epoch.
    pub epoch_means: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: LossHistory,
}

struct Adam {
    m: ModelParams,
    v: ModelParams,
    step: i32,
}

impl Adam {
    fn new(params: &ModelParams) -> Result<Self> {
        Ok(Self {
            m: ModelParams::zeros(&params.config)?,
            v: ModelParams::zeros(&params.config)?,
            step: 0,
        })
    }

    fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let tensors = params
            .named_tensors_mut()
            .into_iter()
            .zip(grads.named_tensors())
            .zip(self.m.named_tensors_mut())
            .zip(self.v.named_tensors_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
            let (p, g, m, v) = (p.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Trains on `stream` (one entry per occurrence, duplicates included) with
/// a fresh seeded shuffle each epoch. Single-threaded and bit-reproducible.
pub fn train(params: ModelParams, stream: &[&[u32]], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(Error::degenerate("empty training stream"));
    }
    if let Some(long) = stream.iter().find(|s| s.len() > params.config.max_seq_len) {
        return Err(Error::Length {
            len: long.len(),
            max: params.config.max_seq_len,
        });
    }

    let mut params = params;
    let mut adam = Adam::new(&params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..stream.len()).collect();
    let mut history = LossHistory::default();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[u32]> = chunk.iter().map(|&i| stream[i]).collect();
            let (loss, mut grads) = params.loss_and_grad(&batch)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { step, loss });
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.l2_norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            adam.update(&mut params, &grads, cfg);
            if !params.is_finite() {
                return Err(Error::TrainingDiverged { step, loss: f64::NAN });
            }
            let tokens: usize = batch.iter().map(|s| s.len() - 1).sum();
            epoch_loss += loss * tokens as f64;
            epoch_tokens += tokens;
            history.steps.push(StepLoss { step, epoch, loss });
            step += 1;
        }
        let mean = epoch_loss / epoch_tokens as f64;
        log::info!("epoch {}/{}: mean loss {mean:.4}", epoch + 1, cfg.epochs);
        history.epoch_means.push(mean);
    }
    Ok(TrainOutcome { params, history })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub coordinates: usize,
    /// Tensor name and flat offset of the worst coordinate.
    pub worst: (String, usize),
}

/// `|a - n| / (|a| + |n| + 1e-12)`, defined as 0 when both sides vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if analytic == 0.0 && numeric == 0.0 {
        return 0.0;
    }
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

const MIN_CHECKED_COORDINATES: usize = 200;

/// Compares backprop gradients against central differences of
/// `sequence_nll` on a seeded sample of at least 200 coordinates, drawn from
/// every tensor in the model.
pub fn gradient_check(params: &ModelParams, seq: &[u32], epsilon: f64) -> Result<GradientCheck> {
    gradient_check_with(params, seq, epsilon, |p, s| Ok(p.loss_and_grad(&[s])?.1))
}

/// Same as [`gradient_check`] with a caller-supplied analytic gradient.
pub fn gradient_check_with<F>(
    params: &ModelParams,
    seq: &[u32],
    epsilon: f64,
    analytic: F,
) -> Result<GradientCheck>
where
    F: Fn(&ModelParams, &[u32]) -> Result<ModelParams>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::config(format!("epsilon {epsilon} outside [1e-6, 1e-3]")));
    }
    let grads = analytic(params, seq)?;
    let grad_tensors = grads.named_tensors();
    let n_tensors = grad_tensors.len();
    let per_tensor = MIN_CHECKED_COORDINATES.div_ceil(n_tensors);
    let mut rng = ChaCha8Rng::seed_from_u64(params.config.seed ^ 0x6772_6164);

    let mut probe = params.clone();
    let mut worst = (String::new(), 0, 0.0f64);
    let mut coordinates = 0;
    for (ti, (name, g)) in grad_tensors.iter().enumerate() {
        let picks = index::sample(&mut rng, g.len(), per_tensor.min(g.len())).into_vec();
        for off in picks {
            let original = probe.named_tensors()[ti].1.as_slice()[off];
            set_coordinate(&mut probe, ti, off, original + epsilon);
            let plus = probe.sequence_nll(seq)?;
            set_coordinate(&mut probe, ti, off, original - epsilon);
            let minus = probe.sequence_nll(seq)?;
            set_coordinate(&mut probe, ti, off, original);
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(g.as_slice()[off], numeric);
            coordinates += 1;
            if err > worst.2 || coordinates == 1 {
                worst = (name.clone(), off, err);
            }
        }
    }
    Ok(GradientCheck {
        max_relative_error: worst.2,
        coordinates,
        worst: (worst.0, worst.1),
    })
}

fn set_coordinate(params: &mut ModelParams, tensor: usize, offset: usize, value: f64) {
    params.named_tensors_mut()[tensor].1.as_mut_slice()[offset] = value;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 13,
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_seq_len: 12,
            seed: 21,
        }
    }

    #[test]
    fn relative_error_guards_double_zero() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, -1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_central_differences() {
        let params = ModelParams::init_with_std(&small_config(), 0.3).unwrap();
        let seq = [3u32, 7, 1, 12, 0, 5, 5, 9, 2];
        let check = gradient_check(&params, &seq, 1e-4).unwrap();
        assert!(check.coordinates >= 200);
        assert!(check.max_relative_error < 1e-4, "{check:?}");
    }

    #[test]
    fn sign_flipped_backward_is_caught() {
        let params = ModelParams::init_with_std(&small_config(), 0.3).unwrap();
        let seq = [3u32, 7, 1, 12, 0, 5];
        let check = gradient_check_with(&params, &seq, 1e-4, |p, s| {
            let mut g = p.loss_and_grad(&[s])?.1;
            g.scale(-1.0);
            Ok(g)
        })
        .unwrap();
        assert!(check.max_relative_error > 0.99, "{check:?}");
    }

    #[test]
    fn epsilon_outside_range_is_rejected() {
        let params = ModelParams::init(&small_config()).unwrap();
        assert!(gradient_check(&params, &[1, 2, 3], 1e-2).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_params_untouched() {
        let params = ModelParams::init(&small_config()).unwrap();
        let seqs = [vec![1u32, 2, 3, 4], vec![5, 6, 7, 8]];
        let stream: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 1,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let out = train(params.clone(), &stream, &cfg).unwrap();
        assert_eq!(out.params, params);
        assert_eq!(out.history.steps.len(), 6);
    }

    #[test]
    fn overfits_a_single_two_token_sequence() {
        let params = ModelParams::init(&small_config()).unwrap();
        let seq = [4u32, 9];
        let stream = vec![&seq[..]; 8];
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 8,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let out = train(params, &stream, &cfg).unwrap();
        let nll = out.params.sequence_nll(&seq).unwrap();
        assert!(nll < 0.01, "nll = {nll}");
    }

    #[test]
    fn identical_seeds_train_identically() {
        let seqs: Vec<Vec<u32>> = (0..6).map(|i| (0..8).map(|j| (i * 5 + j * 3) % 13).collect()).collect();
        let stream: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = train(ModelParams::init(&small_config()).unwrap(), &stream, &cfg).unwrap();
        let b = train(ModelParams::init(&small_config()).unwrap(), &stream, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn invalid_betas_are_rejected() {
        let cfg = TrainConfig {
            adam_beta1: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
