//! Forward- and reverse-KL objectives and the optimizer loop.

mod adam;
mod loss;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamParams, AdamState};
pub use loss::{forward_kl_loss, reverse_kl_loss, reverse_kl_loss_mc, TARGET_FLOOR};

use crate::ad::{Tape, Tensor};
use crate::dist::UnnormalizedLogDensity;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::io;
use crate::real::Real;
use crate::rng::Rng;

/// Consecutive non-finite steps tolerated before a fit is abandoned.
pub const DIVERGENCE_STREAK: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Mini-batch size in forward mode, Monte Carlo draws in reverse mode.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub log_interval: usize,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 200,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            clip_norm: None,
            log_interval: 1,
            schedule: Schedule::Cosine,
        }
    }
}

impl TrainConfig {
    pub fn new(iterations: usize, seed: u64) -> Self {
        Self {
            iterations,
            seed,
            ..Self::default()
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.batch_size == 0 {
            p.push("batch_size must be at least 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            p.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                p.push(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) {
            p.push("epsilon must be positive".to_string());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                p.push(format!("clip_norm must be positive, got {c}"));
            }
        }
        if self.log_interval == 0 {
            p.push("log_interval must be at least 1".to_string());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(p.join("; ")))
        }
    }

    /// Learning rate at 0-based `step`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let frac = step as f64 / self.iterations.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Losses recorded every `log_interval` steps (and at the last step).
/// Steps whose loss was non-finite are recorded as NaN.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub entries: Vec<(usize, f64)>,
}

impl LossTrace {
    pub fn last(&self) -> Option<f64> {
        self.entries.last().map(|e| e.1)
    }

    pub fn first(&self) -> Option<f64> {
        self.entries.first().map(|e| e.1)
    }

    /// Mean of the recorded losses over the last `k` entries.
    pub fn tail_mean(&self, k: usize) -> Option<f64> {
        let n = self.entries.len();
        if n == 0 {
            return None;
        }
        let tail = &self.entries[n.saturating_sub(k)..];
        Some(tail.iter().map(|e| e.1).sum::<f64>() / tail.len() as f64)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        io::write_csv(
            path,
            &["step", "loss"],
            self.entries
                .iter()
                .map(|(s, l)| vec![s.to_string(), io::format_float(*l)]),
        )
    }
}

pub enum Objective<'a, T: Real> {
    /// Fit to samples by forward KL, resampling mini-batches with replacement.
    Forward(&'a Tensor<T>),
    /// Fit to an unnormalized density by reverse KL.
    Reverse(&'a dyn UnnormalizedLogDensity<T>),
}

/// Runs `config.iterations` Adam steps on `model`.
///
/// Before the first step, uninitialized ActNorm layers are initialized from
/// the data (forward mode) or to the identity (reverse mode). A zero-iteration
/// fit returns without touching the model.
pub fn fit<T: Real>(model: &mut FlowModel<T>, objective: Objective<'_, T>, config: &TrainConfig) -> Result<LossTrace> {
    config.validate()?;
    let got = match &objective {
        Objective::Forward(x) => {
            if x.shape().len() != 2 || x.rows() == 0 {
                return Err(Error::Invalid(
                    "forward fit needs a nonempty N x D sample matrix".into(),
                ));
            }
            x.cols()
        }
        Objective::Reverse(t) => t.dim(),
    };
    if got != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            got,
        });
    }
    let mut trace = LossTrace::default();
    if config.iterations == 0 {
        return Ok(trace);
    }
    match &objective {
        Objective::Forward(x) => model.initialize_from_data(x)?,
        Objective::Reverse(_) => model.initialize_identity(),
    }

    let mut rng = Rng::seed_from_u64(config.seed);
    let mut state = AdamState::new();
    let mut streak = 0;
    for step in 0..config.iterations {
        let outcome = train_step(model, &objective, config, step, &mut rng, &mut state);
        let loss = match outcome {
            Ok(l) => {
                streak = 0;
                l
            }
            Err(e) if loss::is_non_finite_step(&e) => {
                streak += 1;
                if streak >= DIVERGENCE_STREAK {
                    return Err(Error::Diverged { step, streak });
                }
                f64::NAN
            }
            Err(e) => return Err(e),
        };
        if step % config.log_interval == 0 || step + 1 == config.iterations {
            trace.entries.push((step, loss));
        }
    }
    Ok(trace)
}

fn train_step<T: Real>(
    model: &mut FlowModel<T>,
    objective: &Objective<'_, T>,
    config: &TrainConfig,
    step: usize,
    rng: &mut Rng,
    state: &mut AdamState<T>,
) -> Result<f64> {
    let (loss, mut grads) = {
        let tape = Tape::new();
        let bound = model.bind(&tape, true)?;
        let loss = match objective {
            Objective::Forward(data) => {
                let n = data.rows();
                let d = data.cols();
                let mut batch = Vec::with_capacity(config.batch_size * d);
                for _ in 0..config.batch_size {
                    batch.extend_from_slice(data.row(rng.index(n)));
                }
                forward_kl_loss(&bound, &Tensor::matrix(config.batch_size, d, batch)?)?
            }
            Objective::Reverse(target) => reverse_kl_loss_mc(&bound, *target, config.batch_size, rng)?,
        };
        let value = loss.scalar_value();
        let g = tape.backward(loss)?;
        let grads: Vec<Vec<T>> = bound
            .params()
            .iter()
            .map(|v| g.wrt(*v).map(<[T]>::to_vec).unwrap_or_default())
            .collect();
        (value, grads)
    };
    if let Some(max) = config.clip_norm {
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.to_f64_lossy() * g.to_f64_lossy())
            .sum::<f64>()
            .sqrt();
        if norm > max {
            let f = T::c(max / norm);
            grads.iter_mut().flatten().for_each(|g| *g *= f);
        }
    }
    let mut params = model.params_mut();
    for (p, g) in params.iter_mut().zip(&grads) {
        p.zero_grad();
        p.accumulate_grad(g)?;
    }
    let staged: Vec<Vec<T>> = params
        .iter()
        .map(|p| p.grad().map(<[T]>::to_vec).unwrap_or_default())
        .collect();
    let hp = AdamParams {
        learning_rate: config.learning_rate_at(step),
        beta1: config.beta1,
        beta2: config.beta2,
        epsilon: config.epsilon,
    };
    adam_step(&mut params, &staged, state, &hp)?;
    Ok(loss.to_f64_lossy())
}
