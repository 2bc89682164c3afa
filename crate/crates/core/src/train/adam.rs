use serde::{Deserialize, Serialize};

use crate::ad::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Moment buffers for [`adam_step`]; sized lazily on the first step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AdamState<T: Real> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self {
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// One bias-corrected Adam update. Every gradient is checked before any
/// parameter is touched, so a rejected step leaves params and state intact.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    hp: &AdamParams,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Dimension {
            expected: params.len(),
            got: grads.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { param: i });
        }
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != grads.len() || state.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
        return Err(Error::Invalid("optimizer state does not match the parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::c(hp.beta1), T::c(hp.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let lr = T::c(hp.learning_rate);
    let eps = T::c(hp.epsilon);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (k, x) in p.data_mut().iter_mut().enumerate() {
            m[k] = b1 * m[k] + (T::one() - b1) * g[k];
            v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            *x -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
