use serde::{Deserialize, Serialize};

use crate::ad::{Tensor, Var};
use crate::error::Result;
use crate::real::Real;
use crate::rng::Rng;

/// Fully connected tanh network. Hidden layers use the usual
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization; the output layer
/// starts at zero so a fresh conditioner predicts all zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Mlp<T: Real> {
    weights: Vec<Tensor<T>>,
    biases: Vec<Tensor<T>>,
}

impl<T: Real> Mlp<T> {
    pub fn new(input: usize, hidden: &[usize], output: usize, rng: &mut Rng) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let last = dims.len() - 2;
        for (l, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            if l == last {
                weights.push(Tensor::zeros(&[fan_in, fan_out]));
                biases.push(Tensor::zeros(&[fan_out]));
                continue;
            }
            let bound = if fan_in == 0 { 0.0 } else { 1.0 / (fan_in as f64).sqrt() };
            let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::c(bound * (2.0 * rng.uniform() - 1.0))).collect() };
            let w = draw(fan_in * fan_out);
            let b = draw(fan_out);
            weights.push(Tensor::new(vec![fan_in, fan_out], w).expect("weight shape"));
            biases.push(Tensor::vector(b));
        }
        Self { weights, biases }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("at least one layer").shape()[1]
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() * 2
    }

    /// Weight then bias, layer by layer.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Applies the network to an `N x input` batch with parameters bound in
    /// the order of [`Mlp::params`].
    pub fn apply<'t>(&self, p: &[Var<'t, T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
        let layers = self.weights.len();
        let mut h = x;
        for l in 0..layers {
            h = h.matmul(p[2 * l])?.add(p[2 * l + 1])?;
            if l + 1 < layers {
                h = h.tanh()?;
            }
        }
        Ok(h)
    }
}
