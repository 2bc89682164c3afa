use serde::{Deserialize, Serialize};

use crate::ad::{Tensor, Var};
use crate::error::{Error, Result};
use crate::real::Real;

use super::row_constant;

/// Per-dimension affine map `x = u * exp(log_scale) + shift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ActNorm<T: Real> {
    log_scale: Tensor<T>,
    shift: Tensor<T>,
    initialized: bool,
}

impl<T: Real> ActNorm<T> {
    /// An uninitialized layer; call [`ActNorm::initialize_from`] or
    /// [`ActNorm::set_identity`] before use.
    pub fn new(dim: usize) -> Self {
        Self {
            log_scale: Tensor::zeros(&[dim]),
            shift: Tensor::zeros(&[dim]),
            initialized: false,
        }
    }

    pub fn with_params(log_scale: Vec<T>, shift: Vec<T>) -> Result<Self> {
        if log_scale.len() != shift.len() {
            return Err(Error::Dimension {
                expected: log_scale.len(),
                got: shift.len(),
            });
        }
        Ok(Self {
            log_scale: Tensor::vector(log_scale),
            shift: Tensor::vector(shift),
            initialized: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn log_scale(&self) -> &[T] {
        self.log_scale.data()
    }

    pub fn shift(&self) -> &[T] {
        self.shift.data()
    }

    pub fn set_identity(&mut self) {
        self.log_scale.data_mut().iter_mut().for_each(|v| *v = T::zero());
        self.shift.data_mut().iter_mut().for_each(|v| *v = T::zero());
        self.initialized = true;
    }

    /// Chooses scale and shift so that the inverse map standardizes `x`
    /// (per-column mean 0, variance 1).
    pub fn initialize_from(&mut self, x: &Tensor<T>) -> Result<()> {
        let (n, d) = (x.rows(), x.cols());
        if d != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: d,
            });
        }
        if n < 2 {
            return Err(Error::Invalid("actnorm initialization needs at least two rows".into()));
        }
        for j in 0..d {
            let col = x.column(j);
            let mean = col.iter().copied().sum::<T>() / T::c(n as f64);
            let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::c(n as f64);
            let sd = var.sqrt().max(T::c(1e-6));
            self.log_scale.data_mut()[j] = sd.ln();
            self.shift.data_mut()[j] = mean;
        }
        self.initialized = true;
        Ok(())
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.log_scale, &self.shift]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.log_scale, &mut self.shift]
    }

    pub fn forward<'t>(&self, p: &[Var<'t, T>], u: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (ls, b) = (p[0], p[1]);
        let x = u.mul(ls.exp()?)?.add(b)?;
        let ld = row_constant(u)?.add(ls.sum_all()?)?;
        Ok((x, ld))
    }

    pub fn inverse<'t>(&self, p: &[Var<'t, T>], x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (ls, b) = (p[0], p[1]);
        let u = x.sub(b)?.mul(ls.neg()?.exp()?)?;
        let ld = row_constant(x)?.sub(ls.sum_all()?)?;
        Ok((u, ld))
    }
}
