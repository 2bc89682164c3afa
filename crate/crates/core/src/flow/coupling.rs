use serde::{Deserialize, Serialize};

use crate::ad::{Tensor, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;

use super::mlp::Mlp;

/// Affine coupling: coordinates with `mask[j] == true` pass through and
/// condition a scale and shift for the rest,
/// `x_b = u_b * exp(s(u_a)) + t(u_a)` with `s = c * tanh(raw / c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MaskedAffineCoupling<T: Real> {
    mask: Vec<bool>,
    clamp: f64,
    conditioner: Mlp<T>,
}

impl<T: Real> MaskedAffineCoupling<T> {
    pub fn new(mask: Vec<bool>, hidden: &[usize], clamp: f64, rng: &mut Rng) -> Result<Self> {
        if !(clamp > 0.0) {
            return Err(Error::Invalid("coupling clamp must be positive".into()));
        }
        let kept = mask.iter().filter(|m| **m).count();
        let moved = mask.len() - kept;
        Ok(Self {
            conditioner: Mlp::new(kept, hidden, 2 * moved, rng),
            mask,
            clamp,
        })
    }

    /// Mask selecting even (`parity == 0`) or odd coordinates.
    pub fn alternating_mask(dim: usize, parity: usize) -> Vec<bool> {
        (0..dim).map(|j| j % 2 == parity % 2).collect()
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn conditioner(&self) -> &Mlp<T> {
        &self.conditioner
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.conditioner.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.conditioner.params_mut()
    }

    fn split(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let kept: Vec<usize> = (0..self.dim()).filter(|&j| self.mask[j]).collect();
        let moved: Vec<usize> = (0..self.dim()).filter(|&j| !self.mask[j]).collect();
        let mut restore = vec![0; self.dim()];
        for (pos, &j) in kept.iter().chain(&moved).enumerate() {
            restore[j] = pos;
        }
        (kept, moved, restore)
    }

    fn scale_shift<'t>(&self, p: &[Var<'t, T>], kept: Var<'t, T>, k: usize) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let raw = self.conditioner.apply(p, kept)?;
        let c = T::c(self.clamp);
        let s = raw.slice(1, 0, k)?.scale(T::one() / c)?.tanh()?.scale(c)?;
        let t = raw.slice(1, k, 2 * k)?;
        Ok((s, t))
    }

    pub fn forward<'t>(&self, p: &[Var<'t, T>], u: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (kept, moved, restore) = self.split();
        let ua = u.take_cols(&kept)?;
        let ub = u.take_cols(&moved)?;
        let (s, t) = self.scale_shift(p, ua, moved.len())?;
        let xb = ub.mul(s.exp()?)?.add(t)?;
        let x = u.tape().concat(&[ua, xb], 1)?.take_cols(&restore)?;
        Ok((x, s.sum(1)?))
    }

    pub fn inverse<'t>(&self, p: &[Var<'t, T>], x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (kept, moved, restore) = self.split();
        let xa = x.take_cols(&kept)?;
        let xb = x.take_cols(&moved)?;
        let (s, t) = self.scale_shift(p, xa, moved.len())?;
        let ub = xb.sub(t)?.mul(s.neg()?.exp()?)?;
        let u = x.tape().concat(&[xa, ub], 1)?.take_cols(&restore)?;
        Ok((u, s.sum(1)?.neg()?))
    }
}
