use serde::{Deserialize, Serialize};

use crate::ad::Var;
use crate::error::{Error, Result};
use crate::real::Real;

use super::row_constant;

/// Fixed reordering of coordinates: `x[:, j] = u[:, order[j]]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &j in &order {
            if j >= order.len() || seen[j] {
                return Err(Error::Invalid(format!("{order:?} is not a permutation")));
            }
            seen[j] = true;
        }
        Ok(Self { order })
    }

    pub fn reverse(dim: usize) -> Self {
        Self {
            order: (0..dim).rev().collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.order.len()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    fn inverse_order(&self) -> Vec<usize> {
        let mut inv = vec![0; self.order.len()];
        for (j, &o) in self.order.iter().enumerate() {
            inv[o] = j;
        }
        inv
    }

    pub fn forward<'t, T: Real>(&self, u: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        Ok((u.take_cols(&self.order)?, row_constant(u)?))
    }

    pub fn inverse<'t, T: Real>(&self, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        Ok((x.take_cols(&self.inverse_order())?, row_constant(x)?))
    }
}
