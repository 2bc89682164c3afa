//! Invertible transforms, their composition, and flow models.
//!
//! A [`FlowModel`] maps base draws `u` to `x = T(u)` through its layers in
//! order. `log_prob(x)` runs the layers backwards:
//! `log f_U(T⁻¹(x)) + log|det J_{T⁻¹}(x)|`.

mod actnorm;
mod coupling;
mod mlp;
mod permutation;
mod spline;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use actnorm::ActNorm;
pub use coupling::MaskedAffineCoupling;
pub use mlp::Mlp;
pub use permutation::Permutation;
pub use spline::{
    rq_forward_on, rq_inverse_on, rq_spline_eval, rq_spline_inverse, AutoregressiveRqSpline, SplineConfig,
};

use crate::ad::{Tape, Tensor, Var};
use crate::dist::{check_batch, value_and_grad_on_tape, DiagonalGaussian, UnnormalizedLogDensity};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;

/// Rows evaluated per tape when a batch is processed without gradients.
const CHUNK: usize = 4096;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Zero vector with one entry per row of `x`.
pub(crate) fn row_constant<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let n = x.shape()[0];
    x.tape().constant(Tensor::zeros(&[n]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", tag = "kind", rename_all = "kebab-case")]
pub enum Transform<T: Real> {
    ActNorm(ActNorm<T>),
    AffineCoupling(MaskedAffineCoupling<T>),
    RqSpline(AutoregressiveRqSpline<T>),
    Permutation(Permutation),
}

impl<T: Real> Transform<T> {
    pub fn dim(&self) -> usize {
        match self {
            Transform::ActNorm(l) => l.dim(),
            Transform::AffineCoupling(l) => l.dim(),
            Transform::RqSpline(l) => l.dim(),
            Transform::Permutation(l) => l.dim(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Transform::ActNorm(l) => l.params(),
            Transform::AffineCoupling(l) => l.params(),
            Transform::RqSpline(l) => l.params(),
            Transform::Permutation(_) => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Transform::ActNorm(l) => l.params_mut(),
            Transform::AffineCoupling(l) => l.params_mut(),
            Transform::RqSpline(l) => l.params_mut(),
            Transform::Permutation(_) => Vec::new(),
        }
    }

    fn is_initialized(&self) -> bool {
        !matches!(self, Transform::ActNorm(a) if !a.is_initialized())
    }

    /// `u -> (x, log|det dx/du|)` with parameters bound in `params()` order.
    pub fn forward<'t>(&self, p: &[Var<'t, T>], u: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        match self {
            Transform::ActNorm(l) => l.forward(p, u),
            Transform::AffineCoupling(l) => l.forward(p, u),
            Transform::RqSpline(l) => l.forward(p, u),
            Transform::Permutation(l) => l.forward(u),
        }
    }

    /// `x -> (u, log|det du/dx|)`.
    pub fn inverse<'t>(&self, p: &[Var<'t, T>], x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        match self {
            Transform::ActNorm(l) => l.inverse(p, x),
            Transform::AffineCoupling(l) => l.inverse(p, x),
            Transform::RqSpline(l) => l.inverse(p, x),
            Transform::Permutation(l) => l.inverse(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    ActNorm,
    AffineCoupling,
    RqSpline,
    Permutation,
}

/// Architecture description used to build a fresh [`FlowModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub layers: Vec<LayerKind>,
    pub hidden: Vec<usize>,
    pub coupling_clamp: f64,
    pub spline: SplineConfig,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: vec![LayerKind::AffineCoupling, LayerKind::AffineCoupling, LayerKind::ActNorm],
            hidden: vec![64, 64],
            coupling_clamp: 5.0,
            spline: SplineConfig::default(),
        }
    }
}

impl FlowConfig {
    fn with_layers(layers: Vec<LayerKind>) -> Self {
        Self {
            layers,
            ..Self::default()
        }
    }

    /// Two autoregressive spline blocks, each followed by an ActNorm.
    pub fn spline_blocks() -> Self {
        use LayerKind::*;
        Self::with_layers(vec![RqSpline, ActNorm, RqSpline, ActNorm])
    }

    /// As [`FlowConfig::spline_blocks`] with a permutation between the blocks.
    pub fn spline_blocks_permuted() -> Self {
        use LayerKind::*;
        Self::with_layers(vec![RqSpline, ActNorm, Permutation, RqSpline, ActNorm])
    }

    /// `couplings` affine coupling layers followed by one ActNorm.
    pub fn affine(couplings: usize) -> Self {
        let mut layers = vec![LayerKind::AffineCoupling; couplings];
        layers.push(LayerKind::ActNorm);
        Self::with_layers(layers)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.coupling_clamp > 0.0) {
            return Err(Error::Invalid("coupling_clamp must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Invalid("hidden layer widths must be positive".into()));
        }
        self.spline.validate()
    }
}

/// Base distribution plus an ordered chain of transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct FlowModel<T: Real> {
    base: DiagonalGaussian<T>,
    layers: Vec<Transform<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct Checkpoint<T: Real> {
    format_version: u32,
    dim: usize,
    model: FlowModel<T>,
}

impl<T: Real> FlowModel<T> {
    pub fn new(base: DiagonalGaussian<T>, layers: Vec<Transform<T>>) -> Result<Self> {
        let d = base.dim();
        if let Some((i, l)) = layers.iter().enumerate().find(|(_, l)| l.dim() != d) {
            return Err(Error::Layer {
                index: i,
                source: Box::new(Error::Dimension {
                    expected: d,
                    got: l.dim(),
                }),
            });
        }
        Ok(Self { base, layers })
    }

    /// Empty chain over a standard normal base.
    pub fn identity(dim: usize) -> Self {
        Self {
            base: DiagonalGaussian::standard(dim),
            layers: Vec::new(),
        }
    }

    /// Fresh model: coupling and spline layers start as the identity,
    /// ActNorm layers are left uninitialized.
    pub fn build(dim: usize, config: &FlowConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut couplings = 0;
        for kind in &config.layers {
            layers.push(match kind {
                LayerKind::ActNorm => Transform::ActNorm(ActNorm::new(dim)),
                LayerKind::AffineCoupling => {
                    let mask = MaskedAffineCoupling::<T>::alternating_mask(dim, couplings);
                    couplings += 1;
                    Transform::AffineCoupling(MaskedAffineCoupling::new(
                        mask,
                        &config.hidden,
                        config.coupling_clamp,
                        rng,
                    )?)
                }
                LayerKind::RqSpline => {
                    Transform::RqSpline(AutoregressiveRqSpline::new(dim, &config.hidden, config.spline, rng)?)
                }
                LayerKind::Permutation => Transform::Permutation(Permutation::reverse(dim)),
            });
        }
        Self::new(DiagonalGaussian::standard(dim), layers)
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn base(&self) -> &DiagonalGaussian<T> {
        &self.base
    }

    pub fn layers(&self) -> &[Transform<T>] {
        &self.layers
    }

    pub fn is_initialized(&self) -> bool {
        self.layers.iter().all(Transform::is_initialized)
    }

    /// Sets every uninitialized ActNorm to the identity map.
    pub fn initialize_identity(&mut self) {
        for l in &mut self.layers {
            if let Transform::ActNorm(a) = l {
                if !a.is_initialized() {
                    a.set_identity();
                }
            }
        }
    }

    /// Data-dependent initialization: `x` is pushed backwards through the
    /// chain and each uninitialized ActNorm standardizes what reaches it.
    pub fn initialize_from_data(&mut self, x: &Tensor<T>) -> Result<()> {
        check_batch(x, self.dim())?;
        let mut z = x.clone();
        for i in (0..self.layers.len()).rev() {
            if let Transform::ActNorm(a) = &mut self.layers[i] {
                if !a.is_initialized() {
                    a.initialize_from(&z).map_err(|e| layer_err(i, e))?;
                }
            }
            let tape = Tape::new();
            let layer = &self.layers[i];
            let p = layer
                .params()
                .into_iter()
                .map(|t| tape.constant(t.clone()))
                .collect::<Result<Vec<_>>>()?;
            let (u, _) = layer
                .inverse(&p, tape.constant(z.clone())?)
                .map_err(|e| layer_err(i, e))?;
            z = u.to_tensor();
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(Transform::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(Transform::params_mut).collect()
    }

    /// Overwrites every parameter with `scale * N(0, 1)` draws and marks
    /// ActNorm layers initialized. Useful for exercising non-trivial maps.
    pub fn randomize_parameters(&mut self, scale: T, rng: &mut Rng) {
        self.initialize_identity();
        for p in self.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = scale * T::c(rng.normal()));
        }
    }

    pub fn n_parameters(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Registers every parameter on `tape`; with `track` they become
    /// gradient-carrying leaves.
    pub fn bind<'t, 'm>(&'m self, tape: &'t Tape<T>, track: bool) -> Result<BoundFlow<'t, 'm, T>> {
        if let Some(i) = self.layers.iter().position(|l| !l.is_initialized()) {
            return Err(Error::Uninitialized(i));
        }
        let mut params = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let vars = l
                .params()
                .into_iter()
                .map(|t| {
                    if track {
                        tape.leaf(&t.clone().with_grad())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            params.push(vars);
        }
        Ok(BoundFlow {
            tape,
            model: self,
            params,
        })
    }

    /// Builds a [`BoundFlow`] from variables already on `tape`, one per
    /// entry of [`FlowModel::params`] in order.
    pub fn bind_vars<'t, 'm>(&'m self, tape: &'t Tape<T>, vars: &[Var<'t, T>]) -> Result<BoundFlow<'t, 'm, T>> {
        if let Some(i) = self.layers.iter().position(|l| !l.is_initialized()) {
            return Err(Error::Uninitialized(i));
        }
        let counts: Vec<usize> = self.layers.iter().map(|l| l.params().len()).collect();
        let total: usize = counts.iter().sum();
        if vars.len() != total {
            return Err(Error::Dimension {
                expected: total,
                got: vars.len(),
            });
        }
        let mut params = Vec::with_capacity(counts.len());
        let mut at = 0;
        for c in counts {
            params.push(vars[at..at + c].to_vec());
            at += c;
        }
        for v in vars {
            tape.check(*v)?;
        }
        Ok(BoundFlow {
            tape,
            model: self,
            params,
        })
    }

    fn chunked<R>(
        &self,
        x: &Tensor<T>,
        mut f: impl for<'t> FnMut(&BoundFlow<'t, '_, T>, Var<'t, T>) -> Result<R>,
    ) -> Result<Vec<R>> {
        let n = check_batch(x, self.dim())?;
        let mut out = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let tape = Tape::new();
            let bound = self.bind(&tape, false)?;
            let xv = tape.constant(x.slice_rows(start, end))?;
            out.push(f(&bound, xv)?);
            start = end;
        }
        Ok(out)
    }

    /// `x = T(u)` and `log|det J_T(u)|` per row.
    pub fn forward(&self, u: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let parts = self.chunked(u, |b, v| {
            let (x, ld) = b.forward(v)?;
            Ok((x.value(), ld.value()))
        })?;
        join(parts, self.dim())
    }

    /// `u = T⁻¹(x)` and `log|det J_{T⁻¹}(x)|` per row.
    pub fn inverse(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let parts = self.chunked(x, |b, v| {
            let (u, ld) = b.inverse(v)?;
            Ok((u.value(), ld.value()))
        })?;
        join(parts, self.dim())
    }

    pub fn log_prob(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let parts = self.chunked(x, |b, v| Ok(b.log_prob(v)?.value()))?;
        Ok(parts.into_iter().flatten().collect())
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Tensor<T>> {
        let u = self.base.sample(n, rng);
        Ok(self.forward(&u)?.0)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }

    pub fn to_checkpoint_string(&self) -> Result<String> {
        let doc = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            dim: self.dim(),
            model: self.clone(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Corrupt(e.to_string()))
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Corrupt(e.to_string()))?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Corrupt("missing format_version".into()))?;
        if found != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::Version {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let doc: Checkpoint<T> = serde_json::from_value(value).map_err(|e| Error::Corrupt(e.to_string()))?;
        let model = Self::new(doc.model.base, doc.model.layers)?;
        if model.dim() != doc.dim {
            return Err(Error::Corrupt(format!(
                "declared dimension {} but model has {}",
                doc.dim,
                model.dim()
            )));
        }
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            let ok = match l {
                Transform::ActNorm(a) => a.log_scale().len() == a.shift().len(),
                Transform::AffineCoupling(c) => {
                    let kept = c.mask().iter().filter(|m| **m).count();
                    c.conditioner().input_dim() == kept && c.conditioner().output_dim() == 2 * (c.dim() - kept)
                }
                Transform::RqSpline(s) => s.params()[0].len() == s.config().n_params(),
                Transform::Permutation(p) => Permutation::new(p.order().to_vec()).is_ok(),
            };
            if !ok {
                return Err(Error::Corrupt(format!("layer {i} has inconsistent parameter shapes")));
            }
        }
        Ok(())
    }
}

/// `log|det J_T(u)|` at one point by central differences of the forward map.
pub fn numeric_log_det_jacobian<T: Real>(model: &FlowModel<T>, u: &[T], eps: T) -> Result<T> {
    let d = model.dim();
    if u.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: u.len(),
        });
    }
    let mut pts = Vec::with_capacity(2 * d * d);
    for j in 0..d {
        for sign in [T::one(), -T::one()] {
            let mut p = u.to_vec();
            p[j] += sign * eps;
            pts.extend(p);
        }
    }
    let (x, _) = model.forward(&Tensor::matrix(2 * d, d, pts)?)?;
    // jac[i][j] = dx_i / du_j
    let mut jac = vec![T::zero(); d * d];
    for j in 0..d {
        for i in 0..d {
            jac[i * d + j] = (x.row(2 * j)[i] - x.row(2 * j + 1)[i]) / (eps + eps);
        }
    }
    Ok(log_abs_det(jac, d))
}

/// LU with partial pivoting.
fn log_abs_det<T: Real>(mut a: Vec<T>, d: usize) -> T {
    let mut acc = T::zero();
    for c in 0..d {
        let p = (c..d)
            .max_by(|&i, &j| a[i * d + c].abs().partial_cmp(&a[j * d + c].abs()).expect("finite"))
            .expect("nonempty range");
        if a[p * d + c] == T::zero() {
            return T::neg_infinity();
        }
        if p != c {
            for k in 0..d {
                a.swap(p * d + k, c * d + k);
            }
        }
        let piv = a[c * d + c];
        acc += piv.abs().ln();
        for r in c + 1..d {
            let f = a[r * d + c] / piv;
            for k in c..d {
                let v = a[c * d + k];
                a[r * d + k] -= f * v;
            }
        }
    }
    acc
}

fn layer_err(index: usize, e: Error) -> Error {
    match e {
        Error::Layer { .. } => e,
        other => Error::Layer {
            index,
            source: Box::new(other),
        },
    }
}

fn join<T: Real>(parts: Vec<(Vec<T>, Vec<T>)>, dim: usize) -> Result<(Tensor<T>, Vec<T>)> {
    let mut data = Vec::new();
    let mut ld = Vec::new();
    for (x, l) in parts {
        data.extend(x);
        ld.extend(l);
    }
    let n = ld.len();
    Ok((Tensor::new(vec![n, dim], data)?, ld))
}

/// A model whose parameters live on a tape.
pub struct BoundFlow<'t, 'm, T: Real> {
    tape: &'t Tape<T>,
    model: &'m FlowModel<T>,
    params: Vec<Vec<Var<'t, T>>>,
}

impl<'t, T: Real> BoundFlow<'t, '_, T> {
    pub fn model(&self) -> &FlowModel<T> {
        self.model
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Parameter variables in [`FlowModel::params`] order.
    pub fn params(&self) -> Vec<Var<'t, T>> {
        self.params.iter().flatten().copied().collect()
    }

    pub fn forward(&self, u: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.check(u)?;
        self.tape.check(u)?;
        let mut x = u;
        let mut logdet = row_constant(u)?;
        for (i, (l, p)) in self.model.layers.iter().zip(&self.params).enumerate() {
            let (y, ld) = l.forward(p, x).map_err(|e| layer_err(i, e))?;
            x = y;
            logdet = logdet.add(ld).map_err(|e| layer_err(i, e))?;
        }
        Ok((x, logdet))
    }

    pub fn inverse(&self, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.check(x)?;
        self.tape.check(x)?;
        let mut u = x;
        let mut logdet = row_constant(x)?;
        for (i, (l, p)) in self.model.layers.iter().zip(&self.params).enumerate().rev() {
            let (v, ld) = l.inverse(p, u).map_err(|e| layer_err(i, e))?;
            u = v;
            logdet = logdet.add(ld).map_err(|e| layer_err(i, e))?;
        }
        Ok((u, logdet))
    }

    /// Row-wise model log density.
    pub fn log_prob(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (u, ld) = self.inverse(x)?;
        self.model.base.log_prob_on(u)?.add(ld)
    }

    fn check(&self, x: Var<'t, T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.model.dim() {
            return Err(Error::Dimension {
                expected: self.model.dim(),
                got: s.get(1).copied().unwrap_or(0),
            });
        }
        Ok(())
    }
}

impl<T: Real> UnnormalizedLogDensity<T> for FlowModel<T> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn log_density(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        self.log_prob(x)
    }

    fn log_density_grad(&self, x: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        check_batch(x, self.dim())?;
        value_and_grad_on_tape(x, |xv| self.bind(xv.tape(), false)?.log_prob(xv))
    }
}

#[cfg(test)]
mod tests;
