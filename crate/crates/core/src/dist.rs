//! Base distributions, analytic densities and the simulation samplers.

use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::quad::{adaptive_simpson, gamma_quarter};
use crate::real::Real;
use crate::rng::Rng;
use crate::twostage::{SampleSet, SubvectorSpec};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// A log density known up to an additive constant, evaluated row-wise on an
/// `N x D` batch. Points outside the support evaluate to `-inf`; NaN is never
/// a valid return.
pub trait UnnormalizedLogDensity<T: Real>: Send + Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, x: &Tensor<T>) -> Result<Vec<T>>;

    /// Values plus the gradient of each row's value with respect to that row.
    fn log_density_grad(&self, x: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)>;
}

pub(crate) fn check_batch<T: Real>(x: &Tensor<T>, dim: usize) -> Result<usize> {
    if x.shape().len() != 2 || x.shape()[1] != dim {
        return Err(Error::Dimension {
            expected: dim,
            got: x.shape().get(1).copied().unwrap_or(0),
        });
    }
    Ok(x.shape()[0])
}

/// Evaluates a tape-expressible row density and its input gradient.
pub(crate) fn value_and_grad_on_tape<T: Real>(
    x: &Tensor<T>,
    f: impl for<'t> Fn(Var<'t, T>) -> Result<Var<'t, T>>,
) -> Result<(Vec<T>, Tensor<T>)> {
    let tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_grad())?;
    let out = f(xv)?;
    let values = out.value();
    let grads = tape.backward(out.sum_all()?)?;
    let g = grads
        .wrt(xv)
        .map(<[T]>::to_vec)
        .unwrap_or_else(|| vec![T::zero(); x.len()]);
    Ok((values, Tensor::new(x.shape().to_vec(), g)?))
}

pub fn normal_log_pdf<T: Real>(x: T, mean: T, sd: T) -> T {
    let z = (x - mean) / sd;
    T::c(-0.5) * z * z - sd.ln() - T::c(LN_SQRT_2PI)
}

pub fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    0.5 * libm::erfc(-(x - mean) / (sd * std::f64::consts::SQRT_2))
}

/// Independent Gaussian with per-coordinate mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct DiagonalGaussian<T: Real> {
    mean: Vec<T>,
    stddev: Vec<T>,
}

impl<T: Real> DiagonalGaussian<T> {
    pub fn new(mean: Vec<T>, stddev: Vec<T>) -> Result<Self> {
        if mean.len() != stddev.len() {
            return Err(Error::Dimension {
                expected: mean.len(),
                got: stddev.len(),
            });
        }
        if stddev.iter().any(|s| !(*s > T::zero()) || !s.is_finite()) {
            return Err(Error::Invalid("stddev entries must be positive and finite".into()));
        }
        Ok(Self { mean, stddev })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![T::zero(); dim],
            stddev: vec![T::one(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn stddev(&self) -> &[T] {
        &self.stddev
    }

    /// Exact log density at a single point.
    pub fn log_prob(&self, x: &[T]) -> Result<T> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        // Same operation order as `log_prob_on`, so both agree bit for bit.
        let mut q = T::zero();
        for (j, &xi) in x.iter().enumerate() {
            let z = (xi - self.mean[j]) * (T::one() / self.stddev[j]);
            q += z * z;
        }
        Ok(q * T::c(-0.5) + -self.log_norm())
    }

    fn log_norm(&self) -> T {
        self.stddev.iter().map(|s| s.ln()).sum::<T>() + T::c(self.dim() as f64 * LN_SQRT_2PI)
    }

    /// Row-wise log density of an `N x D` variable.
    pub fn log_prob_on<'t>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        let mean = tape.constant(Tensor::vector(self.mean.clone()))?;
        let inv_sd = tape.constant(Tensor::vector(self.stddev.iter().map(|s| T::one() / *s).collect()))?;
        let norm = self.log_norm();
        x.sub(mean)?
            .mul(inv_sd)?
            .square()?
            .sum(1)?
            .scale(T::c(-0.5))?
            .add_scalar(-norm)
    }

    /// `n x D` batch of draws.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Tensor<T> {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            for j in 0..d {
                data.push(self.mean[j] + self.stddev[j] * T::c(rng.normal()));
            }
        }
        Tensor::new(vec![n, d], data).expect("sample shape")
    }
}

impl<T: Real> UnnormalizedLogDensity<T> for DiagonalGaussian<T> {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let n = check_batch(x, self.dim())?;
        (0..n).map(|i| self.log_prob(x.row(i))).collect()
    }

    fn log_density_grad(&self, x: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        let n = check_batch(x, self.dim())?;
        let d = self.dim();
        let mut g = Vec::with_capacity(n * d);
        for i in 0..n {
            for (j, &xi) in x.row(i).iter().enumerate() {
                let s = self.stddev[j];
                g.push(-(xi - self.mean[j]) / (s * s));
            }
        }
        Ok((self.log_density(x)?, Tensor::new(x.shape().to_vec(), g)?))
    }
}

/// Multivariate Gaussian given by mean and precision matrix.
#[derive(Debug, Clone)]
pub struct FullGaussian<T: Real> {
    mean: Vec<T>,
    precision: Vec<T>,
    log_norm: T,
}

impl<T: Real> FullGaussian<T> {
    /// `precision` is row-major `D x D`, symmetric positive definite.
    pub fn from_precision(mean: Vec<T>, precision: Vec<T>) -> Result<Self> {
        let d = mean.len();
        if precision.len() != d * d {
            return Err(Error::Dimension {
                expected: d * d,
                got: precision.len(),
            });
        }
        let chol =
            cholesky(&precision, d).ok_or_else(|| Error::Invalid("precision is not positive definite".into()))?;
        let half_logdet: T = (0..d).map(|i| chol[i * d + i].ln()).sum();
        Ok(Self {
            mean,
            precision,
            log_norm: half_logdet - T::c(d as f64 * LN_SQRT_2PI),
        })
    }

    pub fn from_covariance(mean: Vec<T>, cov: Vec<T>) -> Result<Self> {
        let d = mean.len();
        let prec = invert_spd(&cov, d).ok_or_else(|| Error::Invalid("covariance is not positive definite".into()))?;
        Self::from_precision(mean, prec)
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    fn row_value_grad(&self, x: &[T], grad: &mut [T]) -> T {
        let d = self.mean.len();
        let diff: Vec<T> = x.iter().zip(&self.mean).map(|(&a, &b)| a - b).collect();
        let mut quad = T::zero();
        for i in 0..d {
            let mut pd = T::zero();
            for j in 0..d {
                pd += self.precision[i * d + j] * diff[j];
            }
            grad[i] = -pd;
            quad += diff[i] * pd;
        }
        T::c(-0.5) * quad + self.log_norm
    }
}

impl<T: Real> UnnormalizedLogDensity<T> for FullGaussian<T> {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.log_density_grad(x)?.0)
    }

    fn log_density_grad(&self, x: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        let d = self.mean.len();
        let n = check_batch(x, d)?;
        let mut g = vec![T::zero(); n * d];
        let values = (0..n)
            .map(|i| self.row_value_grad(x.row(i), &mut g[i * d..(i + 1) * d]))
            .collect();
        Ok((values, Tensor::new(vec![n, d], g)?))
    }
}

/// Lower Cholesky factor of a row-major SPD matrix.
pub(crate) fn cholesky<T: Real>(a: &[T], d: usize) -> Option<Vec<T>> {
    let mut l = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= T::zero() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

pub(crate) fn invert_spd<T: Real>(a: &[T], d: usize) -> Option<Vec<T>> {
    let l = cholesky(a, d)?;
    let mut inv = vec![T::zero(); d * d];
    for col in 0..d {
        // Solve L y = e_col, then L^T x = y.
        let mut y = vec![T::zero(); d];
        for i in 0..d {
            let mut s = if i == col { T::one() } else { T::zero() };
            for k in 0..i {
                s -= l[i * d + k] * y[k];
            }
            y[i] = s / l[i * d + i];
        }
        for i in (0..d).rev() {
            let mut s = y[i];
            for k in i + 1..d {
                s -= l[k * d + i] * inv[k * d + col];
            }
            inv[i * d + col] = s / l[i * d + i];
        }
    }
    Some(inv)
}

/// Improper uniform density; evaluates to zero everywhere and is never sampled.
#[derive(Debug, Clone, Copy)]
pub struct Flat {
    pub dim: usize,
}

impl<T: Real> UnnormalizedLogDensity<T> for Flat {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let n = check_batch(x, self.dim)?;
        Ok(vec![T::zero(); n])
    }

    fn log_density_grad(&self, x: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        let n = check_batch(x, self.dim)?;
        Ok((vec![T::zero(); n], Tensor::zeros(&[n, self.dim])))
    }
}

/// The density `2 / Γ(1/4) · exp(-x⁴)` on the real line.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuarticMarginal;

impl QuarticMarginal {
    pub fn log_normalizer() -> f64 {
        std::f64::consts::LN_2 - gamma_quarter().ln()
    }

    pub fn log_prob<T: Real>(x: T) -> T {
        T::c(Self::log_normalizer()) - x.powi(4)
    }

    /// CDF by quadrature of the density from zero, using symmetry.
    pub fn cdf(x: f64) -> f64 {
        let c = Self::log_normalizer().exp();
        let half = adaptive_simpson(&|t: f64| c * (-t.powi(4)).exp(), 0.0, x.abs().min(7.0), 1e-13);
        if x >= 0.0 {
            0.5 + half
        } else {
            0.5 - half
        }
    }

    /// `E[X²] = Γ(3/4) / Γ(1/4)`.
    pub fn second_moment() -> f64 {
        crate::quad::gamma_three_quarters() / gamma_quarter()
    }

    /// Probability that one proposal is accepted by [`QuarticMarginal::sample`].
    pub fn acceptance_rate() -> f64 {
        (0.5 * gamma_quarter()) / (0.25f64.exp() * std::f64::consts::PI.sqrt())
    }

    /// Exact rejection sampler with proposal N(0, 1/2): since
    /// `x⁴ - x² + 1/4 = (x² - 1/2)² ≥ 0`, the acceptance probability
    /// `exp(-(x² - 1/2)²)` never exceeds one.
    pub fn sample<T: Real>(n: usize, rng: &mut Rng) -> Vec<T> {
        Self::sample_counting(n, rng).0
    }

    /// Like [`QuarticMarginal::sample`], also returning the number of proposals drawn.
    pub fn sample_counting<T: Real>(n: usize, rng: &mut Rng) -> (Vec<T>, usize) {
        let mut out = Vec::with_capacity(n);
        let mut proposals = 0;
        let sd = std::f64::consts::FRAC_1_SQRT_2;
        while out.len() < n {
            proposals += 1;
            let x = sd * rng.normal();
            let t = x * x - 0.5;
            if rng.uniform() < (-t * t).exp() {
                out.push(T::c(x));
            }
        }
        (out, proposals)
    }
}

/// `log h(x) = -log f(x)` for the quartic marginal; used to divide out a
/// coordinate that appears in two fitted components.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuarticReciprocal;

impl<T: Real> UnnormalizedLogDensity<T> for QuarticReciprocal {
    fn dim(&self) -> usize {
        1
    }

    fn log_density(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let n = check_batch(x, 1)?;
        Ok((0..n).map(|i| -QuarticMarginal::log_prob(x.row(i)[0])).collect())
    }

    fn log_density_grad(&self, x: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        let n = check_batch(x, 1)?;
        let g = (0..n).map(|i| T::c(4.0) * x.row(i)[0].powi(3)).collect();
        Ok((self.log_density(x)?, Tensor::new(vec![n, 1], g)?))
    }
}

/// [`QuarticReciprocal`] held constant outside `[lo, hi]`, so that the
/// reciprocal cannot grow beyond the range where the fitted components saw data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClampedQuarticReciprocal {
    pub lo: f64,
    pub hi: f64,
}

impl ClampedQuarticReciprocal {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::Invalid(format!("invalid clamp range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }
}

impl<T: Real> UnnormalizedLogDensity<T> for ClampedQuarticReciprocal {
    fn dim(&self) -> usize {
        1
    }

    fn log_density(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let n = check_batch(x, 1)?;
        let (lo, hi) = (T::c(self.lo), T::c(self.hi));
        Ok((0..n)
            .map(|i| -QuarticMarginal::log_prob(x.row(i)[0].max(lo).min(hi)))
            .collect())
    }

    fn log_density_grad(&self, x: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        let n = check_batch(x, 1)?;
        let (lo, hi) = (T::c(self.lo), T::c(self.hi));
        let g = (0..n)
            .map(|i| {
                let v = x.row(i)[0];
                if v < lo || v > hi {
                    T::zero()
                } else {
                    T::c(4.0) * v.powi(3)
                }
            })
            .collect();
        Ok((self.log_density(x)?, Tensor::new(vec![n, 1], g)?))
    }
}

type BoxedFn<T> = Box<dyn Fn(&[T]) -> T + Send + Sync>;

/// Plug-in density from a closure; gradients by central differences.
pub struct FnDensity<T: Real> {
    dim: usize,
    f: BoxedFn<T>,
    step: T,
}

impl<T: Real> FnDensity<T> {
    pub fn new(dim: usize, f: impl Fn(&[T]) -> T + Send + Sync + 'static) -> Self {
        Self {
            dim,
            f: Box::new(f),
            step: T::c(1e-6),
        }
    }
}

impl<T: Real> UnnormalizedLogDensity<T> for FnDensity<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let n = check_batch(x, self.dim)?;
        Ok((0..n).map(|i| (self.f)(x.row(i))).collect())
    }

    fn log_density_grad(&self, x: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        let n = check_batch(x, self.dim)?;
        let mut g = Vec::with_capacity(n * self.dim);
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let mut p = x.row(i).to_vec();
            values.push((self.f)(&p));
            for j in 0..self.dim {
                let orig = p[j];
                p[j] = orig + self.step;
                let up = (self.f)(&p);
                p[j] = orig - self.step;
                let down = (self.f)(&p);
                p[j] = orig;
                g.push((up - down) / (self.step + self.step));
            }
        }
        Ok((values, Tensor::new(vec![n, self.dim], g)?))
    }
}

/// Prior baked into an external sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SoftwarePrior {
    Flat,
    Gaussian { scale: f64 },
}

impl SoftwarePrior {
    pub fn validate(&self) -> Result<()> {
        match self {
            SoftwarePrior::Gaussian { scale } if !(*scale > 0.0) => Err(Error::Invalid(format!(
                "software prior scale must be positive, got {scale}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn log_density<T: Real>(&self, theta: T) -> T {
        match *self {
            SoftwarePrior::Flat => T::zero(),
            SoftwarePrior::Gaussian { scale } => normal_log_pdf(theta, T::zero(), T::c(scale)),
        }
    }

    pub fn log_density_derivative<T: Real>(&self, theta: T) -> T {
        match *self {
            SoftwarePrior::Flat => T::zero(),
            SoftwarePrior::Gaussian { scale } => -theta / T::c(scale * scale),
        }
    }

    /// Mean and variance of `P_S(θ | y) ∝ N(y; θ, σ²) P_S(θ)`.
    pub fn software_posterior(&self, y: f64, sigma: f64) -> (f64, f64) {
        match *self {
            SoftwarePrior::Flat => (y, sigma * sigma),
            SoftwarePrior::Gaussian { scale } => {
                let (a2, s2) = (scale * scale, sigma * sigma);
                (a2 * y / (a2 + s2), a2 * s2 / (a2 + s2))
            }
        }
    }
}

/// Draws `n x J` samples with column `i` from `N(A²yᵢ/(A²+σ²), A²σ²/(A²+σ²))`.
pub fn sample_software_posterior<T: Real>(y: &[T], a: T, sigma: T, n: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    if !(a > T::zero()) {
        return Err(Error::Invalid("software prior scale A must be positive".into()));
    }
    sample_software_posterior_with(
        y,
        SoftwarePrior::Gaussian {
            scale: a.to_f64_lossy(),
        },
        sigma,
        n,
        rng,
    )
}

/// As [`sample_software_posterior`], for any [`SoftwarePrior`].
pub fn sample_software_posterior_with<T: Real>(
    y: &[T],
    prior: SoftwarePrior,
    sigma: T,
    n: usize,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    prior.validate()?;
    if !(sigma > T::zero()) {
        return Err(Error::Invalid("sigma must be positive".into()));
    }
    let params: Vec<(f64, f64)> = y
        .iter()
        .map(|yi| {
            let (m, v) = prior.software_posterior(yi.to_f64_lossy(), sigma.to_f64_lossy());
            (m, v.sqrt())
        })
        .collect();
    let mut data = Vec::with_capacity(n * y.len());
    for _ in 0..n {
        for &(m, s) in &params {
            data.push(T::c(m + s * rng.normal()));
        }
    }
    Tensor::new(vec![n, y.len()], data)
}

/// Two independent studies: `(X, Y)` with `Y | X ~ N(sin(2X)³, σ²)` and
/// `(X, Z)` with `Z | X ~ N(ω sin(πX), τ²)`, `X` from the quartic marginal.
pub fn simulate_joint_subvectors<T: Real>(
    n1: usize,
    n2: usize,
    sigma: T,
    tau: T,
    omega: T,
    rng: &mut Rng,
) -> Result<(SampleSet<T>, SampleSet<T>)> {
    if !(sigma > T::zero() && tau > T::zero() && omega > T::zero()) {
        return Err(Error::Invalid("scale parameters must be positive".into()));
    }
    let xs: Vec<T> = QuarticMarginal::sample(n1, rng);
    let mut xy = Vec::with_capacity(2 * n1);
    for x in xs {
        let m = (T::c(2.0) * x).sin().powi(3);
        xy.extend([x, m + sigma * T::c(rng.normal())]);
    }
    let xs: Vec<T> = QuarticMarginal::sample(n2, rng);
    let mut xz = Vec::with_capacity(2 * n2);
    for x in xs {
        let m = omega * (T::PI() * x).sin();
        xz.extend([x, m + tau * T::c(rng.normal())]);
    }
    Ok((
        SampleSet::new(SubvectorSpec::new("xy", vec![0, 1]), Tensor::matrix(n1, 2, xy)?)?,
        SampleSet::new(SubvectorSpec::new("xz", vec![0, 2]), Tensor::matrix(n2, 2, xz)?)?,
    ))
}
