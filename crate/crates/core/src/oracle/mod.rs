//! Exact posteriors of the Gaussian hierarchical model and the diagnostics
//! used to score approximate samplers against them.

mod kde;
mod ks;
mod report;

pub use kde::Kde;
pub use ks::{ks_critical_value, ks_one_sample, ks_statistic, ks_two_sample, KsResult};
pub use report::{error_report, write_error_reports, ErrorReport};

use crate::ad::Tensor;
use crate::dist::normal_log_pdf;
use crate::error::{Error, Result};
use crate::quad::simpson;
use crate::rng::Rng;

/// `Y_i | θ_i ~ N(θ_i, σ²)`, `θ_i | γ ~ N(γ, τ²)`, flat prior on `γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHierOracle {
    y: Vec<f64>,
    sigma: f64,
    tau: f64,
}

impl GaussianHierOracle {
    pub fn new(y: Vec<f64>, sigma: f64, tau: f64) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::Invalid("need at least one observation".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("observations must be finite".into()));
        }
        if !(sigma > 0.0 && tau > 0.0 && sigma.is_finite() && tau.is_finite()) {
            return Err(Error::Invalid(format!(
                "sigma and tau must be positive, got {sigma}, {tau}"
            )));
        }
        Ok(Self { y, sigma, tau })
    }

    pub fn groups(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    fn y_bar(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.y.len() as f64
    }

    /// Mean and variance of `γ | Y`: `N(ȳ, (σ² + τ²)/J)`.
    pub fn gamma_posterior(&self) -> (f64, f64) {
        let (s2, t2) = (self.sigma * self.sigma, self.tau * self.tau);
        (self.y_bar(), (s2 + t2) / self.groups() as f64)
    }

    /// Mean vector and row-major covariance of `θ | Y`.
    pub fn theta_posterior(&self) -> (Vec<f64>, Vec<f64>) {
        let j = self.groups();
        let (s2, t2) = (self.sigma * self.sigma, self.tau * self.tau);
        let yb = self.y_bar();
        let mean = self.y.iter().map(|&yi| (s2 * yb + t2 * yi) / (s2 + t2)).collect();
        let diag = s2 * t2 / (s2 + t2);
        let off = s2 * s2 / (j as f64 * (s2 + t2));
        let cov = (0..j * j)
            .map(|k| if k / j == k % j { diag + off } else { off })
            .collect();
        (mean, cov)
    }

    /// Row-major precision of `θ | Y`: `(1/σ² + 1/τ²) I - 11ᵀ/(Jτ²)`.
    pub fn theta_precision(&self) -> Vec<f64> {
        let j = self.groups();
        let (s2, t2) = (self.sigma * self.sigma, self.tau * self.tau);
        let off = -1.0 / (j as f64 * t2);
        (0..j * j)
            .map(|k| if k / j == k % j { 1.0 / s2 + 1.0 / t2 + off } else { off })
            .collect()
    }

    /// Means and common variance of `θ_i | γ, Y`.
    pub fn theta_given_gamma(&self, gamma: f64) -> (Vec<f64>, f64) {
        let (s2, t2) = (self.sigma * self.sigma, self.tau * self.tau);
        let mean = self.y.iter().map(|&yi| (t2 * yi + s2 * gamma) / (s2 + t2)).collect();
        (mean, s2 * t2 / (s2 + t2))
    }

    /// Marginal means and standard deviations, `θ_1..θ_J` then `γ`.
    pub fn marginals(&self) -> (Vec<f64>, Vec<f64>) {
        let j = self.groups();
        let (mut mean, cov) = self.theta_posterior();
        let mut sd: Vec<f64> = (0..j).map(|i| cov[i * j + i].sqrt()).collect();
        let (gm, gv) = self.gamma_posterior();
        mean.push(gm);
        sd.push(gv.sqrt());
        (mean, sd)
    }

    /// Unnormalized log posterior of `(θ, γ)`.
    pub fn log_joint(&self, theta: &[f64], gamma: f64) -> f64 {
        self.y
            .iter()
            .zip(theta)
            .map(|(&yi, &t)| normal_log_pdf(yi, t, self.sigma) + normal_log_pdf(t, gamma, self.tau))
            .sum()
    }

    /// Exact draws of `(θ_1..θ_J, γ)`: `γ` from its marginal, then `θ | γ`.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Tensor<f64> {
        let j = self.groups();
        let (gm, gv) = self.gamma_posterior();
        let gs = gv.sqrt();
        let mut data = Vec::with_capacity(n * (j + 1));
        for _ in 0..n {
            let gamma = gm + gs * rng.normal();
            let (m, v) = self.theta_given_gamma(gamma);
            let s = v.sqrt();
            data.extend(m.iter().map(|mi| mi + s * rng.normal()));
            data.push(gamma);
        }
        Tensor::matrix(n, j + 1, data).expect("oracle sample shape")
    }

    fn box_for(&self, center: f64, sd: f64) -> (f64, f64) {
        (center - 10.0 * sd, center + 10.0 * sd)
    }

    /// `∫ N(y_i; θ, σ²) N(θ; γ, τ²) dθ` by Simpson's rule on a ±10 SD box.
    fn group_evidence(&self, i: usize, gamma: f64, nodes: usize) -> f64 {
        let (m, v) = self.theta_given_gamma(gamma);
        let (lo, hi) = self.box_for(m[i], v.sqrt());
        let yi = self.y[i];
        simpson(
            &|t| (normal_log_pdf(yi, t, self.sigma) + normal_log_pdf(t, gamma, self.tau)).exp(),
            lo,
            hi,
            nodes,
        )
    }

    fn gamma_box(&self) -> (f64, f64) {
        let (gm, gv) = self.gamma_posterior();
        self.box_for(gm, gv.sqrt())
    }

    /// Normalized density of `γ | Y` at `grid`, by integrating the joint over
    /// each `θ_i` and then normalizing over `γ`, all on quadrature grids.
    pub fn gamma_density_by_quadrature(&self, grid: &[f64], nodes: usize) -> Vec<f64> {
        let unnorm = |g: f64| {
            (0..self.groups())
                .map(|i| self.group_evidence(i, g, nodes))
                .product::<f64>()
        };
        let (lo, hi) = self.gamma_box();
        let z = simpson(&unnorm, lo, hi, nodes);
        grid.iter().map(|&g| unnorm(g) / z).collect()
    }

    /// Normalized density of `θ_i | Y` at `grid`, by quadrature over `γ` and
    /// the other groups.
    pub fn theta_density_by_quadrature(&self, i: usize, grid: &[f64], nodes: usize) -> Vec<f64> {
        let others = |g: f64| {
            (0..self.groups())
                .filter(|&k| k != i)
                .map(|k| self.group_evidence(k, g, nodes))
                .product::<f64>()
        };
        let (lo, hi) = self.gamma_box();
        let unnorm = |t: f64| {
            let own =
                |g: f64| (normal_log_pdf(self.y[i], t, self.sigma) + normal_log_pdf(t, g, self.tau)).exp() * others(g);
            simpson(&own, lo, hi, nodes)
        };
        let (mean, cov) = self.theta_posterior();
        let j = self.groups();
        let (tlo, thi) = self.box_for(mean[i], cov[i * j + i].sqrt());
        let z = simpson(&unnorm, tlo, thi, nodes);
        grid.iter().map(|&t| unnorm(t) / z).collect()
    }
}
