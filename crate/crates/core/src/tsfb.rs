//! Two-Stage Fully Bayesian baseline: a Gibbs update for `γ` followed by
//! per-group Metropolis-Hastings steps whose proposals are recycled draws
//! from an external sampler.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use crate::ad::Tensor;
use crate::dist::{normal_log_pdf, SoftwarePrior};
use crate::error::{Error, Result};
use crate::io::{format_float, write_csv};
use crate::rng::Rng;

/// Log density of the external sampler's posterior for group `i` at `θ`.
pub type SoftwareLogDensity = Arc<dyn Fn(usize, f64) -> f64 + Send + Sync>;

/// How the Metropolis-Hastings ratio is evaluated.
#[derive(Clone)]
pub enum RatioForm {
    /// `[P_H(θ'|γ)/P_S(θ')] / [P_H(θ|γ)/P_S(θ)]`: the likelihood is assumed to
    /// cancel between target and proposal.
    PriorRatio(SoftwarePrior),
    /// `[P_H(θ'|γ,y)/P_S(θ'|y)] / [P_H(θ|γ,y)/P_S(θ|y)]` with the Gaussian
    /// likelihood `N(y_i; θ, σ²)` and an explicit sampler density.
    PosteriorRatio {
        y: Vec<f64>,
        sigma: f64,
        software: SoftwareLogDensity,
    },
}

impl fmt::Debug for RatioForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RatioForm::PriorRatio(p) => f.debug_tuple("PriorRatio").field(p).finish(),
            RatioForm::PosteriorRatio { y, sigma, .. } => f
                .debug_struct("PosteriorRatio")
                .field("y", y)
                .field("sigma", sigma)
                .finish_non_exhaustive(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaUpdate {
    /// Draw from `N(θ̄, τ²/J)` every iteration.
    Gibbs,
    /// Hold `γ` at a known value.
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct TsfbConfig {
    pub iterations: usize,
    pub tau: f64,
    pub seed: u64,
    pub ratio: RatioForm,
    pub gamma: GammaUpdate,
}

impl TsfbConfig {
    pub fn new(iterations: usize, tau: f64, prior: SoftwarePrior, seed: u64) -> Self {
        Self {
            iterations,
            tau,
            seed,
            ratio: RatioForm::PriorRatio(prior),
            gamma: GammaUpdate::Gibbs,
        }
    }

    fn validate(&self, groups: usize) -> Result<()> {
        let mut p = Vec::new();
        if self.iterations == 0 {
            p.push("iterations must be at least 1".to_string());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            p.push(format!("tau must be positive, got {}", self.tau));
        }
        match &self.ratio {
            RatioForm::PriorRatio(prior) => {
                if let Err(e) = prior.validate() {
                    p.push(e.to_string());
                }
            }
            RatioForm::PosteriorRatio { y, sigma, .. } => {
                if y.len() != groups {
                    p.push(format!("{} observations for {groups} groups", y.len()));
                }
                if !(*sigma > 0.0) {
                    p.push(format!("sigma must be positive, got {sigma}"));
                }
            }
        }
        if let GammaUpdate::Fixed(g) = self.gamma {
            if !g.is_finite() {
                p.push("fixed gamma must be finite".to_string());
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(p.join("; ")))
        }
    }
}

/// Chain states `(θ_1..θ_J, γ)` per iteration plus acceptance flags.
#[derive(Debug, Clone, PartialEq)]
pub struct TsfbChain {
    states: Tensor<f64>,
    accepted: Vec<bool>,
    groups: usize,
    pub warnings: Vec<String>,
}

impl TsfbChain {
    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `T x (J+1)` matrix with columns `θ_1..θ_J, γ`.
    pub fn states(&self) -> &Tensor<f64> {
        &self.states
    }

    pub fn accepted(&self, iter: usize, group: usize) -> bool {
        self.accepted[iter * self.groups + group]
    }

    pub fn acceptance_counts(&self) -> Vec<usize> {
        (0..self.groups)
            .map(|g| (0..self.len()).filter(|&t| self.accepted(t, g)).count())
            .collect()
    }

    pub fn acceptance_rates(&self) -> Vec<f64> {
        let t = self.len() as f64;
        self.acceptance_counts().into_iter().map(|c| c as f64 / t).collect()
    }

    /// Columns `iter, theta_1..theta_J, gamma, accepted_1..accepted_J`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let j = self.groups;
        let mut header = vec!["iter".to_string()];
        header.extend((1..=j).map(|i| format!("theta_{i}")));
        header.push("gamma".into());
        header.extend((1..=j).map(|i| format!("accepted_{i}")));
        let rows = (0..self.len()).map(|t| {
            let mut row = vec![(t + 1).to_string()];
            row.extend(self.states.row(t).iter().map(|v| format_float(*v)));
            row.extend((0..j).map(|g| u8::from(self.accepted(t, g)).to_string()));
            row
        });
        write_csv(path, &header, rows)
    }
}

/// One draw from `γ | θ ~ N(θ̄, τ²/J)`.
pub fn gamma_conditional_draw(theta: &[f64], tau: f64, rng: &mut Rng) -> f64 {
    let j = theta.len() as f64;
    let mean = theta.iter().sum::<f64>() / j;
    mean + tau / j.sqrt() * rng.normal()
}

/// Runs the sampler on an `n x J` pool of external draws.
pub fn tsfb_run(pool: &Tensor<f64>, config: &TsfbConfig) -> Result<TsfbChain> {
    if pool.shape().len() != 2 || pool.cols() == 0 {
        return Err(Error::Invalid("software pool must be an n x J matrix".into()));
    }
    let (n, j) = (pool.rows(), pool.cols());
    if n < 2 {
        return Err(Error::Invalid(format!("need at least 2 software draws, got {n}")));
    }
    if !pool.all_finite() {
        return Err(Error::Invalid("software pool contains non-finite values".into()));
    }
    config.validate(j)?;

    let mut warnings = Vec::new();
    for g in 0..j {
        let c = pool.column(g);
        if c.iter().all(|v| *v == c[0]) {
            warnings.push(format!("software draws for group {} are all identical", g + 1));
        }
    }

    let tau = config.tau;
    let log_weight = |g: usize, theta: f64, gamma: f64| -> f64 {
        match &config.ratio {
            RatioForm::PriorRatio(prior) => normal_log_pdf(theta, gamma, tau) - prior.log_density(theta),
            RatioForm::PosteriorRatio { y, sigma, software } => {
                normal_log_pdf(y[g], theta, *sigma) + normal_log_pdf(theta, gamma, tau) - software(g, theta)
            }
        }
    };

    let mut rng = Rng::seed_from_u64(config.seed);
    let start = rng.index(n);
    let mut theta = pool.row(start).to_vec();
    let mut states = Vec::with_capacity(config.iterations * (j + 1));
    let mut accepted = Vec::with_capacity(config.iterations * j);
    for _ in 0..config.iterations {
        let gamma = match config.gamma {
            GammaUpdate::Gibbs => gamma_conditional_draw(&theta, tau, &mut rng),
            GammaUpdate::Fixed(v) => v,
        };
        for (g, th) in theta.iter_mut().enumerate() {
            let proposal = pool.row(rng.index(n))[g];
            let log_r = log_weight(g, proposal, gamma) - log_weight(g, *th, gamma);
            let take = log_r >= 0.0 || rng.uniform().ln() < log_r;
            if take {
                *th = proposal;
            }
            accepted.push(take);
        }
        states.extend_from_slice(&theta);
        states.push(gamma);
    }
    Ok(TsfbChain {
        states: Tensor::matrix(config.iterations, j + 1, states)?,
        accepted,
        groups: j,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{normal_cdf, sample_software_posterior_with};
    use crate::oracle::{ks_one_sample, GaussianHierOracle};

    const Y: [f64; 3] = [-5.3, -4.1, -6.2];

    fn pool(prior: SoftwarePrior, n: usize, seed: u64) -> Tensor<f64> {
        sample_software_posterior_with(&Y, prior, 1.0, n, &mut Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn gamma_draw_moments() {
        let mut rng = Rng::seed_from_u64(1);
        let n = 100_000;
        let d: Vec<f64> = (0..n)
            .map(|_| gamma_conditional_draw(&[1.0, 1.0, 1.0], 2.0, &mut rng))
            .collect();
        let m = d.iter().sum::<f64>() / n as f64;
        let v = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        assert!((m - 1.0).abs() < 0.02, "{m}");
        assert!((v - 4.0 / 3.0).abs() < 0.02, "{v}");
        let ks = ks_one_sample(&d, |x| normal_cdf(x, 1.0, (4.0f64 / 3.0).sqrt()), 0.01).unwrap();
        assert!(ks.statistic < 0.01, "{ks:?}");
    }

    #[test]
    fn gamma_draw_collapses_as_tau_vanishes() {
        let mut rng = Rng::seed_from_u64(2);
        for _ in 0..100 {
            let g = gamma_conditional_draw(&[0.5, 1.5, 4.0], 1e-12, &mut rng);
            assert!((g - 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn proposal_equal_to_target_is_always_accepted() {
        let gamma0 = -5.0;
        let o = GaussianHierOracle::new(Y.to_vec(), 1.0, 2.0).unwrap();
        let (means, var) = o.theta_given_gamma(gamma0);
        let sd = var.sqrt();
        let mut rng = Rng::seed_from_u64(3);
        let n = 2000;
        let data: Vec<f64> = (0..n)
            .flat_map(|_| means.iter().map(|m| m + sd * rng.normal()).collect::<Vec<_>>())
            .collect();
        let pool = Tensor::matrix(n, 3, data).unwrap();
        let target = move |g: usize, t: f64| normal_log_pdf(Y[g], t, 1.0) + normal_log_pdf(t, gamma0, 2.0);
        let cfg = TsfbConfig {
            iterations: 500,
            tau: 2.0,
            seed: 4,
            ratio: RatioForm::PosteriorRatio {
                y: Y.to_vec(),
                sigma: 1.0,
                software: Arc::new(target),
            },
            gamma: GammaUpdate::Fixed(gamma0),
        };
        let chain = tsfb_run(&pool, &cfg).unwrap();
        assert_eq!(chain.acceptance_rates(), vec![1.0; 3]);
    }

    #[test]
    fn chain_only_visits_pool_values() {
        let p = pool(SoftwarePrior::Gaussian { scale: 0.5 }, 3000, 5);
        let chain = tsfb_run(
            &p,
            &TsfbConfig::new(2000, 2.0, SoftwarePrior::Gaussian { scale: 0.5 }, 6),
        )
        .unwrap();
        for t in 0..chain.len() {
            for g in 0..3 {
                let v = chain.states().row(t)[g];
                assert!((0..p.rows()).any(|r| p.row(r)[g] == v));
            }
        }
        let max_pool = p.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let max_chain = (0..chain.len())
            .flat_map(|t| chain.states().row(t)[..3].to_vec())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_chain <= max_pool);
    }

    #[test]
    fn flat_prior_gamma_marginal_matches_oracle() {
        let p = pool(SoftwarePrior::Flat, 15_000, 7);
        let chain = tsfb_run(&p, &TsfbConfig::new(30_000, 2.0, SoftwarePrior::Flat, 8)).unwrap();
        let o = GaussianHierOracle::new(Y.to_vec(), 1.0, 2.0).unwrap();
        let (m, v) = o.gamma_posterior();
        let ks = ks_one_sample(&chain.states().column(3), |x| normal_cdf(x, m, v.sqrt()), 0.01).unwrap();
        assert!(ks.statistic < 0.05, "{ks:?}");
    }

    #[test]
    fn fixed_seed_chain_is_bit_identical() {
        let p = pool(SoftwarePrior::Flat, 500, 9);
        let cfg = TsfbConfig::new(300, 2.0, SoftwarePrior::Flat, 10);
        let a = tsfb_run(&p, &cfg).unwrap();
        let b = tsfb_run(&p, &cfg).unwrap();
        assert_eq!(a, b);
        let c = tsfb_run(&p, &TsfbConfig { seed: 11, ..cfg }).unwrap();
        assert_ne!(a.states(), c.states());
    }

    #[test]
    fn degenerate_pool_warns_but_runs() {
        let p = Tensor::matrix(3, 2, vec![1.0, 0.0, 1.0, 1.0, 1.0, 2.0]).unwrap();
        let chain = tsfb_run(&p, &TsfbConfig::new(10, 1.0, SoftwarePrior::Flat, 0)).unwrap();
        assert_eq!(chain.len(), 10);
        assert_eq!(chain.warnings.len(), 1);
        assert!(chain.warnings[0].contains("group 1"));
    }

    #[test]
    fn rejects_bad_inputs() {
        let one = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(tsfb_run(&one, &TsfbConfig::new(5, 1.0, SoftwarePrior::Flat, 0)).is_err());
        let p = pool(SoftwarePrior::Flat, 10, 0);
        assert!(tsfb_run(&p, &TsfbConfig::new(0, 1.0, SoftwarePrior::Flat, 0)).is_err());
        assert!(tsfb_run(&p, &TsfbConfig::new(5, -1.0, SoftwarePrior::Flat, 0)).is_err());
    }

    #[test]
    fn chain_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.csv");
        let p = pool(SoftwarePrior::Flat, 50, 12);
        let chain = tsfb_run(&p, &TsfbConfig::new(4, 2.0, SoftwarePrior::Flat, 13)).unwrap();
        chain.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iter,theta_1,theta_2,theta_3,gamma,accepted_1,accepted_2,accepted_3"
        );
        assert_eq!(lines.count(), 4);
    }
}
