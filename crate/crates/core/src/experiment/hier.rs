use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{derive_seed, grid, kde_column, Bundle, ManifestEntry, Metrics};
use crate::dist::{normal_cdf, sample_software_posterior_with, SoftwarePrior};
use crate::error::Result;
use crate::flow::FlowConfig;
use crate::io::{format_float, write_csv, write_matrix};
use crate::oracle::{error_report, ks_one_sample, write_error_reports, ErrorReport, GaussianHierOracle, KsResult};
use crate::rng::Rng;
use crate::train::TrainConfig;
use crate::tsfb::{tsfb_run, TsfbConfig};
use crate::twostage::{fit_stage1, fit_stage2, hierarchical_composition, SampleSet, StageConfig, SubvectorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HierVariant {
    /// Three groups, software prior `N(0, A²)`.
    J3Gaussian,
    /// Six groups, flat software prior.
    J6Flat,
}

impl HierVariant {
    pub fn groups(self) -> usize {
        match self {
            HierVariant::J3Gaussian => 3,
            HierVariant::J6Flat => 6,
        }
    }
}

/// Hierarchical normal model with an external per-group sampler.
/// Stage seeds inside `stage1`/`stage2` are replaced by seeds derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierConfig {
    pub seed: u64,
    pub variant: HierVariant,
    pub gamma: f64,
    pub sigma: f64,
    pub tau: f64,
    /// `A` for the Gaussian-prior variant.
    pub prior_scale: f64,
    pub software_draws: usize,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub tsfb_iterations: usize,
    pub report_samples: usize,
    pub ks_alpha: f64,
    pub grid_points: usize,
}

impl Default for HierConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: HierVariant::J3Gaussian,
            gamma: -5.0,
            sigma: 1.0,
            tau: 2.0,
            prior_scale: 0.5,
            software_draws: 15_000,
            stage1: StageConfig::new(
                FlowConfig::affine(2),
                TrainConfig {
                    learning_rate: 1e-3,
                    ..TrainConfig::new(2000, 0)
                },
            ),
            stage2: StageConfig::new(
                FlowConfig::affine(3),
                TrainConfig {
                    learning_rate: 5e-3,
                    ..TrainConfig::new(5000, 0)
                },
            ),
            tsfb_iterations: 30_000,
            report_samples: 100_000,
            ks_alpha: 0.01,
            grid_points: 201,
        }
    }
}

impl HierConfig {
    pub fn prior(&self) -> SoftwarePrior {
        match self.variant {
            HierVariant::J3Gaussian => SoftwarePrior::Gaussian {
                scale: self.prior_scale,
            },
            HierVariant::J6Flat => SoftwarePrior::Flat,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HierOutcome {
    pub metrics: Metrics,
    pub y: Vec<f64>,
    pub tsnf: ErrorReport,
    pub tsfb: ErrorReport,
    pub oracle: ErrorReport,
    pub stage1_ks: Vec<KsResult>,
    pub tsfb_acceptance: Vec<f64>,
    pub manifest: Vec<ManifestEntry>,
}

fn theta_header(j: usize, gamma: bool) -> Vec<String> {
    let mut h: Vec<String> = (1..=j).map(|i| format!("theta_{i}")).collect();
    if gamma {
        h.push("gamma".into());
    }
    h
}

pub fn run_hier(cfg: &HierConfig, out: &Path) -> Result<HierOutcome> {
    let j = cfg.variant.groups();
    let prior = cfg.prior();
    let mut bundle = Bundle::create(out)?;

    let mut rng = Rng::seed_from_u64(derive_seed(cfg.seed, "data"));
    let theta: Vec<f64> = (0..j).map(|_| cfg.gamma + cfg.tau * rng.normal()).collect();
    let y: Vec<f64> = theta.iter().map(|t| t + cfg.sigma * rng.normal()).collect();
    write_csv(
        &bundle.file("data.csv"),
        &["group", "theta_true", "y"],
        (0..j).map(|i| vec![(i + 1).to_string(), format_float(theta[i]), format_float(y[i])]),
    )?;
    let pool = sample_software_posterior_with(&y, prior, cfg.sigma, cfg.software_draws, &mut rng)?;
    write_matrix(&bundle.file("software_draws.csv"), &theta_header(j, false), &pool)?;

    let mut s1 = cfg.stage1.clone();
    s1.train.seed = derive_seed(cfg.seed, "stage1");
    let set = SampleSet::new(SubvectorSpec::new("theta", (0..j).collect()), pool.clone())?;
    let fit = fit_stage1(&[set], &[s1])?.remove(0);
    fit.model.save_checkpoint(&bundle.file("stage1.json"))?;
    fit.trace.write_csv(&bundle.file("loss_stage1.csv"))?;

    let mut metrics = Metrics::new();
    let check = fit.model.sample(
        cfg.software_draws,
        &mut Rng::seed_from_u64(derive_seed(cfg.seed, "stage1-check")),
    )?;
    let mut stage1_ks = Vec::with_capacity(j);
    for (i, &yi) in y.iter().enumerate() {
        let (m, v) = prior.software_posterior(yi, cfg.sigma);
        let ks = ks_one_sample(&check.column(i), |x| normal_cdf(x, m, v.sqrt()), cfg.ks_alpha)?;
        metrics.push(format!("stage1_ks_theta_{}_statistic", i + 1), ks.statistic);
        metrics.push(
            format!("stage1_ks_theta_{}_reject", i + 1),
            f64::from(u8::from(ks.reject)),
        );
        stage1_ks.push(ks);
    }
    if let Some(ks) = stage1_ks.first() {
        metrics.push("stage1_ks_critical", ks.critical);
    }

    let target = hierarchical_composition(fit.model, cfg.tau, prior)?;
    let mut s2 = cfg.stage2.clone();
    s2.train.seed = derive_seed(cfg.seed, "stage2");
    let (model, trace) = fit_stage2(&target, &s2)?;
    model.save_checkpoint(&bundle.file("stage2.json"))?;
    trace.write_csv(&bundle.file("loss_stage2.csv"))?;
    let tsnf_samples = model.sample(
        cfg.report_samples,
        &mut Rng::seed_from_u64(derive_seed(cfg.seed, "stage2-samples")),
    )?;
    write_matrix(&bundle.file("samples_tsnf.csv"), &theta_header(j, true), &tsnf_samples)?;

    let chain = tsfb_run(
        &pool,
        &TsfbConfig::new(cfg.tsfb_iterations, cfg.tau, prior, derive_seed(cfg.seed, "tsfb")),
    )?;
    chain.write_csv(&bundle.file("chain_tsfb.csv"))?;

    let oracle = GaussianHierOracle::new(y.clone(), cfg.sigma, cfg.tau)?;
    let exact_samples = oracle.sample(
        cfg.report_samples,
        &mut Rng::seed_from_u64(derive_seed(cfg.seed, "oracle-samples")),
    );
    let tsnf = error_report(&tsnf_samples, &oracle)?;
    let tsfb = error_report(chain.states(), &oracle)?;
    let exact = error_report(&exact_samples, &oracle)?;
    write_error_reports(
        &bundle.file("errors.csv"),
        &[("tsnf", &tsnf), ("tsfb", &tsfb), ("oracle", &exact)],
    )?;

    let (means, sds) = oracle.marginals();
    let names = theta_header(j, true);
    write_csv(
        &bundle.file("exact_posterior.csv"),
        &["parameter", "mean", "sd"],
        (0..=j).map(|k| vec![names[k].clone(), format_float(means[k]), format_float(sds[k])]),
    )?;
    let mut rows = Vec::new();
    for k in 0..=j {
        let g = grid(means[k] - 5.0 * sds[k], means[k] + 5.0 * sds[k], cfg.grid_points);
        let a = kde_column(tsnf_samples.column(k), &g)?;
        let b = kde_column(chain.states().column(k), &g)?;
        for (i, p) in g.iter().enumerate() {
            let z = (p - means[k]) / sds[k];
            let exact = (-0.5 * z * z).exp() / (sds[k] * (2.0 * std::f64::consts::PI).sqrt());
            rows.push(vec![
                names[k].clone(),
                format_float(*p),
                a[i].clone(),
                b[i].clone(),
                format_float(exact),
            ]);
        }
    }
    write_csv(
        &bundle.file("kde_marginals.csv"),
        &["parameter", "point", "tsnf", "tsfb", "exact"],
        rows,
    )?;

    for (name, r) in [("tsnf", &tsnf), ("tsfb", &tsfb), ("oracle", &exact)] {
        metrics.push(format!("{name}_max_abs_mean_error"), r.max_abs_mean_error());
        metrics.push(format!("{name}_max_abs_sd_error"), r.max_abs_sd_error());
        metrics.push(format!("{name}_cov_frobenius"), r.frobenius);
    }
    let tsfb_acceptance = chain.acceptance_rates();
    for (i, a) in tsfb_acceptance.iter().enumerate() {
        metrics.push(format!("tsfb_acceptance_{}", i + 1), *a);
    }
    metrics.push("stage1_final_loss", fit.trace.tail_mean(100).unwrap_or(f64::NAN));
    metrics.push("stage2_final_loss", trace.tail_mean(100).unwrap_or(f64::NAN));
    metrics.write_csv(&bundle.file("metrics.csv"))?;
    for w in &chain.warnings {
        eprintln!("warning: {w}");
    }
    let manifest = bundle.finish()?;
    Ok(HierOutcome {
        metrics,
        y,
        tsnf,
        tsfb,
        oracle: exact,
        stage1_ks,
        tsfb_acceptance,
        manifest,
    })
}
