use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Bundle, ManifestEntry};
use crate::error::Result;
use crate::io::{format_float, read_matrix, write_csv};
use crate::oracle::{error_report, write_error_reports, GaussianHierOracle};
use crate::rng::Rng;

/// Exact posterior summaries, plus an error report for `samples` (columns
/// `θ_1..θ_J, γ`) or, without it, for draws from the exact posterior itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleReportConfig {
    pub seed: u64,
    pub y: Vec<f64>,
    pub sigma: f64,
    pub tau: f64,
    pub samples: Option<PathBuf>,
    pub n: usize,
}

impl Default for OracleReportConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            y: vec![-5.3, -4.1, -6.2],
            sigma: 1.0,
            tau: 2.0,
            samples: None,
            n: 100_000,
        }
    }
}

pub fn run_oracle_report(cfg: &OracleReportConfig, base: &Path, out: &Path) -> Result<Vec<ManifestEntry>> {
    let o = GaussianHierOracle::new(cfg.y.clone(), cfg.sigma, cfg.tau)?;
    let j = o.groups();
    let mut bundle = Bundle::create(out)?;
    let mut names: Vec<String> = (1..=j).map(|i| format!("theta_{i}")).collect();
    names.push("gamma".into());
    let (means, sds) = o.marginals();
    write_csv(
        &bundle.file("exact_posterior.csv"),
        &["parameter", "mean", "sd"],
        (0..=j).map(|k| vec![names[k].clone(), format_float(means[k]), format_float(sds[k])]),
    )?;
    let (_, cov) = o.theta_posterior();
    write_csv(
        &bundle.file("theta_covariance.csv"),
        &names[..j],
        (0..j).map(|a| (0..j).map(|b| format_float(cov[a * j + b])).collect()),
    )?;
    let (label, samples) = match &cfg.samples {
        Some(p) => ("samples", read_matrix::<f64>(&base.join(p))?.1),
        None => ("oracle", o.sample(cfg.n, &mut Rng::seed_from_u64(cfg.seed))),
    };
    let r = error_report(&samples, &o)?;
    write_error_reports(&bundle.file("errors.csv"), &[(label, &r)])?;
    bundle.finish()
}
