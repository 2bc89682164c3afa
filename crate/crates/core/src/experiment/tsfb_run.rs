use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Bundle, ManifestEntry, Metrics};
use crate::dist::SoftwarePrior;
use crate::error::{Error, Result};
use crate::io::read_matrix;
use crate::oracle::{error_report, write_error_reports, GaussianHierOracle};
use crate::tsfb::{tsfb_run, TsfbConfig};

/// Standalone TSFB run on a pool of external draws (`n x J` CSV with header).
/// With `y` and `sigma` set, the chain is also scored against the exact posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsfbRunConfig {
    pub seed: u64,
    pub pool: PathBuf,
    pub tau: f64,
    pub iterations: usize,
    pub prior: SoftwarePrior,
    pub y: Option<Vec<f64>>,
    pub sigma: Option<f64>,
}

impl Default for TsfbRunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pool: PathBuf::new(),
            tau: 2.0,
            iterations: 30_000,
            prior: SoftwarePrior::Flat,
            y: None,
            sigma: None,
        }
    }
}

/// Relative data paths are resolved against `base` (the config's directory).
pub fn run_tsfb(cfg: &TsfbRunConfig, base: &Path, out: &Path) -> Result<Vec<ManifestEntry>> {
    if cfg.pool.as_os_str().is_empty() {
        return Err(Error::Spec(
            vec!["`pool` must name a CSV file of external draws".into()],
        ));
    }
    let (_, pool) = read_matrix::<f64>(&base.join(&cfg.pool))?;
    let chain = tsfb_run(&pool, &TsfbConfig::new(cfg.iterations, cfg.tau, cfg.prior, cfg.seed))?;
    for w in &chain.warnings {
        eprintln!("warning: {w}");
    }
    let mut bundle = Bundle::create(out)?;
    chain.write_csv(&bundle.file("chain.csv"))?;
    let mut metrics = Metrics::new();
    for (i, a) in chain.acceptance_rates().iter().enumerate() {
        metrics.push(format!("acceptance_{}", i + 1), *a);
    }
    match (&cfg.y, cfg.sigma) {
        (Some(y), Some(sigma)) => {
            let o = GaussianHierOracle::new(y.clone(), sigma, cfg.tau)?;
            let r = error_report(chain.states(), &o)?;
            write_error_reports(&bundle.file("errors.csv"), &[("tsfb", &r)])?;
            metrics.push("max_abs_mean_error", r.max_abs_mean_error());
            metrics.push("max_abs_sd_error", r.max_abs_sd_error());
            metrics.push("cov_frobenius", r.frobenius);
        }
        (None, None) => {}
        _ => return Err(Error::Spec(vec!["`y` and `sigma` must be given together".into()])),
    }
    metrics.write_csv(&bundle.file("metrics.csv"))?;
    bundle.finish()
}
