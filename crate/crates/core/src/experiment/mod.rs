//! End-to-end runs that write plot-ready artifact bundles.

mod bundle;
mod generic;
mod gradcheck;
mod hier;
mod joint;
mod oracle_report;
mod tsfb_run;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use bundle::{sha256_hex, Bundle, ManifestEntry, Metrics, MANIFEST};
pub use generic::{run_two_stage, AnalyticSpec, ComponentFile, TwoStageOutcome, TwoStageSpec};
pub use gradcheck::{run_gradcheck, GradcheckConfig, GradcheckRow};
pub use hier::{run_hier, HierConfig, HierOutcome, HierVariant};
pub use joint::{joint_truth, run_joint, JointConfig, JointOutcome, JointTruth};
pub use oracle_report::{run_oracle_report, OracleReportConfig};
pub use tsfb_run::{run_tsfb, TsfbRunConfig};

use crate::error::{Error, Result};
use crate::io::format_float;
use crate::oracle::Kde;

/// Parses a TOML document over the defaults of `C`: tables present in the
/// document replace only the keys they name, at any depth.
pub fn load_config<C: DeserializeOwned + Serialize + Default>(path: Option<&Path>) -> Result<C> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let err = |message: String| Error::Config {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let user: toml::Table = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
    let mut merged = toml::Table::try_from(C::default()).map_err(|e| err(e.to_string()))?;
    merge(&mut merged, user);
    merged.try_into().map_err(|e: toml::de::Error| err(e.to_string()))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Independent seed for a named sub-step of a run.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub(crate) fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

pub(crate) fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// KDE of `samples` on `points` as CSV fields.
pub(crate) fn kde_column(samples: Vec<f64>, points: &[f64]) -> Result<Vec<String>> {
    let k = Kde::silverman(samples)?;
    Ok(k.eval(points).into_iter().map(format_float).collect())
}

/// Normalized 2-D histogram rows `(a_center, b_center, density)`.
pub(crate) fn histogram2d(a: &[f64], b: &[f64], ra: (f64, f64), rb: (f64, f64), bins: usize) -> Vec<Vec<String>> {
    let mut counts = vec![0usize; bins * bins];
    let (wa, wb) = ((ra.1 - ra.0) / bins as f64, (rb.1 - rb.0) / bins as f64);
    for (&x, &y) in a.iter().zip(b) {
        let i = ((x - ra.0) / wa).floor();
        let j = ((y - rb.0) / wb).floor();
        if i >= 0.0 && j >= 0.0 && (i as usize) < bins && (j as usize) < bins {
            counts[i as usize * bins + j as usize] += 1;
        }
    }
    let norm = a.len() as f64 * wa * wb;
    let mut rows = Vec::with_capacity(bins * bins);
    for i in 0..bins {
        for j in 0..bins {
            rows.push(vec![
                format_float(ra.0 + (i as f64 + 0.5) * wa),
                format_float(rb.0 + (j as f64 + 0.5) * wb),
                format_float(counts[i * bins + j] as f64 / norm),
            ]);
        }
    }
    rows
}

#[cfg(test)]
mod tests;
