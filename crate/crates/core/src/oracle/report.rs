use std::path::Path;

use super::GaussianHierOracle;
use crate::ad::Tensor;
use crate::error::{Error, Result};
use crate::io::{format_float, write_csv};

/// Empirical minus exact moments for `θ_1..θ_J, γ`, plus the Frobenius
/// norm of the `θ` covariance error.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub mean_error: Vec<f64>,
    pub sd_error: Vec<f64>,
    pub frobenius: f64,
}

impl ErrorReport {
    pub fn max_abs_mean_error(&self) -> f64 {
        self.mean_error.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_sd_error(&self) -> f64 {
        self.sd_error.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `samples` holds one draw per row with columns `θ_1..θ_J, γ`.
pub fn error_report(samples: &Tensor<f64>, oracle: &GaussianHierOracle) -> Result<ErrorReport> {
    let j = oracle.groups();
    if samples.shape().len() != 2 || samples.cols() != j + 1 {
        return Err(Error::Dimension {
            expected: j + 1,
            got: samples.shape().get(1).copied().unwrap_or(0),
        });
    }
    let n = samples.rows();
    if n < 2 {
        return Err(Error::Invalid("error report needs at least two draws".into()));
    }
    let d = j + 1;
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(samples.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for r in 0..n {
        let row = samples.row(r);
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[a * d + b] += da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[a * d + b] /= (n - 1) as f64;
            cov[b * d + a] = cov[a * d + b];
        }
    }
    let (true_mean, true_sd) = oracle.marginals();
    let (_, true_cov) = oracle.theta_posterior();
    let frobenius = (0..j)
        .flat_map(|a| (0..j).map(move |b| (a, b)))
        .map(|(a, b)| (cov[a * d + b] - true_cov[a * j + b]).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(ErrorReport {
        mean_error: (0..d).map(|k| mean[k] - true_mean[k]).collect(),
        sd_error: (0..d).map(|k| cov[k * d + k].sqrt() - true_sd[k]).collect(),
        frobenius,
    })
}

/// One block of rows per model: `mean_error`, `sd_error` and
/// `cov_frobenius` (in the first parameter column).
pub fn write_error_reports(path: &Path, reports: &[(&str, &ErrorReport)]) -> Result<()> {
    let d = reports.first().map_or(0, |r| r.1.mean_error.len());
    if reports
        .iter()
        .any(|r| r.1.mean_error.len() != d || r.1.sd_error.len() != d)
    {
        return Err(Error::Invalid(
            "error reports disagree on the number of parameters".into(),
        ));
    }
    let mut header = vec!["model".to_string(), "statistic".to_string()];
    header.extend((1..d).map(|i| format!("theta_{i}")));
    header.push("gamma".into());
    let mut rows = Vec::new();
    for (name, r) in reports {
        for (stat, vals) in [("mean_error", &r.mean_error), ("sd_error", &r.sd_error)] {
            let mut row = vec![name.to_string(), stat.to_string()];
            row.extend(vals.iter().map(|v| format_float(*v)));
            rows.push(row);
        }
        let mut row = vec![name.to_string(), "cov_frobenius".to_string(), format_float(r.frobenius)];
        row.extend(std::iter::repeat_n(String::new(), d - 1));
        rows.push(row);
    }
    write_csv(path, &header, rows)
}
