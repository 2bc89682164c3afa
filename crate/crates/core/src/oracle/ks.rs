use crate::error::{Error, Result};

/// Kolmogorov-Smirnov outcome at a given significance level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub critical: f64,
    pub alpha: f64,
    pub reject: bool,
}

/// Asymptotic `c(α) = sqrt(-ln(α/2) / 2)`; 1.628 at 0.01 and 1.358 at 0.05.
pub fn ks_critical_value(alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt()
}

fn sorted(a: &[f64], what: &str) -> Result<Vec<f64>> {
    if a.is_empty() {
        return Err(Error::Invalid(format!("{what} sample is empty")));
    }
    if a.iter().any(|v| v.is_nan()) {
        return Err(Error::Invalid(format!("{what} sample contains NaN")));
    }
    let mut v = a.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Invalid(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Two-sample statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    let (a, b) = (sorted(a, "first")?, sorted(b, "second")?);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(d)
}

pub fn ks_two_sample(a: &[f64], b: &[f64], alpha: f64) -> Result<KsResult> {
    check_alpha(alpha)?;
    let statistic = ks_statistic(a, b)?;
    let (n, m) = (a.len() as f64, b.len() as f64);
    let critical = ks_critical_value(alpha) * ((n + m) / (n * m)).sqrt();
    Ok(KsResult {
        statistic,
        critical,
        alpha,
        reject: statistic > critical,
    })
}

/// One-sample test of `a` against a continuous CDF.
pub fn ks_one_sample(a: &[f64], cdf: impl Fn(f64) -> f64, alpha: f64) -> Result<KsResult> {
    check_alpha(alpha)?;
    let a = sorted(a, "sample")?;
    let n = a.len() as f64;
    let statistic = a.iter().enumerate().fold(0.0f64, |d, (k, &x)| {
        let f = cdf(x);
        d.max(f - k as f64 / n).max((k + 1) as f64 / n - f)
    });
    let critical = ks_critical_value(alpha) / n.sqrt();
    Ok(KsResult {
        statistic,
        critical,
        alpha,
        reject: statistic > critical,
    })
}
