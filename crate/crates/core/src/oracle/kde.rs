use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Gaussian kernel density estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Kde {
    samples: Vec<f64>,
    bandwidth: f64,
}

impl Kde {
    pub fn new(samples: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("KDE needs at least one sample".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("KDE samples must be finite".into()));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Invalid(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Self { samples, bandwidth })
    }

    /// Bandwidth `0.9 min(sd, IQR/1.34) n^(-1/5)`.
    pub fn silverman(samples: Vec<f64>) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::Invalid("Silverman's rule needs at least two samples".into()));
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let sd = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let mut s = samples.clone();
        s.sort_by(f64::total_cmp);
        let iqr = quantile(&s, 0.75) - quantile(&s, 0.25);
        let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
        Self::new(samples, 0.9 * spread * (n as f64).powf(-0.2))
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let s: f64 = self
            .samples
            .iter()
            .map(|&xi| {
                let z = (x - xi) / h;
                (-0.5 * z * z).exp()
            })
            .sum();
        s * INV_SQRT_2PI / (h * self.samples.len() as f64)
    }

    pub fn eval(&self, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&x| self.density(x)).collect()
    }
}

/// Linear-interpolated quantile of sorted data.
pub(crate) fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}
