use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{derive_seed, grid, histogram2d, kde_column, mean_var, Bundle, ManifestEntry, Metrics};
use crate::dist::{normal_log_pdf, simulate_joint_subvectors, ClampedQuarticReciprocal, QuarticMarginal};
use crate::error::Result;
use crate::flow::FlowConfig;
use crate::io::{format_float, write_csv, write_matrix};
use crate::oracle::ks_one_sample;
use crate::quad::simpson;
use crate::rng::Rng;
use crate::train::TrainConfig;
use crate::twostage::{fit_stage1, fit_stage2, joint_composition, joint_composition_with, StageConfig};

/// Three-variable joint density recovered from two overlapping studies.
/// Stage seeds inside `stage1`/`stage2` are replaced by seeds derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointConfig {
    pub seed: u64,
    pub n1: usize,
    pub n2: usize,
    pub sigma: f64,
    pub tau: f64,
    pub omega: f64,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub samples: usize,
    /// Leading Stage-2 draws used for the KS test on `X`.
    pub ks_samples: usize,
    pub ks_alpha: f64,
    /// Hold `1/f(x)` constant outside the observed range of `x`.
    pub clamp_reciprocal: bool,
    pub grid_points: usize,
    pub hist_bins: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n1: 5000,
            n2: 5000,
            sigma: 0.1,
            tau: 0.8,
            omega: 5.0,
            stage1: StageConfig::new(FlowConfig::spline_blocks(), TrainConfig::new(8000, 0)),
            stage2: StageConfig::new(FlowConfig::spline_blocks_permuted(), TrainConfig::new(25_000, 0)),
            samples: 100_000,
            ks_samples: 5000,
            ks_alpha: 0.01,
            clamp_reciprocal: true,
            grid_points: 201,
            hist_bins: 50,
        }
    }
}

/// Marginal moments and densities of the simulated joint, by quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointTruth {
    pub sigma: f64,
    pub tau: f64,
    pub omega: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub var_z: f64,
}

const NODES: usize = 8000;

fn expect_x(f: impl Fn(f64) -> f64) -> f64 {
    simpson(&|x| QuarticMarginal::log_prob(x).exp() * f(x), -4.0, 4.0, NODES)
}

pub fn joint_truth(sigma: f64, tau: f64, omega: f64) -> JointTruth {
    JointTruth {
        sigma,
        tau,
        omega,
        var_x: expect_x(|x| x * x),
        var_y: expect_x(|x| (2.0 * x).sin().powi(6)) + sigma * sigma,
        var_z: omega * omega * expect_x(|x| (PI * x).sin().powi(2)) + tau * tau,
    }
}

impl JointTruth {
    pub fn density_x(&self, x: f64) -> f64 {
        QuarticMarginal::log_prob(x).exp()
    }

    pub fn density_y(&self, y: f64) -> f64 {
        expect_x(|x| normal_log_pdf(y, (2.0 * x).sin().powi(3), self.sigma).exp())
    }

    pub fn density_z(&self, z: f64) -> f64 {
        expect_x(|x| normal_log_pdf(z, self.omega * (PI * x).sin(), self.tau).exp())
    }
}

#[derive(Debug, Clone)]
pub struct JointOutcome {
    pub metrics: Metrics,
    pub manifest: Vec<ManifestEntry>,
}

pub fn run_joint(cfg: &JointConfig, out: &Path) -> Result<JointOutcome> {
    let mut bundle = Bundle::create(out)?;
    let mut rng = Rng::seed_from_u64(derive_seed(cfg.seed, "data"));
    let (xy, xz) = simulate_joint_subvectors(cfg.n1, cfg.n2, cfg.sigma, cfg.tau, cfg.omega, &mut rng)?;
    write_matrix(&bundle.file("data_xy.csv"), &["x", "y"], xy.rows())?;
    write_matrix(&bundle.file("data_xz.csv"), &["x", "z"], xz.rows())?;

    let xs: Vec<f64> = xy.rows().column(0).into_iter().chain(xz.rows().column(0)).collect();
    let mut stage1 = [cfg.stage1.clone(), cfg.stage1.clone()];
    stage1[0].train.seed = derive_seed(cfg.seed, "stage1-xy");
    stage1[1].train.seed = derive_seed(cfg.seed, "stage1-xz");
    let fits = fit_stage1(&[xy, xz], &stage1)?;
    for f in &fits {
        let name = f.spec.name();
        f.model.save_checkpoint(&bundle.file(&format!("stage1_{name}.json")))?;
        f.trace.write_csv(&bundle.file(&format!("loss_stage1_{name}.csv")))?;
    }
    let mut metrics = Metrics::new();
    for f in &fits {
        metrics.push(
            format!("stage1_{}_final_loss", f.spec.name()),
            f.trace.tail_mean(100).unwrap_or(f64::NAN),
        );
    }

    let (g1, g2) = (fits[0].model.clone(), fits[1].model.clone());
    let target = if cfg.clamp_reciprocal {
        let (lo, hi) = xs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
        metrics.push("reciprocal_clamp_lo", lo);
        metrics.push("reciprocal_clamp_hi", hi);
        joint_composition_with(g1, g2, ClampedQuarticReciprocal::new(lo, hi)?)?
    } else {
        joint_composition(g1, g2)?
    };
    let mut s2 = cfg.stage2.clone();
    s2.train.seed = derive_seed(cfg.seed, "stage2");
    let (model, trace) = fit_stage2(&target, &s2)?;
    model.save_checkpoint(&bundle.file("stage2.json"))?;
    trace.write_csv(&bundle.file("loss_stage2.csv"))?;
    metrics.push("stage2_final_loss", trace.tail_mean(100).unwrap_or(f64::NAN));

    let samples = model.sample(cfg.samples, &mut Rng::seed_from_u64(derive_seed(cfg.seed, "samples")))?;
    write_matrix(&bundle.file("samples.csv"), &["x", "y", "z"], &samples)?;
    let cols: Vec<Vec<f64>> = (0..3).map(|k| samples.column(k)).collect();

    let truth = joint_truth(cfg.sigma, cfg.tau, cfg.omega);
    let (mx, vx) = mean_var(&cols[0]);
    let (my, vy) = mean_var(&cols[1]);
    let (mz, vz) = mean_var(&cols[2]);
    for (name, v) in [
        ("mean_x", mx),
        ("mean_y", my),
        ("mean_z", mz),
        ("var_x", vx),
        ("var_x_truth", truth.var_x),
        ("var_y", vy),
        ("var_y_truth", truth.var_y),
        ("var_z", vz),
        ("var_z_truth", truth.var_z),
    ] {
        metrics.push(name, v);
    }
    let k = cfg.ks_samples.min(cfg.samples);
    let ks = ks_one_sample(&cols[0][..k], QuarticMarginal::cdf, cfg.ks_alpha)?;
    metrics.push("ks_x_statistic", ks.statistic);
    metrics.push("ks_x_critical", ks.critical);
    metrics.push("ks_x_reject", f64::from(u8::from(ks.reject)));

    let (gx, gy, gz) = (
        grid(-2.0, 2.0, cfg.grid_points),
        grid(-1.6, 1.6, cfg.grid_points),
        grid(-8.0, 8.0, cfg.grid_points),
    );
    let mut rows = Vec::new();
    for (name, g, col, f) in [
        ("x", &gx, &cols[0], &(|t| truth.density_x(t)) as &dyn Fn(f64) -> f64),
        ("y", &gy, &cols[1], &|t| truth.density_y(t)),
        ("z", &gz, &cols[2], &|t| truth.density_z(t)),
    ] {
        let kde = kde_column(col.clone(), g)?;
        for (p, d) in g.iter().zip(kde) {
            rows.push(vec![name.to_string(), format_float(*p), d, format_float(f(*p))]);
        }
    }
    write_csv(
        &bundle.file("kde_marginals.csv"),
        &["variable", "point", "kde", "truth"],
        rows,
    )?;

    let ranges = [(-2.0, 2.0), (-1.6, 1.6), (-8.0, 8.0)];
    for (a, b, name) in [(0, 1, "xy"), (0, 2, "xz"), (1, 2, "yz")] {
        let header = [&name[..1], &name[1..], "density"];
        let rows = histogram2d(&cols[a], &cols[b], ranges[a], ranges[b], cfg.hist_bins);
        write_csv(&bundle.file(&format!("hist_{name}.csv")), &header, rows)?;
    }

    metrics.write_csv(&bundle.file("metrics.csv"))?;
    let manifest = bundle.finish()?;
    Ok(JointOutcome { metrics, manifest })
}
