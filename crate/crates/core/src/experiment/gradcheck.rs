use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Bundle, ManifestEntry};
use crate::ad::{finite_diff_gradcheck, Tensor};
use crate::dist::{DiagonalGaussian, FullGaussian};
use crate::error::Result;
use crate::flow::{FlowConfig, FlowModel, LayerKind};
use crate::io::{format_float, write_csv};
use crate::rng::Rng;
use crate::train::{forward_kl_loss, reverse_kl_loss};

/// Finite-difference checks of every layer kind and both losses over
/// randomly drawn parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub draws: usize,
    pub dim: usize,
    pub batch: usize,
    pub hidden: Vec<usize>,
    pub param_scale: f64,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            draws: 100,
            dim: 3,
            batch: 4,
            hidden: vec![8],
            param_scale: 0.3,
            eps: 1e-6,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub case: String,
    pub draws: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

const CASES: [&str; 6] = [
    "act-norm",
    "affine-coupling",
    "rq-spline",
    "permutation",
    "forward-kl",
    "reverse-kl",
];

fn random_model(kinds: Vec<LayerKind>, cfg: &GradcheckConfig, rng: &mut Rng) -> Result<FlowModel<f64>> {
    let flow = FlowConfig {
        layers: kinds,
        hidden: cfg.hidden.clone(),
        ..FlowConfig::default()
    };
    let mut m = FlowModel::build(cfg.dim, &flow, rng)?;
    m.randomize_parameters(cfg.param_scale, rng);
    Ok(m)
}

fn random_target(d: usize, rng: &mut Rng) -> Result<FullGaussian<f64>> {
    let mean: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let l: Vec<f64> = (0..d * d).map(|_| 0.5 * rng.normal()).collect();
    let mut cov = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            cov[a * d + b] = (0..d).map(|k| l[a * d + k] * l[b * d + k]).sum::<f64>() + if a == b { 0.5 } else { 0.0 };
        }
    }
    FullGaussian::from_covariance(mean, cov)
}

/// Worst relative error of one case at one random draw. Layer cases check
/// `Σ log q(x)` with respect to both parameters and inputs.
fn check_case(case: &str, cfg: &GradcheckConfig, rng: &mut Rng) -> Result<f64> {
    use LayerKind::*;
    let x = DiagonalGaussian::standard(cfg.dim).sample(cfg.batch, rng);
    let layer = |kinds: Vec<LayerKind>, rng: &mut Rng| -> Result<f64> {
        let m = random_model(kinds, cfg, rng)?;
        let mut params: Vec<Tensor<f64>> = m.params().into_iter().cloned().collect();
        let n = params.len();
        params.push(x.clone());
        finite_diff_gradcheck(
            |tape, v| m.bind_vars(tape, &v[..n])?.log_prob(v[n])?.sum_all(),
            &params,
            cfg.eps,
        )
    };
    match case {
        "act-norm" => layer(vec![ActNorm], rng),
        "affine-coupling" => layer(vec![AffineCoupling, AffineCoupling], rng),
        "rq-spline" => layer(vec![RqSpline], rng),
        "permutation" => layer(vec![Permutation, ActNorm], rng),
        "forward-kl" => {
            let m = random_model(vec![RqSpline, ActNorm, Permutation, AffineCoupling], cfg, rng)?;
            let params: Vec<Tensor<f64>> = m.params().into_iter().cloned().collect();
            finite_diff_gradcheck(|tape, v| forward_kl_loss(&m.bind_vars(tape, v)?, &x), &params, cfg.eps)
        }
        _ => {
            let m = random_model(vec![AffineCoupling, Permutation, RqSpline, ActNorm], cfg, rng)?;
            let target = random_target(cfg.dim, rng)?;
            let params: Vec<Tensor<f64>> = m.params().into_iter().cloned().collect();
            finite_diff_gradcheck(
                |tape, v| reverse_kl_loss(&m.bind_vars(tape, v)?, &target, &x),
                &params,
                cfg.eps,
            )
        }
    }
}

/// Runs every case `cfg.draws` times; writes `gradcheck.csv` (one row per
/// draw) and `summary.csv` when `out` is given.
pub fn run_gradcheck(cfg: &GradcheckConfig, out: Option<&Path>) -> Result<(Vec<GradcheckRow>, Vec<ManifestEntry>)> {
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut detail = Vec::new();
    let mut rows = Vec::new();
    for case in CASES {
        let mut worst = 0.0f64;
        for draw in 0..cfg.draws {
            let e = check_case(case, cfg, &mut rng)?;
            worst = worst.max(e);
            detail.push(vec![case.to_string(), draw.to_string(), format_float(e)]);
        }
        rows.push(GradcheckRow {
            case: case.to_string(),
            draws: cfg.draws,
            max_rel_error: worst,
            pass: worst <= cfg.tolerance,
        });
    }
    let manifest = match out {
        Some(dir) => {
            let mut bundle = Bundle::create(dir)?;
            write_csv(
                &bundle.file("gradcheck.csv"),
                &["case", "draw", "max_rel_error"],
                detail,
            )?;
            write_csv(
                &bundle.file("summary.csv"),
                &["case", "draws", "max_rel_error", "pass"],
                rows.iter().map(|r| {
                    vec![
                        r.case.clone(),
                        r.draws.to_string(),
                        format_float(r.max_rel_error),
                        r.pass.to_string(),
                    ]
                }),
            )?;
            bundle.finish()?
        }
        None => Vec::new(),
    };
    Ok((rows, manifest))
}
