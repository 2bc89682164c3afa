use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{derive_seed, Bundle, ManifestEntry, Metrics};
use crate::ad::Tensor;
use crate::dist::{DiagonalGaussian, Flat, QuarticReciprocal, SoftwarePrior, UnnormalizedLogDensity};
use crate::error::{Error, Result};
use crate::io::{format_float, read_matrix, write_csv, write_matrix};
use crate::rng::Rng;
use crate::twostage::{
    compose_target, fit_stage1, fit_stage2, Combination, Component, GaussianRatio, HierarchicalH, SampleSet,
    StageConfig, SubvectorSpec,
};

/// Analytic term `h`, chosen from a fixed registry. Indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AnalyticSpec {
    /// `-log f(x)` of the quartic marginal, on one coordinate.
    QuarticReciprocal {
        indices: Vec<usize>,
    },
    /// Hierarchical term over `(θ_1..θ_J, γ)`, `γ` last.
    HierarchicalH {
        indices: Vec<usize>,
        tau: f64,
        prior: SoftwarePrior,
    },
    Flat {
        indices: Vec<usize>,
    },
    /// `N(x; a, diag b²) / N(x; c, diag d²)`, denominator optional.
    CustomGaussianRatio {
        indices: Vec<usize>,
        numerator_mean: Vec<f64>,
        numerator_sd: Vec<f64>,
        denominator_mean: Option<Vec<f64>>,
        denominator_sd: Option<Vec<f64>>,
    },
}

impl AnalyticSpec {
    fn indices(&self) -> &[usize] {
        match self {
            AnalyticSpec::QuarticReciprocal { indices }
            | AnalyticSpec::HierarchicalH { indices, .. }
            | AnalyticSpec::Flat { indices }
            | AnalyticSpec::CustomGaussianRatio { indices, .. } => indices,
        }
    }

    fn density(&self) -> Result<Box<dyn UnnormalizedLogDensity<f64>>> {
        let d = self.indices().len();
        Ok(match self {
            AnalyticSpec::QuarticReciprocal { .. } => {
                if d != 1 {
                    return Err(Error::Invalid(format!("quartic-reciprocal takes 1 index, got {d}")));
                }
                Box::new(QuarticReciprocal)
            }
            AnalyticSpec::HierarchicalH { tau, prior, .. } => {
                if d < 2 {
                    return Err(Error::Invalid("hierarchical-h needs at least one θ index and γ".into()));
                }
                Box::new(HierarchicalH::new(d - 1, *tau, *prior)?)
            }
            AnalyticSpec::Flat { .. } => Box::new(Flat { dim: d }),
            AnalyticSpec::CustomGaussianRatio {
                numerator_mean,
                numerator_sd,
                denominator_mean,
                denominator_sd,
                ..
            } => {
                let num = DiagonalGaussian::new(numerator_mean.clone(), numerator_sd.clone())?;
                let den = match (denominator_mean, denominator_sd) {
                    (Some(m), Some(s)) => Some(DiagonalGaussian::new(m.clone(), s.clone())?),
                    (None, None) => None,
                    _ => {
                        return Err(Error::Invalid(
                            "denominator_mean and denominator_sd must be given together".into(),
                        ))
                    }
                };
                if num.dim() != d {
                    return Err(Error::Invalid(format!(
                        "custom-gaussian-ratio has {} means for {d} indices",
                        num.dim()
                    )));
                }
                Box::new(GaussianRatio::new(num, den)?)
            }
        })
    }
}

/// Boxed density as a [`Component`] payload.
struct Boxed(Box<dyn UnnormalizedLogDensity<f64>>);

impl UnnormalizedLogDensity<f64> for Boxed {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn log_density(&self, x: &Tensor<f64>) -> Result<Vec<f64>> {
        self.0.log_density(x)
    }

    fn log_density_grad(&self, x: &Tensor<f64>) -> Result<(Vec<f64>, Tensor<f64>)> {
        self.0.log_density_grad(x)
    }
}

/// One sample-based component: draws for the 1-based coordinates `indices`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentFile {
    pub name: String,
    pub indices: Vec<usize>,
    pub data: PathBuf,
    #[serde(default)]
    pub stage: StageConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CombinationSpec {
    #[default]
    Product,
    Mixture {
        weights: Vec<f64>,
    },
}

/// Generic two-stage run. Stage seeds are derived from `seed`; relative data
/// paths resolve against the spec file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStageSpec {
    pub seed: u64,
    pub dim: usize,
    pub analytic: Option<AnalyticSpec>,
    pub components: Vec<ComponentFile>,
    pub combination: CombinationSpec,
    pub stage2: StageConfig,
    pub samples: usize,
    /// CSV of query points; without it `query_points` draws of the final model are used.
    pub query: Option<PathBuf>,
    pub query_points: usize,
}

impl Default for TwoStageSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 0,
            analytic: None,
            components: Vec::new(),
            combination: CombinationSpec::Product,
            stage2: StageConfig::default(),
            samples: 10_000,
            query: None,
            query_points: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TwoStageOutcome {
    pub metrics: Metrics,
    /// Importance-sampling estimate of the composed target's log normalizer.
    pub log_normalizer: f64,
    pub manifest: Vec<ManifestEntry>,
}

fn zero_based(name: &str, idx: &[usize], dim: usize, problems: &mut Vec<String>) -> Option<SubvectorSpec> {
    match SubvectorSpec::from_one_based(name, idx) {
        Ok(s) => {
            let p = s.problems(dim);
            if p.is_empty() {
                return Some(s);
            }
            problems.extend(p.into_iter().map(|m| format!("{name}: {m}")));
            None
        }
        Err(e) => {
            problems.push(format!("{name}: {e}"));
            None
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

type Prepared = (
    Option<Component<f64>>,
    Vec<SampleSet<f64>>,
    Vec<StageConfig>,
    Option<Tensor<f64>>,
);

/// Loads and checks every part of `spec`, returning all problems together.
fn prepare(spec: &TwoStageSpec, base: &Path) -> Result<Prepared> {
    let mut problems = Vec::new();
    if spec.dim == 0 {
        problems.push("dim must be positive".to_string());
    }
    if spec.samples < 2 {
        problems.push("samples must be at least 2".to_string());
    }
    let analytic = spec.analytic.as_ref().and_then(|a| {
        let s = zero_based("analytic", a.indices(), spec.dim, &mut problems)?;
        match a.density() {
            Ok(d) => Some(Component::new(s, Boxed(d))),
            Err(e) => {
                problems.push(format!("analytic: {e}"));
                None
            }
        }
    });
    let mut sets = Vec::new();
    let mut configs = Vec::new();
    for (k, c) in spec.components.iter().enumerate() {
        if spec.components[..k].iter().any(|o| o.name == c.name) {
            problems.push(format!("component name `{}` is used twice", c.name));
        }
        for p in c.stage.train.problems() {
            problems.push(format!("component {}: {p}", c.name));
        }
        if let Err(e) = c.stage.flow.validate() {
            problems.push(format!("component {}: {e}", c.name));
        }
        let s = zero_based(&c.name, &c.indices, spec.dim, &mut problems);
        let rows = match read_matrix::<f64>(&base.join(&c.data)) {
            Ok((_, m)) => Some(m),
            Err(e) => {
                problems.push(format!("component {}: {e}", c.name));
                None
            }
        };
        if let (Some(s), Some(rows)) = (s, rows) {
            if rows.cols() != s.len() {
                problems.push(format!(
                    "component {}: data has {} columns but {} indices",
                    c.name,
                    rows.cols(),
                    s.len()
                ));
            } else {
                match SampleSet::new(s, rows) {
                    Ok(set) => {
                        let mut cfg = c.stage.clone();
                        cfg.train.seed = derive_seed(spec.seed, &format!("stage1-{}", c.name));
                        sets.push(set);
                        configs.push(cfg);
                    }
                    Err(e) => problems.push(format!("component {}: {e}", c.name)),
                }
            }
        }
    }
    for p in spec.stage2.train.problems() {
        problems.push(format!("stage2: {p}"));
    }
    if let Err(e) = spec.stage2.flow.validate() {
        problems.push(format!("stage2: {e}"));
    }
    let query = spec
        .query
        .as_ref()
        .and_then(|q| match read_matrix::<f64>(&base.join(q)) {
            Ok((_, m)) if m.cols() == spec.dim => Some(m),
            Ok((_, m)) => {
                problems.push(format!("query: {} columns for dimension {}", m.cols(), spec.dim));
                None
            }
            Err(e) => {
                problems.push(format!("query: {e}"));
                None
            }
        });
    if problems.is_empty() && sets.len() == spec.components.len() {
        // Index-cover and mixture checks, on shape-only stand-ins.
        let probe: Vec<Component<f64>> = sets
            .iter()
            .map(|s| Component::new(s.spec().clone(), Flat { dim: s.spec().len() }))
            .collect();
        let a = analytic
            .as_ref()
            .map(|c| Component::new(c.spec.clone(), Flat { dim: c.spec.len() }));
        if let Err(e) = compose_target(spec.dim, a, probe, combination(&spec.combination)) {
            match e {
                Error::Spec(p) => problems.extend(p),
                other => problems.push(other.to_string()),
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Spec(problems));
    }
    Ok((analytic, sets, configs, query))
}

fn combination(c: &CombinationSpec) -> Combination<f64> {
    match c {
        CombinationSpec::Product => Combination::Product,
        CombinationSpec::Mixture { weights } => Combination::Mixture(weights.clone()),
    }
}

pub fn run_two_stage(spec: &TwoStageSpec, base: &Path, out: &Path) -> Result<TwoStageOutcome> {
    let (analytic, sets, configs, query) = prepare(spec, base)?;
    let mut bundle = Bundle::create(out)?;
    let mut metrics = Metrics::new();
    let fits = fit_stage1(&sets, &configs)?;
    let mut components = Vec::with_capacity(fits.len());
    for f in fits {
        let name = f.spec.name().to_string();
        f.model.save_checkpoint(&bundle.file(&format!("stage1_{name}.json")))?;
        f.trace.write_csv(&bundle.file(&format!("loss_stage1_{name}.csv")))?;
        metrics.push(
            format!("stage1_{name}_final_loss"),
            f.trace.tail_mean(100).unwrap_or(f64::NAN),
        );
        components.push(Component::new(f.spec, f.model));
    }
    let target = compose_target(spec.dim, analytic, components, combination(&spec.combination))?;
    let mut s2 = spec.stage2.clone();
    s2.train.seed = derive_seed(spec.seed, "stage2");
    let (model, trace) = fit_stage2(&target, &s2)?;
    model.save_checkpoint(&bundle.file("stage2.json"))?;
    trace.write_csv(&bundle.file("loss_stage2.csv"))?;
    metrics.push("stage2_final_loss", trace.tail_mean(100).unwrap_or(f64::NAN));

    let header: Vec<String> = (1..=spec.dim).map(|i| format!("x_{i}")).collect();
    let samples = model.sample(spec.samples, &mut Rng::seed_from_u64(derive_seed(spec.seed, "samples")))?;
    write_matrix(&bundle.file("samples.csv"), &header, &samples)?;

    let weights: Vec<f64> = target
        .log_density(&samples)?
        .into_iter()
        .zip(model.log_prob(&samples)?)
        .map(|(f, q)| f - q)
        .collect();
    let log_z = log_sum_exp(&weights) - (weights.len() as f64).ln();
    metrics.push("log_normalizer", log_z);

    let query = match query {
        Some(q) => q,
        None => model.sample(
            spec.query_points,
            &mut Rng::seed_from_u64(derive_seed(spec.seed, "query")),
        )?,
    };
    let composed = target.log_density(&query)?;
    let direct = model.log_prob(&query)?;
    let mut worst = 0.0f64;
    let mut rows = Vec::with_capacity(query.rows());
    for r in 0..query.rows() {
        let normalized = composed[r] - log_z;
        worst = worst.max((normalized - direct[r]).abs());
        let mut row: Vec<String> = query.row(r).iter().map(|v| format_float(*v)).collect();
        row.extend([composed[r], normalized, direct[r]].map(format_float));
        rows.push(row);
    }
    let mut qh = header.clone();
    qh.extend(["log_composed", "log_composed_normalized", "log_stage2"].map(String::from));
    write_csv(&bundle.file("density_query.csv"), &qh, rows)?;
    metrics.push("max_abs_route_difference", worst);
    metrics.write_csv(&bundle.file("metrics.csv"))?;
    let manifest = bundle.finish()?;
    Ok(TwoStageOutcome {
        metrics,
        log_normalizer: log_z,
        manifest,
    })
}
