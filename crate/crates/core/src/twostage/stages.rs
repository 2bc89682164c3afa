use serde::{Deserialize, Serialize};

use crate::dist::UnnormalizedLogDensity;
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::real::Real;
use crate::rng::Rng;
use crate::train::{fit, LossTrace, Objective, TrainConfig};

use super::spec::{SampleSet, SubvectorSpec};

const BUILD_STREAM: u64 = 0x5eed_f10e_0000_0001;

/// Architecture and optimizer settings for one fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub flow: FlowConfig,
    pub train: TrainConfig,
}

impl StageConfig {
    pub fn new(flow: FlowConfig, train: TrainConfig) -> Self {
        Self { flow, train }
    }

    /// Fresh model whose conditioner weights depend only on `train.seed`.
    pub fn build_model<T: Real>(&self, dim: usize) -> Result<FlowModel<T>> {
        let mut rng = Rng::seed_from_u64(self.train.seed ^ BUILD_STREAM);
        FlowModel::build(dim, &self.flow, &mut rng)
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Fit<T: Real> {
    pub spec: SubvectorSpec,
    pub model: FlowModel<T>,
    pub trace: LossTrace,
}

/// Fits one forward-KL flow per sample set, in parallel. Each fit depends only
/// on its own set and config. Errors name the failing component.
pub fn fit_stage1<T: Real>(sets: &[SampleSet<T>], configs: &[StageConfig]) -> Result<Vec<Stage1Fit<T>>> {
    if sets.len() != configs.len() {
        return Err(Error::Invalid(format!(
            "{} sample sets but {} stage configs",
            sets.len(),
            configs.len()
        )));
    }
    let one = |set: &SampleSet<T>, cfg: &StageConfig| -> Result<Stage1Fit<T>> {
        let mut model = cfg.build_model(set.spec().len())?;
        let trace = fit(&mut model, Objective::Forward(set.rows()), &cfg.train)?;
        Ok(Stage1Fit {
            spec: set.spec().clone(),
            model,
            trace,
        })
    };
    let results: Vec<Result<Stage1Fit<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = sets
            .iter()
            .zip(configs)
            .map(|(set, cfg)| s.spawn(move || one(set, cfg)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    });
    results
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            r.map_err(|e| Error::Component {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Reverse-KL fit of a fresh flow to `target`.
pub fn fit_stage2<T: Real>(
    target: &dyn UnnormalizedLogDensity<T>,
    cfg: &StageConfig,
) -> Result<(FlowModel<T>, LossTrace)> {
    let mut model = cfg.build_model(target.dim())?;
    let trace = fit(&mut model, Objective::Reverse(target), &cfg.train)?;
    Ok((model, trace))
}
