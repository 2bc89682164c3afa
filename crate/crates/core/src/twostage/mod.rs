//! Two-stage fitting: forward-KL component fits, composition, reverse-KL fit.

mod compose;
mod spec;
mod stages;

pub use compose::{
    compose_target, hierarchical_composition, joint_composition, joint_composition_with, Combination, Component,
    ComposedTarget, CustomRule, GaussianRatio, HierarchicalH,
};
pub use spec::{validate_cover, SampleSet, SubvectorSpec};
pub use stages::{fit_stage1, fit_stage2, Stage1Fit, StageConfig};

#[cfg(test)]
mod tests;
