#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::should_implement_trait,
    clippy::too_many_arguments
)]

pub mod ad;
pub mod dist;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod io;
pub mod oracle;
pub mod quad;
pub mod real;
pub mod rng;
pub mod train;
pub mod tsfb;
pub mod twostage;

pub use error::{Error, Result};
pub use real::Real;
pub use rng::Rng;

/// Double-precision instantiations of the generic core types.
pub type Tensor = ad::Tensor<f64>;
pub type FlowModel = flow::FlowModel<f64>;
pub type DiagonalGaussian = dist::DiagonalGaussian<f64>;
pub type SampleSet = twostage::SampleSet<f64>;
pub type ComposedTarget = twostage::ComposedTarget<f64>;
pub type Component = twostage::Component<f64>;
