//! Parameter registry, the nano transformer, analytic testbeds and the
//! synthetic token source.

pub mod data;
pub mod params;
pub mod testbeds;
pub mod transformer;

pub use data::{sample_batch, SyntheticData, SyntheticDataConfig, TokenBatch};
pub use params::{BlockRole, ParamBlock, ParamStore};
pub use testbeds::{logistic_testbed, quadratic_testbed, Logistic, Objective, Quadratic};
pub use transformer::{
    build_transformer, forward_loss, forward_loss_with, resume_loss, ForwardOptions, ForwardPass, ModelConfig,
    QkNormImpl, Stage,
};
