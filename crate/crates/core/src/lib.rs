//! Dynamic survival prediction from longitudinal covariates: landmarking,
//! per-covariate linear mixed models, penalized Cox regression on predicted
//! random effects, and bootstrap optimism correction of predictive
//! performance.

pub mod bench;
pub mod bundle;
pub mod cbocp;
pub mod cli;
pub mod cox;
pub mod data;
pub mod lmm;
pub mod metrics;
mod optim;
pub mod parallel;
pub mod pipeline;
pub mod sim;
pub mod stepfn;

pub use data::{Dataset, Schema, SubjectId};
pub use stepfn::StepFunction;
