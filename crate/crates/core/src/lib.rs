//! Distributed composite optimization: a master averages locally
//! variance-reduced worker updates that are pulled toward the current anchor
//! point, plus sequential SVRG and mini-batch distributed SVRG baselines,
//! theory diagnostics and exact communication accounting.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod data;
pub mod diagnostics;
pub mod engine;
pub mod experiment;
pub mod model;
pub mod protocol;

pub use data::{Dataset, Partition, PartitionStrategy};
pub use engine::{Combine, HyperParams, RunMetrics};
pub use model::{LabeledInstance, LossKind, ModelVector, SmoothnessConstants};
