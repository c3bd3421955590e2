//! Core of the speculative / approximate gradient descent engine.
//!
//! Everything here is `no_std` with `alloc`: loss and regularizer math,
//! online-aggregation estimators, stopping and pruning rules, step-size
//! distributions, and the per-block kernels the drivers in the `specgd`
//! crate fan out over worker threads.

#![no_std]
#![forbid(unsafe_code)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod estimator;
pub mod kernel;
pub mod schedule;
pub mod stepsize;
pub mod stopping;
pub mod task;
pub mod vecmath;

pub use error::{Error, Result};
pub use estimator::{z_score, Accumulator, EstimateReport, VectorAccumulator};
pub use kernel::{BlockView, CandidateStats, GroupStepper, StepLine};
pub use schedule::CheckSchedule;
pub use stepsize::{
    bayes_update, bayes_update_2d, sample_steps, SpeculationController, StepBatchDistribution,
    StepDistribution,
};
pub use stopping::{
    stop_combined, stop_gradient, stop_igd_loss, stop_loss, Decision, PruneRules, PruneVerdict,
    StoppingConfig,
};
pub use task::{Example, ExampleRef, LossFamily, Model, Regularizer, TaskSpec};
