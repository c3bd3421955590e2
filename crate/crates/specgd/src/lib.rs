//! Dataset format, parallel training drivers and the command line for
//! speculative and approximate gradient descent.
//!
//! The math lives in `specgd_core`; this crate adds files, threads and
//! wall-clock time.

#![forbid(unsafe_code)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod files;

pub use specgd_core as core;

pub use data::{
    convert, generate, BlockReader, Dataset, DatasetHeader, GenSpec, Partitioning, TextFormat,
};
pub use engine::{
    train, Approx, BgdOutcome, BgdState, Discipline, Engine, IgdOutcome, IgdState,
    IterationMetrics, LineSearchConfig, LineSearchOutcome, Method, Mode, StepPolicy, TrainConfig,
    TrainOutcome,
};
pub use error::{Error, Result};
