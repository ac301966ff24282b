//! File formats, configuration, synthetic suites and the evaluation pipeline
//! around `facegaze-core`, plus the `facegaze` command-line tool.

// `!(x > 0.0)` deliberately rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod report;
pub mod suite;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use report::EvaluationReport;
