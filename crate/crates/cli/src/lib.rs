//! Experiment harness: data generation, training, inference, evaluation and
//! heatmap export for the latent-dynamics reduced-order model.

// Domain checks are written `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
