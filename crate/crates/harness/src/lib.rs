//! Training, evaluation and reporting for retinotopic and causal-regularized
//! defenses on the CToy dataset.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod eval;
pub mod report;
pub mod train;

pub use config::{DefenseMode, ExperimentConfig};
