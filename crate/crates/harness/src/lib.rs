//! Configuration, orchestration and persistence for `mfbsde` experiments.

// `!(x > 0.0)` guards reject NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod manifest;
pub mod run;

pub use config::ExperimentConfig;
pub use manifest::{emit_plot_data, ResultManifest, Status, Table};
pub use run::{run, Command};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/harness.md")]
mod book_harness {}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("not found: {0}")]
    NotFound(String),
}

impl HarnessError {
    /// 2 for usage and configuration errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 1,
        }
    }
}
