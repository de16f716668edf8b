//! Staged experiment pipeline: synthesize a clinical corpus, train private
//! and non-private generators, and measure what their clones are worth.

use std::io;
use std::path::PathBuf;

use dataclone_core::corpus::CorpusError;
use dataclone_core::dp::DpError;
use dataclone_core::evalsuite::EvalError;
use dataclone_core::instruct::InstructError;
use dataclone_core::jsonl::JsonlError;
use dataclone_core::model::ModelError;
use thiserror::Error;

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, Row, Stage};
pub use manifest::{Manifest, StageRecord};
pub use pipeline::{run_all, run_stage};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("stage `{0}` has not completed; run it first")]
    MissingDependency(Stage),
    #[error("results incomplete; missing: {}", missing.join(", "))]
    Incomplete {
        written: Vec<String>,
        missing: Vec<String>,
    },
    #[error("output directory is locked by another run ({})", .0.display())]
    Locked(PathBuf),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 2 for configuration, 3 for missing inputs, 4 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::MissingDependency(_) | CliError::Incomplete { .. } => 3,
            CliError::Locked(_) | CliError::Runtime(_) => 4,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(io::Error, CorpusError, InstructError, ModelError, DpError, EvalError, JsonlError);
