//! Command errors and their process exit codes.

use mflq_core::costs::CostError;
use mflq_core::error::SolveError;
use mflq_core::simulator::SimError;
use thiserror::Error;

use crate::model_file::ModelFileError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_NOT_SOLVABLE: i32 = 4;
pub const EXIT_DIVERGED: i32 = 5;
pub const EXIT_MISMATCH: i32 = 6;

/// Failure of a pipeline; `stage` names the step that failed.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("[{stage}] parse error: {message}")]
    Parse { stage: &'static str, message: String },
    #[error("[{stage}] invalid input: {message}")]
    Validation { stage: &'static str, message: String },
    #[error("[{stage}] not solvable: {message}")]
    NotSolvable { stage: &'static str, message: String, blow_up_time: Option<f64> },
    #[error("[{stage}] {message}")]
    Diverged { stage: &'static str, message: String },
    #[error("[rerun] outputs differ from the manifest: {0}")]
    Mismatch(String),
    #[error("[{stage}] {message}")]
    Io { stage: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } => EXIT_PARSE,
            CliError::Validation { .. } => EXIT_VALIDATION,
            CliError::NotSolvable { .. } => EXIT_NOT_SOLVABLE,
            CliError::Diverged { .. } => EXIT_DIVERGED,
            CliError::Mismatch(_) => EXIT_MISMATCH,
            CliError::Io { .. } => EXIT_IO,
        }
    }

    pub fn io(stage: &'static str, e: impl std::fmt::Display) -> Self {
        CliError::Io { stage, message: e.to_string() }
    }

    pub fn validation(stage: &'static str, message: impl Into<String>) -> Self {
        CliError::Validation { stage, message: message.into() }
    }

    pub fn from_model(e: ModelFileError) -> Self {
        match e {
            ModelFileError::Io { .. } => CliError::io("model", e),
            ModelFileError::Parse { .. } => CliError::Parse { stage: "model", message: e.to_string() },
            ModelFileError::Invalid { .. } => CliError::validation("model", e.to_string()),
        }
    }

    pub fn from_solve(stage: &'static str, e: SolveError) -> Self {
        match e {
            SolveError::Invalid(_) | SolveError::BadPopulation => CliError::validation(stage, e.to_string()),
            other => CliError::NotSolvable { stage, blow_up_time: other.blow_up_time(), message: other.to_string() },
        }
    }

    pub fn from_sim(stage: &'static str, e: SimError) -> Self {
        match e {
            SimError::Config(_) => CliError::validation(stage, e.to_string()),
            SimError::Diverged { .. } => CliError::Diverged { stage, message: e.to_string() },
            SimError::Policy(_) => CliError::io(stage, e),
        }
    }

    pub fn from_cost(stage: &'static str, e: CostError) -> Self {
        match e {
            CostError::Solve(s) => CliError::from_solve(stage, s),
            CostError::Sim(s) => CliError::from_sim(stage, s),
            CostError::TooFewPopulations(_) => CliError::validation(stage, e.to_string()),
            CostError::Numerics(_) => CliError::NotSolvable { stage, message: e.to_string(), blow_up_time: None },
            other => CliError::io(stage, other),
        }
    }
}
