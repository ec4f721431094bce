use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::model::Violation;
use crate::numerics::NumericsError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("model is invalid: {} violation(s), first: {}", .0.len(), .0.first().map(|v| v.field.as_str()).unwrap_or("-"))]
    Invalid(Vec<Violation>),
    #[error("standing sign assumption fails: {0}")]
    SignCondition(String),
    #[error("{which} is near-singular at t = {time} (smallest eigenvalue {min_eig:e})")]
    Singular { which: &'static str, time: f64, min_eig: f64 },
    #[error("Riccati system is not solvable on [0, T]: solution escapes at t = {time}")]
    BlowUp { time: f64 },
    #[error("solutions live on different time grids")]
    GridMismatch,
    #[error("population size must be at least 1")]
    BadPopulation,
    #[error(transparent)]
    Numerics(NumericsError),
}

impl From<NumericsError> for SolveError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::BlowUp { time } => SolveError::BlowUp { time },
            other => SolveError::Numerics(other),
        }
    }
}

impl SolveError {
    /// Time of the escape when the failure is a blow-up.
    pub fn blow_up_time(&self) -> Option<f64> {
        match self {
            SolveError::BlowUp { time } => Some(*time),
            _ => None,
        }
    }
}
