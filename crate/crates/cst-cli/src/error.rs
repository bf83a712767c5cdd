//! Failure categories carrying the process exit code.
//!
//! The contract is stable: 0 success, 2 configuration or usage, 3 I/O,
//! 4 incompatible inputs, 5 numeric failure.

use std::fmt;

use cst_core::autodiff::AutodiffError;
use cst_core::geometry::GeometryError;
use cst_core::operator::OperatorError;
use cst_core::simulate::SimulateError;
use cst_core::solvers::SolverError;
use cst_core::unwavenet::UnwaveError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Incompatible(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Incompatible(_) => 4,
            CliError::Numeric(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Io(m) => write!(f, "i/o: {m}"),
            CliError::Incompatible(m) => write!(f, "incompatible inputs: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<OperatorError> for CliError {
    fn from(e: OperatorError) -> Self {
        match e {
            OperatorError::Io(_) => CliError::Io(e.to_string()),
            OperatorError::ShapeMismatch { .. } | OperatorError::GeometryMismatch(_) => {
                CliError::Incompatible(e.to_string())
            }
            OperatorError::Singular { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::Diverged { .. } => CliError::Numeric(e.to_string()),
            SolverError::Operator(inner) => inner.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<SimulateError> for CliError {
    fn from(e: SimulateError) -> Self {
        match e {
            SimulateError::Io { .. } => CliError::Io(e.to_string()),
            SimulateError::Format { .. } | SimulateError::ShapeMismatch { .. } => {
                CliError::Incompatible(e.to_string())
            }
            SimulateError::Operator(inner) => inner.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<AutodiffError> for CliError {
    fn from(e: AutodiffError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<UnwaveError> for CliError {
    fn from(e: UnwaveError) -> Self {
        match e {
            UnwaveError::Config(_) | UnwaveError::Json(_) => CliError::Config(e.to_string()),
            UnwaveError::Shape(_) | UnwaveError::Format { .. } => {
                CliError::Incompatible(e.to_string())
            }
            UnwaveError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            UnwaveError::Io { .. } => CliError::Io(e.to_string()),
            UnwaveError::Autodiff(inner) => inner.into(),
            UnwaveError::Operator(inner) => inner.into(),
            UnwaveError::Solver(inner) => inner.into(),
            UnwaveError::Simulate(inner) => inner.into(),
        }
    }
}

/// Wraps an I/O error with the path it happened on.
pub fn io_ctx(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}
