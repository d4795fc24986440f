//! Stability-constrained AC optimal power flow learning.
//!
//! The crate is organised around the pipeline it implements:
//! [`grid`] holds network data, [`acopf`] the steady-state equations and a
//! reference solver, [`dynamics`] the classical machine model and ODE
//! integrators, [`node`] neural-ODE surrogates of machine trajectories,
//! [`dynopf`] the optimisation proxy and its joint training loop, and
//! [`eval`] the metrics used to compare trained models.

// Negated comparisons are used on purpose so that NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acopf;
pub mod config;
pub mod dynamics;
pub mod dynopf;
pub mod eval;
pub mod grid;
pub mod node;
mod par;

use dynopf_neural::NeuralError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("case syntax error at line {line}, column {column}: {message}")]
    CaseSyntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid case: {0}")]
    InvalidCase(String),
    #[error("unknown bundled case `{0}`")]
    UnknownCase(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("no feasible operating point found after {attempts} attempts")]
    Infeasible { attempts: usize },
    #[error("solver did not converge (best equality residual {residual:e})")]
    NoConvergence {
        best: Box<acopf::DispatchPoint>,
        residual: f64,
    },
    #[error("terminal voltage magnitude must be positive, got {0}")]
    DegenerateVoltage(f64),
    #[error("integrator exceeded {max_steps} steps at t = {t}")]
    StepLimit { max_steps: usize, t: f64 },
    #[error("state became non-finite at t = {t}")]
    NonFinite { t: f64 },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("reference objective is zero; relative gap undefined")]
    ZeroReferenceObjective,
    #[error("malformed data file: {0}")]
    Format(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), CoreError> {
    if expected == got {
        Ok(())
    } else {
        Err(CoreError::Dimension {
            what,
            expected,
            got,
        })
    }
}
