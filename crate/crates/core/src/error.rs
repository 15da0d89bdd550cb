use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("integration produced a non-finite value at t = {time}")]
    NonFinite { time: f64 },

    #[error("{what} escaped to infinity at t = {time}")]
    Blowup { what: String, time: f64 },

    #[error("eigensolver failure: {0}")]
    Eigen(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("contraction constant {c_xi} >= 1; pass `force` to iterate anyway")]
    NotContractive { c_xi: f64 },

    #[error("fixed-point iteration did not converge after {iterations} iterations (last sup-change {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("divergent cost: {0}")]
    DivergentCost(String),

    #[error("simulation produced a non-finite state at path {path}, agent {agent}, step {step}")]
    Simulation { path: usize, agent: usize, step: usize },

    #[error("exponentiated cost overflows: largest exponent {max_exponent}")]
    CostOverflow { max_exponent: f64 },
}
