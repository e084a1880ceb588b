use thiserror::Error;

/// Errors reported by the solvers and oracles.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("gain bracket is numerically singular at t = {t} (condition number {cond:.3e})")]
    SingularGain { t: f64, cond: f64 },

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("grid solver requires a control-free diffusion coefficient")]
    NotControlFreeDiffusion,

    #[error("missing or invalid boundary rule: {0}")]
    BoundarySpec(String),

    #[error("path {path} blew up at step {step} (|X| = {value:.3e})")]
    Blowup { path: usize, step: usize, value: f64 },

    #[error("kernel lower rate is unbounded: sampled sup grew from {coarse:.3e} to {fine:.3e} under refinement")]
    UnboundedKernel { coarse: f64, fine: f64 },

    #[error("expression error: {0}")]
    Expr(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
