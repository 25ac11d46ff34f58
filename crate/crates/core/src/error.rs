//! Error types shared by the solver modules.

use thiserror::Error;

/// Errors raised by grid, kernel, functional and solver operations.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A field with zero (or negative) total mass cannot be normalized.
    #[error("field has zero mass, cannot normalize")]
    ZeroMass,

    /// Two fields (or a kernel and a field) live on different grids.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// Grid or time-axis parameters outside the supported range.
    #[error("invalid discretization: {0}")]
    InvalidDiscretization(String),

    /// Every off-diagonal kernel entry underflowed to zero; ε·τ is too small
    /// for this resolution in linear arithmetic.
    #[error("degenerate heat kernel: all off-diagonal entries underflow (eps*tau = {eps_tau:e}); use log-domain application or a coarser step")]
    DegenerateKernel { eps_tau: f64 },

    /// A fixed-marginal target has mass where the reference chain cannot reach.
    #[error("infeasible constraint: {0}")]
    Infeasible(String),

    /// A nonlocal cost was passed directly to a closed-form dual update; it
    /// must go through `linearize_nonlocal` first.
    #[error("nonlocal cost has no closed-form dual update; linearize it first")]
    NonConvexDirect,

    /// Solver state messages do not reflect the current potentials.
    #[error("solver messages are stale; finish the sweep or rebuild the state")]
    StaleMessages,

    /// A schedule failed structural validation.
    #[error("invalid cost schedule: {0}")]
    InvalidSchedule(String),
}
