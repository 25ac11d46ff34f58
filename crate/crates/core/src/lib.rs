//! Multi-marginal Schrödinger-bridge solver for second-order variational
//! mean-field games on periodic grids.
//!
//! The time-discretized game is solved as an entropy minimization over
//! couplings of `N + 1` marginals relative to a Markov chain of heat kernels.
//! Sinkhorn-style block ascent on the dual gives closed-form scaling updates
//! for planning constraints, hard congestion, (moving) obstacle potentials
//! and semi-implicitly linearized nonlocal interactions; kernel applications
//! factorize into one-dimensional convolutions per dimension.
//!
//! The numerical core (`grid`, `kernel`, `functionals`, `sinkhorn`,
//! `diagnostics`) is generic over the floating-point scalar through
//! [`Scalar`]; concrete `f64` aliases are exported at the crate root.
//! Scenario construction, file output and the CLI work in `f64`.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod functionals;
pub mod grid;
pub mod kernel;
pub mod output;
pub mod scalar;
pub mod scenario;
pub mod sinkhorn;

pub use error::CoreError;
pub use scalar::Scalar;

/// Concrete `f64` aliases for the generic core types.
pub type Field64 = grid::Field<f64>;
pub type Field32 = grid::Field<f32>;
pub type Kernel64 = kernel::SeparableKernel<f64>;
pub type CostSpec64 = functionals::CostSpec<f64>;
pub type Schedule64 = functionals::CostSchedule<f64>;
pub type SolverState64 = sinkhorn::SolverState<f64>;
pub type SolveOutcome64 = sinkhorn::SolveOutcome<f64>;
