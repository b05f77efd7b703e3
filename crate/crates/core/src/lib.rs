//! Conservative finite-volume solvers for 1D conservation laws whose
//! numerical flux is a Fourier neural operator.
//!
//! The update is `u_j <- u_j - dt/dx (G(U^l)_j - G(U^r)_j)` where `U^l`,
//! `U^r` are the stencils at the right and left cell interfaces. Mass is
//! conserved exactly for any `G`.

pub mod data;
pub mod diffkernel;
pub mod error;
pub mod eval;
pub mod fno;
pub mod grid;
pub mod rollout;
pub mod schemes;
pub mod train;

pub use error::{Error, Result};
pub use fno::{FnoConfig, FnoParams};
pub use grid::{GridFunction, Stencil, Trajectory};
pub use rollout::{AnalyticFlux, FluxOperator};
pub use schemes::{Equation, Integrator, PhysicalFlux};
