//! Neural value-function solver for deterministic finite-horizon optimal
//! control of multi-agent systems.
//!
//! The value function `Φ(x, t; θ)` is a small residual network plus a
//! low-rank quadratic. Controls are obtained in feedback form from `∇ₓΦ`,
//! trajectories are integrated with fixed-step RK4, and `θ` is trained by
//! differentiating through the discretized rollouts, with penalties on the
//! residual of the Hamilton-Jacobi-Bellman equation.

pub mod baseline;
pub mod diffengine;
pub mod error;
pub mod evaluation;
pub mod integrator;
pub mod io;
pub mod linalg;
pub mod problems;
pub mod training;
pub mod valuefn;

pub use error::{Error, Result};
