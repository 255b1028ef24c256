//! Quasipotential landscapes, most probable transition paths, and noise-driven
//! exit times for two-dimensional stochastic systems.
//!
//! The central object is the orthogonal decomposition of a drift field `b`
//! under state-dependent diffusion `a(x) = sigma(x) sigma(x)^T`:
//!
//! ```text
//!     b(x) = -1/2 a(x) grad V(x) + l(x),      <grad V(x), l(x)> = 0
//! ```
//!
//! where `V` is the quasipotential: the leading-order exponent governing both
//! stationary densities and mean first exit times in the small-noise limit.
//! A small neural surrogate is trained so that the decomposition residual
//! vanishes on a basin of attraction; everything downstream — transition
//! paths, exit locations, exit-time prefactors — is computed from `V` and the
//! rotational remainder `l`.
//!
//! Module map:
//!
//! - [`linalg`]: fixed-size 2-D vectors/matrices, small solvers, RK4.
//! - [`model`]: the vegetation–water SDE and an exactly solvable benchmark.
//! - [`dynsys`]: equilibria, bifurcations, separatrices, basin tests.
//! - [`adnet`]: the network and its exact derivatives (values, input
//!   gradients, parameter gradients of the training loss).
//! - [`trainer`]: collocation sampling, Adam, checkpointing.
//! - [`landscape`]: the trained decomposition as a queryable object, plus
//!   curvature data at equilibria from Lyapunov/Riccati equations.
//! - [`paths`]: most probable transition paths by fluctuation-field descent
//!   and by Hamiltonian shooting.
//! - [`exit`]: asymptotic mean first exit times with prefactors, for both
//!   smooth-crossing and saddle-crossing boundaries.
//! - [`mc`]: Euler–Maruyama Monte Carlo for direct exit-time estimates.
//!
//! All stochastic components take explicit seeds and produce bit-identical
//! results for a fixed seed, independent of thread count.

pub mod adnet;
pub mod dynsys;
pub mod exit;
pub mod landscape;
pub mod linalg;
pub mod mc;
pub mod model;
pub mod paths;
pub mod trainer;

pub use linalg::{Mat2, StateVec};
pub use model::{NoiseCase, NoiseParams, System, SystemParams};
