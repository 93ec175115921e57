//! Simulator for nested decentralized gradient methods.
//!
//! `n` agents each hold a strongly convex local objective and cooperatively
//! minimize the sum over a connected network. Each NEAR-DGD iteration runs
//! `t_g(k)` local gradient steps followed by `t_c(k)` rounds of neighbor
//! averaging with a doubly-stochastic matrix `W`. The crate provides:
//!
//! - [`graph`]: topologies, Metropolis/uniform consensus matrices, mixing.
//! - [`objective`]: the seeded quadratic benchmark and exact optima.
//! - [`solver`]: schedules, the NEAR-DGD iteration and the DGD baseline.
//! - [`theory`]: every constant and bound of the convergence analysis,
//!   checked against measured trajectories.
//! - [`harness`]: variant notation, cost accounting, sweeps, CSV export.
//! - [`cli`]: configuration files and the `neardgd` command implementations.

pub mod cli;
pub mod error;
pub mod graph;
pub mod harness;
pub mod objective;
pub mod portable;
pub mod solver;
pub mod theory;

pub use error::{Error, Result};
