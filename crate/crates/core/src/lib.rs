//! Stability-certified reinforcement learning for distribution-grid voltage
//! control.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`]: radial feeder model, LinDistFlow `R`/`X` sensitivities, linear dynamics.
//! * [`powerflow`]: nonlinear DistFlow (backward/forward sweep) solvers.
//! * [`policy`]: monotone stacked-ReLU controllers and the linear droop baseline.
//! * [`lyapunov`]: stability certificates and closed-loop decrease checks.
//! * [`env`]: quasi-static closed-loop simulator over either model.
//! * [`rl`]: per-bus DDPG with monotone actors.
//! * [`scenario`]: disturbance scenarios and load/PV time series.
//! * [`eval`]: recovery/effort metrics, comparison tables, report emission.

pub mod env;
pub mod eval;
pub mod grid;
pub mod lyapunov;
pub mod policy;
pub mod powerflow;
pub mod rl;
pub mod scenario;

pub use grid::{BusId, GridMatrices, RadialNetwork};
