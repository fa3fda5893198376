//! Simulation and exact small-instance analysis of a single-server lossy
//! polling system run by a fair opportunistic scheduler.
//!
//! The server moves between `m` finite-buffer queues. At every decision epoch
//! it sees the queue contents and a good/bad condition for each route, scores
//! each station with an alpha-fair index built from anticipated gains and
//! losses, and moves to the best one. The crate provides:
//!
//! * [`model`]: configuration, state and outcome types plus load diagnostics;
//! * [`kernels`]: reproducible random streams and the arrival/overflow bookkeeping;
//! * [`quadrature`] and [`anticipation`]: expected gains and losses by quadrature;
//! * [`scheduler`]: the fair index, dispatch rule and average-utility tracking,
//!   and a wireless alpha-fair baseline;
//! * [`sim`] and [`metrics`]: the epoch loop, replications and fairness metrics;
//! * [`analyzer`]: the frozen Markov chain, its stationary law and fixed points;
//! * [`harness`]: config files, sweeps and CSV output used by the CLI.

pub mod analyzer;
pub mod anticipation;
pub mod config_file;
mod error;
pub mod harness;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod quadrature;
pub mod scheduler;
pub mod sim;

pub use error::{Error, Result};
pub use model::{
    validate_config, Condition, Decision, Diagnostics, EpochOutcome, SystemConfig, SystemState,
    TravelLaw,
};
