//! Simulation and gradient-based parameter identification for semi-explicit
//! DAEs with state-dependent events and resets.

pub mod adjoint;
pub mod algebraic;
pub mod benchmarks;
pub mod dual;
pub mod error;
pub mod forward;
pub mod integrator;
pub mod model;
pub mod optim;
pub mod simulate;
pub mod targets;
pub mod testmodels;
pub mod trajectory;

pub use error::{Error, Result};
