//! Branching Brownian motion below moving barriers: simulation, Bessel-3
//! spine estimators for first and second moments, and experiment drivers.

pub mod barriers;
pub mod bbm;
pub mod bessel;
pub mod error;
pub mod experiments;
pub mod quadrature;
pub mod spine;
pub mod stats;
pub mod stochastic;

pub use error::{Error, Result};
