//! Simulation of open-system dynamics generated by time-local master
//! equations whose decay rates may turn temporarily negative.
//!
//! * [`rates`]: piecewise-constant rate functions with exact integrals.
//! * [`quantum`]: states, channels and the time-local generator.
//! * [`integrator`]: RK4 propagation, closed-form two-level solution,
//!   dynamical maps and the Choi-matrix CP audit.
//! * [`mcwf`]: Monte Carlo wave-function unraveling for non-negative rates.
//! * [`nmqj`]: non-Markovian jump unraveling with reversed jumps.
//! * [`classical`]: rate equations, ring and two-state chains, ODE and
//!   count-ensemble backends.

pub mod classical;
pub mod error;
pub mod integrator;
pub mod mcwf;
pub mod nmqj;
pub mod quantum;
pub mod rates;
pub mod rng;

pub use classical::{ClassicalEnsemble, ProbabilityVector, RateMatrixSpec};
pub use error::{Error, Result};
pub use integrator::{ChoiReport, PropagationResult};
pub use quantum::{Channel, DensityMatrix, StateVector, TimeLocalGenerator, C64};
pub use rates::RateFunction;
