//! Aggregator-side model of a V2G fleet, a stealthy measurement-manipulation
//! attack on it, the detectors it must evade and the grid response.
//!
//! The numerical kernels are generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix the precision the simulation harness runs at.

pub mod agc;
pub mod attack;
pub mod detector;
pub mod essm;
pub mod fleet;
pub mod harness;
pub mod optkit;
pub mod scalar;

pub type Real = f64;
pub type StateVector = essm::StateVector<Real>;
pub type TransitionMatrix = essm::TransitionMatrix<Real>;
pub type FeedbackSignal = essm::FeedbackSignal<Real>;
pub type FlexibilityReport = essm::FlexibilityReport<Real>;
pub type LinearProgram = optkit::LinearProgram<Real>;
pub type TransportationProblem = optkit::TransportationProblem<Real>;
pub type AgcState = agc::AgcState<Real>;
pub type Matrix = scalar::Dense<Real>;
