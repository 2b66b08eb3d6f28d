//! Energy-aware quantized federated learning: stochastic quantization,
//! device energy models, convergence-driven round counts and a joint
//! solver for local steps, bit-widths and bandwidth.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod convergence;
pub mod error;
pub mod flsim;
pub mod harness;
pub mod models;
pub mod numerics;
pub mod quantizer;
pub mod rng;
pub mod scalar;
pub mod solver;

pub use error::{FwqError, Result};
pub use scalar::Scalar;

pub type QuantScheme64 = quantizer::QuantScheme<f64>;
pub type QuantScheme32 = quantizer::QuantScheme<f32>;
pub type DeviceProfile64 = models::DeviceProfile<f64>;
pub type NetworkConfig64 = models::NetworkConfig<f64>;
pub type ConvergenceCoeffs64 = convergence::ConvergenceCoeffs<f64>;
pub type ConvergenceCoeffs32 = convergence::ConvergenceCoeffs<f32>;
pub type Scenario64 = solver::Scenario<f64>;
pub type Scenario32 = solver::Scenario<f32>;
pub type Allocation64 = solver::Allocation<f64>;
pub type Allocation32 = solver::Allocation<f32>;
pub type SimConfig64 = flsim::SimConfig<f64>;
pub type SimConfig32 = flsim::SimConfig<f32>;
pub type TrainingTrace64 = flsim::TrainingTrace<f64>;
pub type TrainingTrace32 = flsim::TrainingTrace<f32>;
pub type ScenarioTemplate64 = harness::ScenarioTemplate<f64>;
pub type SweepSpec64 = harness::SweepSpec<f64>;
