use thiserror::Error;

pub type Result<T, E = FwqError> = std::result::Result<T, E>;

/// Errors raised by the library. Numeric payloads are carried as `f64`
/// regardless of the scalar type the caller works in.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum FwqError {
    #[error("invalid bit-width {0}: must lie in [2, 32]")]
    InvalidBitWidth(u32),
    #[error("value {value} lies outside the quantization range [-{scale}, {scale}]")]
    OutOfRange { value: f64, scale: f64 },
    #[error("invalid quantization scale {0}: must be positive and finite")]
    InvalidScale(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("zero channel gain: transmission rate is zero (device {device:?})")]
    ZeroRate { device: Option<usize> },
    #[error("quantization error {eps_q} is not below the convergence target {eps}")]
    TargetInfeasible { eps_q: f64, eps: f64 },
    #[error("deadline infeasible: {0}")]
    DeadlineInfeasible(String),
    #[error("bandwidth infeasible: deadline floors need {required} Hz but only {available} Hz exist")]
    BandwidthInfeasible { required: f64, available: f64 },
    #[error("quantization error budget {budget} is below the best achievable {achievable}")]
    QuantErrorInfeasible { budget: f64, achievable: f64 },
    #[error("no feasible allocation: {0}")]
    NoFeasibleAllocation(String),
    #[error("invalid multiplier: {0}")]
    InvalidMultiplier(String),
    #[error("memory infeasible: device {device} cannot store the model at any admissible bit-width")]
    MemoryInfeasible { device: usize },
    #[error("underdetermined fit: {0}")]
    UnderdeterminedFit(String),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("training diverged at round {round}: loss {loss}")]
    Divergence { round: usize, loss: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}
