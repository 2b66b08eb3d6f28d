//! Energy and latency models for on-device GPU training and OFDMA uplink
//! transmission. All quantities are SI: Hz, W, s, J, bits.

use serde::{Deserialize, Serialize};

use crate::error::{FwqError, Result};
use crate::scalar::Scalar;

/// DVFS-style GPU power/latency description of one device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpuProfile<T> {
    /// Power independent of voltage/frequency scaling (W).
    pub p_g0: T,
    /// Memory power coefficient (W/Hz).
    pub zeta_mem: T,
    /// Core power coefficient (W/(V^2 Hz)).
    pub zeta_core: T,
    pub v_core: T,
    pub f_core: T,
    pub f_mem: T,
    /// Task-independent latency per step (s).
    pub t0: T,
    /// Memory-access cycles per mini-batch.
    pub theta_mem: T,
    /// Compute cycles per mini-batch.
    pub theta_core: T,
    pub c1_slope: T,
    pub c1_intercept: T,
    pub c2_slope: T,
    pub c2_intercept: T,
}

impl<T: Scalar> GpuProfile<T> {
    /// Memory-cycle scaling `c1(q)`.
    pub fn c1(&self, q: T) -> T {
        self.c1_slope * q + self.c1_intercept
    }

    /// Compute-cycle scaling `c2(q)`.
    pub fn c2(&self, q: T) -> T {
        self.c2_slope * q + self.c2_intercept
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("p_g0", self.p_g0),
            ("zeta_mem", self.zeta_mem),
            ("zeta_core", self.zeta_core),
            ("v_core", self.v_core),
            ("t0", self.t0),
            ("theta_mem", self.theta_mem),
            ("theta_core", self.theta_core),
            ("c1_slope", self.c1_slope),
            ("c1_intercept", self.c1_intercept),
            ("c2_slope", self.c2_slope),
            ("c2_intercept", self.c2_intercept),
        ];
        for (name, v) in fields {
            if !(v >= T::zero()) || !v.is_finite() {
                return Err(FwqError::InvalidInput(format!("gpu.{name} must be >= 0, got {v}")));
            }
        }
        if !(self.f_core > T::zero() && self.f_mem > T::zero()) {
            return Err(FwqError::InvalidInput("gpu frequencies must be positive".into()));
        }
        for q in [T::lit(2.0), T::lit(32.0)] {
            if !(self.c1(q) > T::zero() && self.c2(q) > T::zero()) {
                return Err(FwqError::InvalidInput(format!(
                    "cycle scalings must be positive on [2, 32] (q = {q})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioProfile<T> {
    /// Transmit power (W).
    pub p_cm: T,
    /// Average linear channel gain.
    pub h: T,
}

/// Logarithm used by the rate formula. Natural log is the default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateLog {
    #[default]
    Ln,
    Log2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig<T> {
    /// Total uplink bandwidth (Hz).
    pub b_max: T,
    /// Noise power (W).
    pub n0: T,
    /// Uplink payload per round (bits), identical for every device.
    pub d_g: T,
    #[serde(default)]
    pub rate_log: RateLog,
}

impl<T: Scalar> NetworkConfig<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("b_max", self.b_max), ("n0", self.n0), ("d_g", self.d_g)] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(FwqError::InvalidInput(format!("network.{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile<T> {
    pub id: String,
    /// Data weight `pi_i = |D_i| / sum |D_j|`.
    pub pi_weight: T,
    pub gpu: GpuProfile<T>,
    pub radio: RadioProfile<T>,
    /// Memory capacity (MB).
    pub mem_capacity: T,
    /// Full-precision model footprint (MB).
    pub model_size: T,
}

impl<T: Scalar> DeviceProfile<T> {
    pub fn validate(&self) -> Result<()> {
        self.gpu.validate()?;
        if !(self.pi_weight > T::zero() && self.pi_weight <= T::one()) {
            return Err(FwqError::InvalidInput(format!(
                "device {}: pi_weight must lie in (0, 1]",
                self.id
            )));
        }
        if !(self.radio.p_cm > T::zero()) || !(self.radio.h >= T::zero()) {
            return Err(FwqError::InvalidInput(format!(
                "device {}: transmit power must be > 0 and gain >= 0",
                self.id
            )));
        }
        if !(self.mem_capacity > T::zero() && self.model_size > T::zero()) {
            return Err(FwqError::InvalidInput(format!(
                "device {}: memory capacity and model size must be > 0",
                self.id
            )));
        }
        Ok(())
    }

    /// Whether `c3(q) * U_i <= C_i`.
    pub fn fits_memory(&self, q: T) -> bool {
        memory_ratio(q) * self.model_size <= self.mem_capacity * (T::one() + T::lit(1e-12))
    }

    /// Largest real bit-width allowed by memory, `32 * C_i / U_i`.
    pub fn max_memory_bits(&self) -> T {
        T::lit(32.0) * self.mem_capacity / self.model_size
    }
}

/// Runtime GPU power `p_g0 + zeta_mem f_mem + zeta_core V^2 f_core`.
pub fn gpu_power<T: Scalar>(gpu: &GpuProfile<T>) -> T {
    gpu.p_g0 + gpu.zeta_mem * gpu.f_mem + gpu.zeta_core * gpu.v_core * gpu.v_core * gpu.f_core
}

/// Time of one mini-batch step at bit-width `q`.
pub fn gpu_time<T: Scalar>(gpu: &GpuProfile<T>, q: T) -> T {
    gpu.t0 + gpu.c1(q) * gpu.theta_mem / gpu.f_mem + gpu.c2(q) * gpu.theta_core / gpu.f_core
}

/// Coefficients of the affine step time `T(q) = slope * q + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearTime<T> {
    /// Seconds, `c_i^1`.
    pub intercept: T,
    /// Seconds per bit, `c_i^2`.
    pub slope: T,
}

impl<T: Scalar> LinearTime<T> {
    pub fn at(&self, q: T) -> T {
        self.slope * q + self.intercept
    }
}

pub fn linearize_gpu_time<T: Scalar>(gpu: &GpuProfile<T>) -> LinearTime<T> {
    let mem = gpu.theta_mem / gpu.f_mem;
    let core = gpu.theta_core / gpu.f_core;
    LinearTime {
        intercept: gpu.t0 + gpu.c1_intercept * mem + gpu.c2_intercept * core,
        slope: gpu.c1_slope * mem + gpu.c2_slope * core,
    }
}

/// Energy of `h_steps` local steps at bit-width `q`.
pub fn comp_energy<T: Scalar>(gpu: &GpuProfile<T>, q: T, h_steps: T) -> T {
    h_steps * gpu_power(gpu) * gpu_time(gpu, q)
}

/// `ln(1 + h p / N0)` (or base 2, per the network setting).
pub fn spectral_efficiency<T: Scalar>(radio: &RadioProfile<T>, net: &NetworkConfig<T>) -> Result<T> {
    if !(radio.h > T::zero()) {
        return Err(FwqError::ZeroRate { device: None });
    }
    let snr = radio.h * radio.p_cm / net.n0;
    Ok(match net.rate_log {
        RateLog::Ln => snr.ln_1p(),
        RateLog::Log2 => snr.ln_1p() / T::LN_2(),
    })
}

/// Achievable uplink rate (bit/s) on bandwidth `b`.
pub fn tx_rate<T: Scalar>(b: T, radio: &RadioProfile<T>, net: &NetworkConfig<T>) -> Result<T> {
    Ok(b * spectral_efficiency(radio, net)?)
}

pub fn comm_time<T: Scalar>(b: T, radio: &RadioProfile<T>, net: &NetworkConfig<T>) -> Result<T> {
    Ok(net.d_g / tx_rate(b, radio, net)?)
}

pub fn comm_energy<T: Scalar>(b: T, radio: &RadioProfile<T>, net: &NetworkConfig<T>) -> Result<T> {
    Ok(radio.p_cm * comm_time(b, radio, net)?)
}

/// `alpha_i^1 = D_g / ln(1 + h p / N0)`, so that upload time is `alpha_i^1 / b`.
pub fn alpha1<T: Scalar>(radio: &RadioProfile<T>, net: &NetworkConfig<T>) -> Result<T> {
    Ok(net.d_g / spectral_efficiency(radio, net)?)
}

/// Stored-model ratio `c3(q) = q / 32`.
pub fn memory_ratio<T: Scalar>(q: T) -> T {
    q / T::lit(32.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}
