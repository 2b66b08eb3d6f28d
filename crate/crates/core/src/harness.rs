//! Scenario generation, baseline strategies and parameter sweeps.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convergence::ConvergenceCoeffs;
use crate::error::{FwqError, Result};
use crate::models::{dbm_to_watts, DeviceProfile, GpuProfile, NetworkConfig, RadioProfile, RateLog};
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::solver::{iterate, optimize_given_q, Allocation, Scenario};

/// Capacity offsets of the four device groups, in units of `L` MB.
pub const CAPACITY_OFFSETS: [f64; 4] = [0.0, 50.0, 150.0, 200.0];

/// Everything needed to turn `(n, L, seed)` into a [`Scenario`].
/// Units are SI except capacities and model size (MB).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioTemplate<T> {
    pub net: NetworkConfig<T>,
    pub coeffs: ConvergenceCoeffs<T>,
    pub t_max: T,
    pub q_set: Vec<u32>,
    /// GPU constants shared by all devices; `f_core` and `f_mem` are redrawn.
    pub gpu: GpuProfile<T>,
    pub f_core_choices: Vec<T>,
    pub f_mem_choices: Vec<T>,
    pub tx_power_dbm_choices: Vec<f64>,
    pub path_loss: T,
    pub min_capacity_mb: T,
    pub model_size_mb: T,
}

impl<T: Scalar> ScenarioTemplate<T> {
    /// Defaults modelled on a ten-device edge deployment. `s_scale` is set
    /// so that quantization error and compute energy trade off (mixed
    /// bit-widths are optimal for some draws); the deadline is slack.
    pub fn reference() -> Self {
        let l = |x: f64| T::lit(x);
        Self {
            net: NetworkConfig {
                b_max: l(100e6),
                n0: l(dbm_to_watts(-174.0)),
                d_g: l(16.0 * 11.7e6),
                rate_log: RateLog::Ln,
            },
            coeffs: ConvergenceCoeffs {
                a1: l(13.765),
                a2: l(1.023),
                a3: l(0.0435),
                eps: l(0.1),
                m_batch: 32,
                s_scale: l(300.0),
            },
            t_max: l(3600.0),
            q_set: vec![8, 16, 32],
            gpu: GpuProfile {
                p_g0: l(2.0),
                zeta_mem: l(5e-10),
                zeta_core: l(2e-10),
                v_core: l(0.9),
                f_core: l(1.1e9),
                f_mem: l(1.5e9),
                t0: l(0.01),
                theta_mem: l(1.0e9),
                theta_core: l(1.0e8),
                c1_slope: l(7.12e-3),
                c1_intercept: l(0.274),
                c2_slope: l(4.24e-4),
                c2_intercept: l(1.035),
            },
            f_core_choices: [1050e6, 1100e6, 1150e6, 1200e6].map(l).to_vec(),
            f_mem_choices: [1450e6, 1500e6, 1550e6, 1600e6].map(l).to_vec(),
            tx_power_dbm_choices: vec![19.0, 20.0, 21.0, 22.0, 23.0],
            path_loss: l(1e-3),
            min_capacity_mb: l(1800.0),
            model_size_mb: l(3000.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.f_core_choices.is_empty() || self.f_mem_choices.is_empty() || self.tx_power_dbm_choices.is_empty() {
            return Err(FwqError::InvalidInput("frequency and power choice lists must be non-empty".into()));
        }
        if !(self.path_loss > T::zero()) || !(self.min_capacity_mb > T::zero()) || !(self.model_size_mb > T::zero()) {
            return Err(FwqError::InvalidInput("path_loss, min_capacity_mb and model_size_mb must be > 0".into()));
        }
        self.coeffs.validate()
    }

    /// Scenario with `n` devices at heterogeneity `l`.
    pub fn scenario(&self, n: usize, l: T, seed: u64) -> Result<Scenario<T>> {
        self.validate()?;
        let sc = Scenario {
            devices: gen_devices(self, n, l, seed)?,
            net: self.net,
            coeffs: self.coeffs,
            t_max: self.t_max,
            q_set: self.q_set.clone(),
        };
        sc.validate()?;
        Ok(sc)
    }
}

/// Capacity group of device `i` out of `n` (contiguous quarters).
pub fn group_of(i: usize, n: usize) -> usize {
    (i * CAPACITY_OFFSETS.len() / n.max(1)).min(CAPACITY_OFFSETS.len() - 1)
}

/// Draws `n` devices. Per-device randomness comes from the `devices`
/// sub-stream indexed by device, so changing `l` changes capacities only.
pub fn gen_devices<T: Scalar>(tpl: &ScenarioTemplate<T>, n: usize, l: T, seed: u64) -> Result<Vec<DeviceProfile<T>>> {
    if n == 0 {
        return Err(FwqError::InvalidInput("need at least one device".into()));
    }
    if !(l >= T::zero()) {
        return Err(FwqError::InvalidInput(format!("heterogeneity must be >= 0, got {l}")));
    }
    let pi = T::one() / T::from_usize_lossy(n);
    Ok((0..n)
        .map(|i| {
            let mut rng = substream(seed, "devices", i as u64);
            let dbm = pick(&tpl.tx_power_dbm_choices, &mut rng);
            let fade: f64 = Exp1.sample(&mut rng);
            let f_core = pick(&tpl.f_core_choices, &mut rng);
            let f_mem = pick(&tpl.f_mem_choices, &mut rng);
            DeviceProfile {
                id: format!("dev{i}"),
                pi_weight: pi,
                gpu: GpuProfile { f_core, f_mem, ..tpl.gpu },
                radio: RadioProfile {
                    p_cm: T::lit(dbm_to_watts(dbm)),
                    h: tpl.path_loss * T::lit(fade),
                },
                mem_capacity: tpl.min_capacity_mb + T::lit(CAPACITY_OFFSETS[group_of(i, n)]) * l,
                model_size: tpl.model_size_mb,
            }
        })
        .collect())
}

fn pick<T: Copy>(xs: &[T], rng: &mut impl Rng) -> T {
    xs[rng.random_range(0..xs.len())]
}

/// Indices of the `ceil(n/4)` devices with the smallest channel gain.
pub fn worst_channel_group<T: Scalar>(devices: &[DeviceProfile<T>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..devices.len()).collect();
    idx.sort_by(|&a, &b| {
        devices[a]
            .radio
            .h
            .partial_cmp(&devices[b].radio.h)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(devices.len().div_ceil(4));
    idx
}

/// Small random scenario for oracle comparisons: `n` devices with random
/// weights, GPU loads, channels and capacities, a wide bit-width set and a
/// random quantization scale so that every constraint can bind.
pub fn toy_scenario<T: Scalar>(n: usize, seed: u64) -> Result<Scenario<T>> {
    let tpl = ScenarioTemplate::<T>::reference();
    let mut rng = substream(seed, "toy", 0);
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let log_uniform = |lo: f64, hi: f64, rng: &mut rand_chacha::ChaCha8Rng| 10f64.powf(rng.random_range(lo.log10()..hi.log10()));
    let mut devices = gen_devices(&tpl, n, T::zero(), seed)?;
    for (d, &w) in devices.iter_mut().zip(&raw) {
        d.pi_weight = T::lit(w / total);
        d.gpu.theta_mem = T::lit(log_uniform(1e8, 1e10, &mut rng));
        d.gpu.theta_core = T::lit(log_uniform(1e8, 1e10, &mut rng));
        d.gpu.c1_slope = T::lit(0.05);
        d.gpu.c2_slope = T::lit(0.02);
        d.model_size = T::lit(100.0);
        // largest storable width between 8 and 32 bits
        d.mem_capacity = T::lit(100.0 * rng.random_range(0.25..1.0));
    }
    let mut coeffs = tpl.coeffs;
    coeffs.s_scale = T::lit(log_uniform(5.0, 500.0, &mut rng));
    let sc = Scenario {
        devices,
        net: tpl.net,
        coeffs,
        t_max: T::lit(1e9),
        q_set: vec![2, 4, 8, 16, 32],
    };
    sc.validate()?;
    Ok(sc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Joint solver over `H`, `eps_q`, per-device `q` and bandwidth.
    Fwq,
    /// One bit-width shared by every device, best over the admissible set.
    UnifiedQ,
    /// Uniformly random memory-feasible bit-width per device.
    RandQ,
    /// `q = 32` everywhere.
    FullPrecision,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Fwq,
        StrategyKind::UnifiedQ,
        StrategyKind::RandQ,
        StrategyKind::FullPrecision,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Fwq => "fwq",
            StrategyKind::UnifiedQ => "unified_q",
            StrategyKind::RandQ => "rand_q",
            StrategyKind::FullPrecision => "full_precision",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = FwqError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| FwqError::InvalidInput(format!("unknown strategy {s:?}")))
    }
}

/// Result of one strategy on one scenario. Infeasibility is data, not an
/// error: `allocation` is `None` and `error` says why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutcome<T> {
    pub strategy: StrategyKind,
    pub allocation: Option<Allocation<T>>,
    pub error: Option<String>,
}

impl<T: Scalar> StrategyOutcome<T> {
    pub fn feasible(&self) -> bool {
        self.allocation.as_ref().is_some_and(|a| a.feasibility.feasible)
    }

    pub fn objective(&self) -> Option<T> {
        self.allocation.as_ref().filter(|a| a.feasibility.feasible).map(|a| a.objective)
    }
}

fn outcome<T: Scalar>(strategy: StrategyKind, r: Result<Allocation<T>>) -> StrategyOutcome<T> {
    match r {
        Ok(a) if a.feasibility.feasible => StrategyOutcome {
            strategy,
            allocation: Some(a),
            error: None,
        },
        Ok(a) => StrategyOutcome {
            strategy,
            error: Some(format!(
                "violates {}",
                a.feasibility.first_violation.clone().unwrap_or_else(|| "a constraint".into())
            )),
            allocation: Some(a),
        },
        Err(e) => StrategyOutcome {
            strategy,
            allocation: None,
            error: Some(e.to_string()),
        },
    }
}

fn memory_feasible_bits<T: Scalar>(sc: &Scenario<T>, i: usize) -> Vec<u32> {
    sc.q_set.iter().copied().filter(|&q| sc.devices[i].fits_memory(T::lit(q as f64))).collect()
}

/// Runs one strategy. `seed` only drives [`StrategyKind::RandQ`].
pub fn run_strategy<T: Scalar>(strategy: StrategyKind, sc: &Scenario<T>, seed: u64) -> StrategyOutcome<T> {
    let n = sc.num_devices();
    let r = match strategy {
        StrategyKind::Fwq => iterate(sc, None),
        StrategyKind::UnifiedQ => {
            let mut best: Option<Allocation<T>> = None;
            let mut last_err = None;
            for &q in &sc.q_set {
                match optimize_given_q(sc, &vec![q; n]) {
                    Ok(a) if a.feasibility.feasible => {
                        if best.as_ref().is_none_or(|b| a.objective < b.objective) {
                            best = Some(a);
                        }
                    }
                    Ok(a) => last_err = Some(FwqError::NoFeasibleAllocation(format!("q = {q}: {:?}", a.feasibility.first_violation))),
                    Err(e) => last_err = Some(e),
                }
            }
            best.ok_or_else(|| last_err.unwrap_or_else(|| FwqError::NoFeasibleAllocation("empty q_set".into())))
        }
        StrategyKind::RandQ => {
            let mut rng = substream(seed, "rand_q", 0);
            let mut q = Vec::with_capacity(n);
            let mut err = None;
            for i in 0..n {
                let opts = memory_feasible_bits(sc, i);
                if opts.is_empty() {
                    err = Some(FwqError::MemoryInfeasible { device: i });
                    break;
                }
                q.push(pick(&opts, &mut rng));
            }
            match err {
                Some(e) => Err(e),
                None => optimize_given_q(sc, &q),
            }
        }
        StrategyKind::FullPrecision => {
            if !sc.q_set.contains(&32) {
                Err(FwqError::InvalidBitWidth(32))
            } else if let Some(i) = (0..n).find(|&i| !sc.devices[i].fits_memory(T::lit(32.0))) {
                Err(FwqError::MemoryInfeasible { device: i })
            } else {
                optimize_given_q(sc, &vec![32; n])
            }
        }
    };
    outcome(strategy, r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    NumDevices,
    Heterogeneity,
    /// Values are total bandwidth in Hz.
    Bandwidth,
}

fn default_n() -> usize {
    10
}

fn default_strategies() -> Vec<StrategyKind> {
    StrategyKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec<T> {
    pub kind: SweepKind,
    pub values: Vec<T>,
    pub repeats: usize,
    pub base: ScenarioTemplate<T>,
    /// Device count when not swept.
    #[serde(default = "default_n")]
    pub n_devices: usize,
    /// Heterogeneity `L` when not swept.
    #[serde(default)]
    pub heterogeneity: T,
    /// Repeat `r` uses seed `seed + r` at every sweep value.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategyKind>,
}

impl<T: Scalar> SweepSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.repeats == 0 || self.strategies.is_empty() {
            return Err(FwqError::InvalidInput("sweep needs values, repeats >= 1 and a strategy".into()));
        }
        if self.kind == SweepKind::NumDevices {
            if let Some(v) = self.values.iter().find(|v| !(v.fract() == T::zero() && **v >= T::one())) {
                return Err(FwqError::InvalidInput(format!("device count {v} is not a positive integer")));
            }
        }
        self.base.validate()
    }

    /// Scenario of one sweep point.
    pub fn scenario(&self, value: T, seed: u64) -> Result<Scenario<T>> {
        match self.kind {
            SweepKind::NumDevices => {
                let n = value.to_usize().ok_or_else(|| FwqError::InvalidInput(format!("bad device count {value}")))?;
                self.base.scenario(n, self.heterogeneity, seed)
            }
            SweepKind::Heterogeneity => self.base.scenario(self.n_devices, value, seed),
            SweepKind::Bandwidth => {
                let mut tpl = self.base.clone();
                tpl.net.b_max = value;
                tpl.scenario(self.n_devices, self.heterogeneity, seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow<T> {
    pub sweep_value: T,
    pub seed: u64,
    pub strategy: StrategyKind,
    pub feasible: bool,
    pub objective_j: Option<T>,
    pub h: Option<u32>,
    pub k_rounds: Option<T>,
    pub eps_q: Option<T>,
    pub q: Vec<u32>,
    pub b_hz: Vec<T>,
    pub deadline_slack_s: Option<T>,
    pub bandwidth_slack_hz: Option<T>,
    pub quant_slack: Option<T>,
    /// Minimum bit-width over the worst-channel quarter of the devices.
    pub worst_group_min_q: Option<u32>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPointSummary<T> {
    pub sweep_value: T,
    pub strategy: StrategyKind,
    pub feasible: usize,
    pub total: usize,
    pub mean_objective_j: Option<T>,
    pub std_objective_j: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResults<T> {
    pub kind: SweepKind,
    pub rows: Vec<SweepRow<T>>,
}

fn row<T: Scalar>(value: T, seed: u64, sc: Option<&Scenario<T>>, out: &StrategyOutcome<T>) -> SweepRow<T> {
    let a = out.allocation.as_ref();
    let worst = sc.and_then(|sc| {
        let a = a?;
        worst_channel_group(&sc.devices).into_iter().map(|i| a.q[i]).min()
    });
    SweepRow {
        sweep_value: value,
        seed,
        strategy: out.strategy,
        feasible: out.feasible(),
        objective_j: a.map(|a| a.objective),
        h: a.map(|a| a.h),
        k_rounds: a.map(|a| a.k_rounds),
        eps_q: a.map(|a| a.eps_q),
        q: a.map(|a| a.q.clone()).unwrap_or_default(),
        b_hz: a.map(|a| a.b.clone()).unwrap_or_default(),
        deadline_slack_s: a.map(|a| a.feasibility.deadline_min),
        bandwidth_slack_hz: a.map(|a| a.feasibility.bandwidth),
        quant_slack: a.map(|a| a.feasibility.quant_error),
        worst_group_min_q: worst,
        note: out.error.clone(),
    }
}

/// Runs every (value, repeat) point in parallel; rows come back ordered
/// by value, then seed, then strategy as listed in the spec.
pub fn sweep<T: Scalar>(spec: &SweepSpec<T>) -> Result<SweepResults<T>> {
    spec.validate()?;
    let points: Vec<(T, u64)> = spec
        .values
        .iter()
        .flat_map(|&v| (0..spec.repeats).map(move |r| (v, spec.seed.wrapping_add(r as u64))))
        .collect();
    let rows: Vec<Vec<SweepRow<T>>> = points
        .par_iter()
        .map(|&(v, seed)| match spec.scenario(v, seed) {
            Ok(sc) => spec
                .strategies
                .iter()
                .map(|&k| row(v, seed, Some(&sc), &run_strategy(k, &sc, seed)))
                .collect(),
            Err(e) => spec
                .strategies
                .iter()
                .map(|&k| {
                    let out = StrategyOutcome {
                        strategy: k,
                        allocation: None,
                        error: Some(e.to_string()),
                    };
                    row(v, seed, None, &out)
                })
                .collect(),
        })
        .collect();
    Ok(SweepResults {
        kind: spec.kind,
        rows: rows.into_iter().flatten().collect(),
    })
}

fn opt<T: std::fmt::Display>(x: &Option<T>) -> String {
    x.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl<T: Scalar> SweepResults<T> {
    /// CSV with one row per (value, seed, strategy). Per-device columns
    /// are padded to the largest device count; infeasible rows leave the
    /// numeric columns empty.
    pub fn to_csv(&self) -> String {
        let n = self.rows.iter().map(|r| r.q.len()).max().unwrap_or(0);
        let mut s = String::from("sweep_value,seed,strategy,objective_j,h,k_rounds,eps_q");
        for i in 0..n {
            let _ = write!(s, ",q_{i}");
        }
        for i in 0..n {
            let _ = write!(s, ",b_{i}_hz");
        }
        s.push_str(",feasible,deadline_slack_s,bandwidth_slack_hz,quant_slack,worst_group_min_q\n");
        for r in &self.rows {
            let _ = write!(
                s,
                "{},{},{},{},{},{},{}",
                r.sweep_value,
                r.seed,
                r.strategy.name(),
                opt(&r.objective_j),
                opt(&r.h),
                opt(&r.k_rounds),
                opt(&r.eps_q)
            );
            for i in 0..n {
                let _ = write!(s, ",{}", opt(&r.q.get(i)));
            }
            for i in 0..n {
                let _ = write!(s, ",{}", opt(&r.b_hz.get(i)));
            }
            let _ = writeln!(
                s,
                ",{},{},{},{},{}",
                r.feasible,
                opt(&r.deadline_slack_s),
                opt(&r.bandwidth_slack_hz),
                opt(&r.quant_slack),
                opt(&r.worst_group_min_q)
            );
        }
        s
    }

    /// Mean and sample standard deviation of the objective per
    /// (value, strategy) over feasible rows.
    pub fn summary(&self) -> Vec<SweepPointSummary<T>> {
        let mut keys: Vec<(T, StrategyKind)> = Vec::new();
        for r in &self.rows {
            if !keys.iter().any(|&(v, k)| v == r.sweep_value && k == r.strategy) {
                keys.push((r.sweep_value, r.strategy));
            }
        }
        keys.into_iter()
            .map(|(v, k)| {
                let sel: Vec<&SweepRow<T>> = self.rows.iter().filter(|r| r.sweep_value == v && r.strategy == k).collect();
                let objs: Vec<T> = sel.iter().filter(|r| r.feasible).filter_map(|r| r.objective_j).collect();
                let m = objs.len();
                let mean = (m > 0).then(|| objs.iter().copied().sum::<T>() / T::from_usize_lossy(m));
                let std = mean.filter(|_| m > 1).map(|mu| {
                    (objs.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / T::from_usize_lossy(m - 1)).sqrt()
                });
                SweepPointSummary {
                    sweep_value: v,
                    strategy: k,
                    feasible: m,
                    total: sel.len(),
                    mean_objective_j: mean,
                    std_objective_j: std,
                }
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("sweep_value,strategy,feasible,total,mean_objective_j,std_objective_j\n");
        for p in self.summary() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                p.sweep_value,
                p.strategy.name(),
                p.feasible,
                p.total,
                opt(&p.mean_objective_j),
                opt(&p.std_objective_j)
            );
        }
        s
    }
}

#[cfg(test)]
mod tests;
