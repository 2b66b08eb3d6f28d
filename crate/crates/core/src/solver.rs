//! Joint energy minimization over the local step count `H`, the
//! quantization-error budget `eps_q`, per-device bit-widths `q_i` and
//! bandwidth shares `b_i`.
//!
//! The relaxed problem works on real bit exponents `q~_i = log2 q_i` and
//! alternates three exact block minimizations:
//!
//! * `H`: stationary point of `K(H) (E_cm + H E_cp)` from a cubic solved by
//!   Cardano's formula, clipped to the deadline-feasible interval;
//! * `q~`: per-device stationarity quadratic plus bisection on the
//!   quantization-error multiplier `mu1`;
//! * `b`: square-root allocation plus bisection on the bandwidth
//!   multiplier `omega`, with deadline-driven floors.
//!
//! [`iterate`] then rounds to integer `H` and to bit-widths from the
//! admissible set and re-solves the bandwidth for the rounded point.

use serde::{Deserialize, Serialize};

use crate::convergence::{noise_weight, rounds_required, ConvergenceCoeffs};
use crate::error::{FwqError, Result};
use crate::models::{alpha1, gpu_power, linearize_gpu_time, memory_ratio, DeviceProfile, NetworkConfig};
use crate::numerics::{bisect, bisect_geometric, golden_section_min};
use crate::scalar::Scalar;

/// Hard upper limit on local steps per round.
pub const H_CAP: f64 = 1e4;
pub const MAX_OUTER_ITERS: usize = 100;
pub const OUTER_REL_TOL: f64 = 1e-6;
/// Relative tolerance on constraint satisfaction.
pub const FEAS_REL_TOL: f64 = 1e-6;
const BUDGET_GRID: usize = 16;

pub fn default_q_set() -> Vec<u32> {
    vec![8, 16, 32]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario<T> {
    pub devices: Vec<DeviceProfile<T>>,
    pub net: NetworkConfig<T>,
    pub coeffs: ConvergenceCoeffs<T>,
    /// Training deadline (s).
    pub t_max: T,
    #[serde(default = "default_q_set")]
    pub q_set: Vec<u32>,
}

impl<T: Scalar> Scenario<T> {
    /// Structural checks. A non-positive deadline passes here and is
    /// reported as deadline infeasibility by the solvers.
    pub fn validate(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(FwqError::InvalidInput("scenario needs at least one device".into()));
        }
        self.net.validate()?;
        self.coeffs.validate()?;
        for d in &self.devices {
            d.validate()?;
        }
        let total: T = self.devices.iter().map(|d| d.pi_weight).sum();
        if (total - T::one()).abs() > T::lit(1e-6) {
            return Err(FwqError::InvalidInput(format!("pi weights sum to {total}, expected 1")));
        }
        if !self.t_max.is_finite() {
            return Err(FwqError::InvalidInput("t_max must be finite".into()));
        }
        if self.q_set.is_empty() {
            return Err(FwqError::InvalidInput("q_set must not be empty".into()));
        }
        if let Some(&q) = self.q_set.iter().find(|q| !(2..=32).contains(*q)) {
            return Err(FwqError::InvalidBitWidth(q));
        }
        for (i, d) in self.devices.iter().enumerate() {
            if !self.q_set.iter().any(|&q| d.fits_memory(bits_of(q))) {
                return Err(FwqError::MemoryInfeasible { device: i });
            }
        }
        Ok(())
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }
}

fn bits_of<T: Scalar>(q: u32) -> T {
    T::from_u32(q).expect("bit-width fits")
}

/// Per-device energy and time figures of an allocation. Energies are
/// totals over the whole training run; times are per communication round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceBreakdown<T> {
    pub comp_energy: T,
    pub comm_energy: T,
    pub comp_time: T,
    pub comm_time: T,
}

/// Signed slacks of every constraint; negative means violated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport<T> {
    /// `C_i - c3(q_i) U_i` (MB).
    pub memory: Vec<T>,
    /// `eps_q - phi(q)`.
    pub quant_error: T,
    /// `eps - eps_q`; must be strictly positive.
    pub convergence: T,
    /// `t_max - K (H T_cp,i + T_cm,i)` (s).
    pub deadline: Vec<T>,
    /// `t_max - K max_i(round time)`.
    pub deadline_min: T,
    /// `b_max - sum b_i` (Hz).
    pub bandwidth: T,
    pub feasible: bool,
    pub first_violation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multipliers<T> {
    pub mu1: T,
    pub mu2: Vec<T>,
    pub omega: T,
}

/// Scaled KKT residuals of the `(q~, b)` subproblems. Stationarity entries
/// are relative to the magnitude of the cost gradient; slackness entries
/// are relative constraint gaps of the active multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals<T> {
    pub q_stationarity: Vec<T>,
    pub b_stationarity: Vec<T>,
    pub mu1_slackness: T,
    pub omega_slackness: T,
    pub mu2_slackness: Vec<T>,
}

impl<T: Scalar> KktResiduals<T> {
    pub fn max_stationarity(&self) -> T {
        self.q_stationarity
            .iter()
            .chain(&self.b_stationarity)
            .fold(T::zero(), |a, &b| a.max(b))
    }

    pub fn max_slackness(&self) -> T {
        self.mu2_slackness
            .iter()
            .fold(self.mu1_slackness.max(self.omega_slackness), |a, &b| a.max(b))
    }
}

/// Solution of the continuous relaxation before rounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedSolution<T> {
    pub h: T,
    pub eps_q: T,
    pub qtilde: Vec<T>,
    pub b: Vec<T>,
    pub k_rounds: T,
    pub objective: T,
    pub multipliers: Multipliers<T>,
    pub kkt: KktResiduals<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation<T> {
    pub h: u32,
    pub eps_q: T,
    pub q: Vec<u32>,
    /// Bandwidth per device (Hz).
    pub b: Vec<T>,
    pub k_rounds: T,
    pub k_rounds_ceil: u64,
    /// Total training energy (J).
    pub objective: T,
    pub per_device: Vec<DeviceBreakdown<T>>,
    pub feasibility: FeasibilityReport<T>,
    pub relaxed: Option<RelaxedSolution<T>>,
    /// Objective after every outer iteration of the relaxed loop.
    pub history: Vec<T>,
    pub converged: bool,
    pub iterations: usize,
}

impl<T: Scalar> Allocation<T> {
    /// `objective - relaxed objective`; the cost of rounding.
    pub fn rounding_gap(&self) -> Option<T> {
        self.relaxed.as_ref().map(|r| self.objective - r.objective)
    }
}

/// `K sum_i [E_cm,i + h E_cp,i]` for per-round communication energies and
/// per-step computation energies.
pub fn total_energy<T: Scalar>(k_rounds: T, comm_per_round: &[T], comp_per_step: &[T], h: T) -> T {
    let comm: T = comm_per_round.iter().copied().sum();
    let comp: T = comp_per_step.iter().copied().sum();
    k_rounds * (comm + h * comp)
}

/// Which bandwidth rule the `b` step uses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// `b_i = sqrt(K p_i alpha_i / omega)`, the stationary point of the
    /// Lagrangian.
    #[default]
    Kkt,
    /// `b_i = K p_i alpha_i / omega`, a linear rule. Kept for
    /// comparison only; it is not optimal.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QSolution<T> {
    pub qtilde: Vec<T>,
    pub mu1: T,
    pub mu2: Vec<T>,
    pub phi: T,
    pub lower: T,
    /// Effective per-device upper bound (memory or deadline).
    pub upper: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSolution<T> {
    pub b: Vec<T>,
    pub omega: T,
    pub b_min: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterateOptions {
    /// Search over the quantization-error budget instead of fixing it at the
    /// error of the maximal bit-widths.
    pub budget_search: bool,
    /// Greedy single-device bit-width moves after rounding.
    pub discrete_polish: bool,
}

impl Default for IterateOptions {
    fn default() -> Self {
        Self {
            budget_search: true,
            discrete_polish: true,
        }
    }
}

impl IterateOptions {
    /// The plain alternating scheme: one relaxed run from the maximal
    /// bit-widths, then rounding.
    pub fn plain() -> Self {
        Self {
            budget_search: false,
            discrete_polish: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BruteForceGrid {
    /// Integer `H` is searched over `1..=h_max`.
    pub h_max: u32,
    /// Bandwidth simplex grid step is `b_max / b_resolution`.
    pub b_resolution: u32,
}

impl Default for BruteForceGrid {
    fn default() -> Self {
        Self {
            h_max: 64,
            b_resolution: 24,
        }
    }
}

// ---------------------------------------------------------------------------
// closed forms

/// Positive stationary point of `Psi(H) = (a1 H + a2)^2 (e_cm + H e_cp) / H`
/// (the round count times per-round energy, up to constants).
///
/// Stationarity reduces to `H^3 + alpha H^2 + beta = 0` with
/// `alpha = (a1 e_cm + 2 a2 e_cp) / (2 a1 e_cp)` and
/// `beta = -a2^2 e_cm / (2 a1^2 e_cp)`; substituting `H = t - alpha / 3`
/// gives a depressed cubic solved by Cardano's formula. When the shift
/// cancels most digits the reciprocal cubic in `1 / H` is solved instead.
/// Returns 0 when `e_cm = 0` (`Psi` is then increasing).
pub fn cardano_h<T: Scalar>(e_cm: T, e_cp: T, coeffs: &ConvergenceCoeffs<T>) -> T {
    let (a1, a2) = (coeffs.a1, coeffs.a2);
    if !(e_cm > T::zero()) {
        return T::zero();
    }
    if !(e_cp > T::zero()) {
        return T::infinity();
    }
    let two = T::lit(2.0);
    let alpha = (a1 * e_cm + two * a2 * e_cp) / (two * a1 * e_cp);
    let beta = -(a2 * a2 * e_cm) / (two * a1 * a1 * e_cp);

    let p = -alpha * alpha / T::lit(3.0);
    let q = two * alpha.powi(3) / T::lit(27.0) + beta;
    let mut h = largest_depressed_root(p, q) - alpha / T::lit(3.0);
    if !(h > T::lit(1e-3) * alpha) {
        // u = 1/H: u^3 + (alpha/beta) u + 1/beta = 0, already depressed
        h = T::one() / largest_depressed_root(alpha / beta, T::one() / beta);
    }
    let f = |x: T| (x + alpha) * x * x + beta;
    let df = |x: T| (T::lit(3.0) * x + two * alpha) * x;
    for _ in 0..3 {
        let step = f(h) / df(h);
        let next = h - step;
        if !(next > T::zero()) || f(next).abs() >= f(h).abs() {
            break;
        }
        h = next;
    }
    h
}

/// Largest real root of `t^3 + p t + q = 0`.
fn largest_depressed_root<T: Scalar>(p: T, q: T) -> T {
    let half_q = q / T::lit(2.0);
    let disc = half_q * half_q + (p / T::lit(3.0)).powi(3);
    if disc >= T::zero() {
        let sd = disc.sqrt();
        // pick the non-cancelling branch first
        let a = (-half_q - half_q.signum() * sd).cbrt();
        if a == T::zero() {
            return T::zero();
        }
        a - p / (T::lit(3.0) * a)
    } else {
        let r = (-p / T::lit(3.0)).sqrt();
        let cos_arg = (-half_q / (r * r * r)).max(-T::one()).min(T::one());
        T::lit(2.0) * r * (cos_arg.acos() / T::lit(3.0)).cos()
    }
}

/// `q~ = log2(log2 x)` with `x > 1` the larger root of
/// `x^2 - (2 + lambda) x + 1 = 0`.
pub fn qtilde_from_lambda<T: Scalar>(lambda: T) -> Result<T> {
    if !(lambda > T::zero()) {
        return Err(FwqError::InvalidMultiplier(format!("lambda must be > 0, got {lambda}")));
    }
    if lambda.is_infinite() {
        return Ok(T::infinity());
    }
    let x_minus_1 = (lambda + lambda.sqrt() * (lambda + T::lit(4.0)).sqrt()) / T::lit(2.0);
    let log2_x = x_minus_1.ln_1p() / T::LN_2();
    Ok(log2_x.log2())
}

/// Inverse of [`qtilde_from_lambda`]: `lambda = (x - 1)^2 / x` with
/// `x = 2^(2^q~)`.
pub fn lambda_for_qtilde<T: Scalar>(qt: T) -> T {
    let em1 = (qt.exp2() * T::LN_2()).exp_m1();
    em1 * em1 / (em1 + T::one())
}

/// Unclipped stationary bit exponent of one device for multipliers
/// `mu1` (quantization error) and `mu2` (that device's deadline) at
/// `r_total = H K` local iterations.
pub fn stationarity_qtilde<T: Scalar>(
    mu1: T,
    mu2: T,
    device: &DeviceProfile<T>,
    coeffs: &ConvergenceCoeffs<T>,
    r_total: T,
) -> Result<T> {
    if mu2 < T::zero() {
        return Err(FwqError::InvalidMultiplier(format!("mu2 must be >= 0, got {mu2}")));
    }
    let slope = linearize_gpu_time(&device.gpu).slope;
    let p_cp = gpu_power(&device.gpu);
    let w = coeffs.a3 * device.pi_weight * device.pi_weight * coeffs.s_scale;
    let lambda = T::LN_2() * mu1 * w / (r_total * slope * (p_cp + mu2));
    qtilde_from_lambda(lambda)
}

/// Quantization error `a3 sum pi_i^2 s / (2^q_i - 1)` of integer bit-widths.
pub fn eps_q_min<T: Scalar>(q: &[u32], coeffs: &ConvergenceCoeffs<T>, devices: &[DeviceProfile<T>]) -> T {
    devices
        .iter()
        .zip(q)
        .map(|(d, &qi)| coeffs.a3 * d.pi_weight * d.pi_weight * coeffs.s_scale * noise_weight(bits_of::<T>(qi)))
        .sum()
}

/// Splits `b_max` as `max(b_min_i, share_i(omega))` with the multiplier
/// chosen so the shares use the whole band. `weights` are `K p_i alpha_i`.
/// Returns the allocation and `omega`.
pub fn split_bandwidth<T: Scalar>(weights: &[T], b_min: &[T], b_max: T, rule: BandwidthRule) -> Result<(Vec<T>, T)> {
    let sum_min: T = b_min.iter().copied().sum();
    if sum_min > b_max * (T::one() + T::solver_tol()) {
        return Err(FwqError::BandwidthInfeasible {
            required: sum_min.as_f64(),
            available: b_max.as_f64(),
        });
    }
    let share = |w: T, omega: T| match rule {
        BandwidthRule::Kkt => (w / omega).sqrt(),
        BandwidthRule::Linear => w / omega,
    };
    let alloc = |omega: T| -> Vec<T> {
        weights
            .iter()
            .zip(b_min)
            .map(|(&w, &lo)| lo.max(share(w, omega)))
            .collect()
    };
    let total = |omega: T| alloc(omega).into_iter().sum::<T>();
    // at omega_hi every share sits at its floor (or is zero)
    let omega_hi = weights
        .iter()
        .zip(b_min)
        .map(|(&w, &lo)| {
            let lo = lo.max(b_max * T::epsilon());
            match rule {
                BandwidthRule::Kkt => w / (lo * lo),
                BandwidthRule::Linear => w / lo,
            }
        })
        .fold(T::zero(), T::max);
    if !(omega_hi > T::zero()) {
        return Err(FwqError::InvalidInput("bandwidth weights must be positive".into()));
    }
    if total(omega_hi) >= b_max {
        return Ok((b_min.to_vec(), omega_hi));
    }
    let mut omega_lo = omega_hi;
    for _ in 0..4000 {
        if total(omega_lo) > b_max {
            break;
        }
        omega_lo = omega_lo / T::lit(2.0);
    }
    let (_, omega) = bisect_geometric(omega_lo, omega_hi, T::solver_tol() * T::lit(1e-2), |w| total(w) - b_max);
    Ok((alloc(omega), omega))
}

// ---------------------------------------------------------------------------
// per-scenario context

#[derive(Debug, Clone)]
struct Dev<T> {
    pi2: T,
    p_cp: T,
    c1: T,
    c2: T,
    alpha: T,
    p_cm: T,
    /// `min(log2 max(q_set), log2(32 C / U))`.
    qt_cap: T,
    mem_capacity: T,
    model_size: T,
}

#[derive(Debug, Clone)]
struct Cand<T> {
    h: u32,
    q: Vec<u32>,
    b: Vec<T>,
    eps_q: T,
    obj: T,
}

#[derive(Debug, Clone)]
struct Run<T> {
    h: T,
    eps_q: T,
    qt: Vec<T>,
    b: Vec<T>,
    obj: T,
    history: Vec<T>,
    converged: bool,
    iters: usize,
}

struct Ctx<'a, T> {
    sc: &'a Scenario<T>,
    dev: Vec<Dev<T>>,
    q_set: Vec<u32>,
    qt_min: T,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    fn new(sc: &'a Scenario<T>) -> Result<Self> {
        sc.validate()?;
        let mut q_set = sc.q_set.clone();
        q_set.sort_unstable();
        q_set.dedup();
        let qt_top = bits_of::<T>(*q_set.last().expect("validated")).log2();
        let dev = sc
            .devices
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let lin = linearize_gpu_time(&d.gpu);
                let alpha = alpha1(&d.radio, &sc.net).map_err(|_| FwqError::ZeroRate { device: Some(i) })?;
                Ok(Dev {
                    pi2: d.pi_weight * d.pi_weight,
                    p_cp: gpu_power(&d.gpu),
                    c1: lin.intercept,
                    c2: lin.slope,
                    alpha,
                    p_cm: d.radio.p_cm,
                    qt_cap: d.max_memory_bits().log2().min(qt_top),
                    mem_capacity: d.mem_capacity,
                    model_size: d.model_size,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sc,
            dev,
            qt_min: bits_of::<T>(q_set[0]).log2(),
            q_set,
        })
    }

    fn n(&self) -> usize {
        self.dev.len()
    }

    fn coeffs(&self) -> &ConvergenceCoeffs<T> {
        &self.sc.coeffs
    }

    fn require_deadline(&self) -> Result<()> {
        if self.sc.t_max > T::zero() {
            Ok(())
        } else {
            Err(FwqError::DeadlineInfeasible(format!("t_max = {} s leaves no time to train", self.sc.t_max)))
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == self.n() {
            Ok(())
        } else {
            Err(FwqError::DimensionMismatch {
                expected: self.n(),
                got: len,
            })
        }
    }

    fn fits(&self, i: usize, q: u32) -> bool {
        memory_ratio(bits_of::<T>(q)) * self.dev[i].model_size <= self.dev[i].mem_capacity * (T::one() + T::lit(1e-12))
    }

    /// Feasibility restoration for deadlines that only mixed bit-widths
    /// meet: lowers one device at a time, preferring a move that is feasible
    /// on its own and otherwise the device with the longest round at an
    /// even bandwidth split.
    fn restore(&self, start: &[u32]) -> Option<Cand<T>> {
        let share = self.sc.net.b_max / T::from_usize_lossy(self.n());
        let mut cur = start.to_vec();
        loop {
            let moves: Vec<(usize, Vec<u32>)> = (0..self.n())
                .filter_map(|i| {
                    let lower = self.q_set.iter().rev().copied().find(|&q| q < cur[i])?;
                    let mut qv = cur.clone();
                    qv[i] = lower;
                    Some((i, qv))
                })
                .collect();
            if moves.is_empty() {
                return None;
            }
            let found = moves
                .iter()
                .filter_map(|(_, qv)| self.discrete(qv).ok())
                .reduce(|a, b| if b.obj < a.obj { b } else { a });
            if found.is_some() {
                return found;
            }
            let round = |i: usize| {
                let d = &self.dev[i];
                d.c2 * bits_of::<T>(cur[i]) + d.c1 + d.alpha / share
            };
            let (_, qv) = moves
                .into_iter()
                .reduce(|a, b| if round(b.0) > round(a.0) { b } else { a })
                .expect("non-empty");
            cur = qv;
        }
    }

    fn max_fitting(&self, i: usize, limit: u32) -> u32 {
        self.q_set
            .iter()
            .copied()
            .filter(|&q| q <= limit && self.fits(i, q))
            .max()
            .unwrap_or(self.q_set[0])
    }

    fn weight(&self, i: usize) -> T {
        let c = self.coeffs();
        c.a3 * self.dev[i].pi2 * c.s_scale
    }

    fn phi(&self, bits: &[T]) -> T {
        (0..self.n()).map(|i| self.weight(i) * noise_weight(bits[i])).sum()
    }

    fn k(&self, h: T, eps_q: T) -> Result<T> {
        rounds_required(h, eps_q, self.coeffs())
    }

    fn tcp(&self, i: usize, q: T) -> T {
        self.dev[i].c2 * q + self.dev[i].c1
    }

    fn comm(&self, b: &[T]) -> Vec<T> {
        self.dev.iter().zip(b).map(|(d, &bi)| d.p_cm * d.alpha / bi).collect()
    }

    fn comp(&self, bits: &[T]) -> Vec<T> {
        (0..self.n()).map(|i| self.dev[i].p_cp * self.tcp(i, bits[i])).collect()
    }

    fn objective(&self, h: T, eps_q: T, bits: &[T], b: &[T]) -> T {
        match self.k(h, eps_q) {
            Ok(k) => total_energy(k, &self.comm(b), &self.comp(bits), h),
            Err(_) => T::infinity(),
        }
    }

    fn h_interval(&self, bits: &[T], b: &[T], eps_q: T) -> Result<(T, T)> {
        let c = self.coeffs();
        if !(eps_q < c.eps) {
            return Err(FwqError::TargetInfeasible {
                eps_q: eps_q.as_f64(),
                eps: c.eps.as_f64(),
            });
        }
        let gap = c.eps - eps_q;
        let thr = c.m() * gap * gap * self.sc.t_max;
        let (mut lo, mut hi) = (T::one(), T::lit(H_CAP));
        for i in 0..self.n() {
            let tcm = self.dev[i].alpha / b[i];
            let (l, h) = device_h_interval(c.a1, c.a2, tcm, self.tcp(i, bits[i]), thr).ok_or_else(|| {
                FwqError::DeadlineInfeasible(format!("device {i}: no local-step count meets the deadline"))
            })?;
            lo = lo.max(l);
            hi = hi.min(h);
        }
        if lo > hi {
            return Err(FwqError::DeadlineInfeasible(format!(
                "per-device local-step intervals do not intersect ({lo} > {hi})"
            )));
        }
        Ok((lo, hi))
    }

    fn h_step(&self, bits: &[T], b: &[T], eps_q: T) -> Result<T> {
        let (lo, hi) = self.h_interval(bits, b, eps_q)?;
        let e_cm: T = self.comm(b).into_iter().sum();
        let e_cp: T = self.comp(bits).into_iter().sum();
        Ok(cardano_h(e_cm, e_cp, self.coeffs()).max(lo).min(hi))
    }

    fn q_step(&self, h: T, eps_q: T, b: &[T]) -> Result<QSolution<T>> {
        let k = self.k(h, eps_q)?;
        let r = h * k;
        let q_min = self.qt_min.exp2();
        let mut upper = Vec::with_capacity(self.n());
        let mut deadline_bound = vec![false; self.n()];
        for (i, d) in self.dev.iter().enumerate() {
            let per_step = (self.sc.t_max / k - d.alpha / b[i]) / h;
            let mut up = d.qt_cap;
            if d.c2 > T::zero() {
                let q_d = (per_step - d.c1) / d.c2;
                if !(q_d >= q_min * (T::one() - T::solver_tol())) {
                    return Err(FwqError::DeadlineInfeasible(format!(
                        "device {i}: deadline leaves no admissible bit-width"
                    )));
                }
                let qt_d = q_d.max(q_min).log2();
                if qt_d < up {
                    up = qt_d;
                    deadline_bound[i] = true;
                }
            } else if per_step < d.c1 {
                return Err(FwqError::DeadlineInfeasible(format!(
                    "device {i}: computation alone exceeds the per-round budget"
                )));
            }
            upper.push(up.max(self.qt_min));
        }
        let unit: Vec<T> = (0..self.n())
            .map(|i| T::LN_2() * self.weight(i) / (r * self.dev[i].c2 * self.dev[i].p_cp))
            .collect();
        let lower = self.qt_min;
        let q_at = |mu: T| -> Vec<T> {
            (0..self.n())
                .map(|i| {
                    if mu > T::zero() {
                        qtilde_from_lambda(mu * unit[i]).unwrap_or(lower).max(lower).min(upper[i])
                    } else {
                        lower
                    }
                })
                .collect()
        };
        let phi_qt = |qt: &[T]| {
            let bits: Vec<T> = qt.iter().map(|q| q.exp2()).collect();
            self.phi(&bits)
        };

        let phi_top = phi_qt(&upper);
        if phi_top > eps_q * (T::one() + T::lit(1e-9)) {
            return Err(FwqError::QuantErrorInfeasible {
                budget: eps_q.as_f64(),
                achievable: phi_top.as_f64(),
            });
        }
        // smallest mu1 pinning every device at its upper bound
        let mu_top = (0..self.n())
            .map(|i| lambda_for_qtilde(upper[i]) / unit[i])
            .filter(|m| m.is_finite())
            .fold(T::zero(), T::max);

        let (qt, mu1) = if phi_qt(&vec![lower; self.n()]) <= eps_q {
            (vec![lower; self.n()], T::zero())
        } else if phi_top >= eps_q * (T::one() - T::lit(1e-9)) {
            (upper.clone(), mu_top)
        } else {
            let g = |mu: T| phi_qt(&q_at(mu)) - eps_q;
            let hi = mu_top;
            let mut lo = hi;
            for _ in 0..4000 {
                if g(lo) > T::zero() || lo == T::zero() {
                    break;
                }
                lo = lo / T::lit(2.0);
            }
            let (_, mu) = bisect_geometric(lo, hi, T::solver_tol() * T::lit(1e-2), g);
            (q_at(mu), mu)
        };

        let mu2 = (0..self.n())
            .map(|i| {
                if deadline_bound[i] && mu1 > T::zero() && qt[i] >= upper[i] {
                    let need = lambda_for_qtilde(qt[i]);
                    (self.dev[i].p_cp * (mu1 * unit[i] / need - T::one())).max(T::zero())
                } else {
                    T::zero()
                }
            })
            .collect();
        let phi = phi_qt(&qt);
        Ok(QSolution {
            qtilde: qt,
            mu1,
            mu2,
            phi,
            lower,
            upper,
        })
    }

    fn b_step(&self, h: T, eps_q: T, bits: &[T], rule: BandwidthRule) -> Result<BSolution<T>> {
        let k = self.k(h, eps_q)?;
        let r = h * k;
        let mut b_min = Vec::with_capacity(self.n());
        for (i, d) in self.dev.iter().enumerate() {
            let room = self.sc.t_max - r * self.tcp(i, bits[i]);
            if !(room > T::zero()) {
                return Err(FwqError::DeadlineInfeasible(format!(
                    "device {i}: computation alone exceeds the deadline"
                )));
            }
            b_min.push(k * d.alpha / room);
        }
        let weights: Vec<T> = self.dev.iter().map(|d| k * d.p_cm * d.alpha).collect();
        let (b, omega) = split_bandwidth(&weights, &b_min, self.sc.net.b_max, rule)?;
        Ok(BSolution { b, omega, b_min })
    }

    /// Alternates `H` and `b` for fixed bits and budget. Starts from the
    /// uniform split, or from the best point of a geometric `H` scan when
    /// the uniform split admits no `H`.
    fn fit_hb(&self, bits: &[T], eps_q: T) -> Result<(T, Vec<T>, T)> {
        let uniform = vec![self.sc.net.b_max / T::from_usize_lossy(self.n()); self.n()];
        let mut start = None;
        let first_err = match self.h_step(bits, &uniform, eps_q) {
            Ok(h) => {
                start = Some((h, uniform.clone(), self.objective(h, eps_q, bits, &uniform)));
                None
            }
            Err(e) => Some(e),
        };
        if start.is_none() {
            let steps = 80;
            for j in 0..=steps {
                let h = T::lit(H_CAP).powf(T::from_usize_lossy(j) / T::from_usize_lossy(steps));
                if let Ok(bs) = self.b_step(h, eps_q, bits, BandwidthRule::Kkt) {
                    let obj = self.objective(h, eps_q, bits, &bs.b);
                    if start.as_ref().is_none_or(|s: &(T, Vec<T>, T)| obj < s.2) {
                        start = Some((h, bs.b, obj));
                    }
                }
            }
        }
        let (mut h, mut b, mut obj) = match start {
            Some(s) => s,
            None => return Err(first_err.expect("uniform attempt failed")),
        };
        for _ in 0..MAX_OUTER_ITERS {
            let prev = obj;
            if let Ok(bs) = self.b_step(h, eps_q, bits, BandwidthRule::Kkt) {
                let o = self.objective(h, eps_q, bits, &bs.b);
                if o <= obj {
                    b = bs.b;
                    obj = o;
                }
            }
            if let Ok(h2) = self.h_step(bits, &b, eps_q) {
                let o = self.objective(h2, eps_q, bits, &b);
                if o <= obj {
                    h = h2;
                    obj = o;
                }
            }
            if prev - obj <= T::lit(1e-10) * prev {
                break;
            }
        }
        Ok((h, b, obj))
    }

    /// Best integer `H` near `h_real` with bandwidth re-solved.
    fn integer_h(&self, h_real: T, bits: &[T], eps_q: T) -> Option<(u32, Vec<T>, T)> {
        let cap = H_CAP as u32;
        let base = h_real.floor().to_u32().unwrap_or(1).clamp(1, cap);
        let mut best: Option<(u32, Vec<T>, T)> = None;
        let try_h = |hh: u32, best: &mut Option<(u32, Vec<T>, T)>| {
            let hf = bits_of::<T>(hh);
            if let Ok(bs) = self.b_step(hf, eps_q, bits, BandwidthRule::Kkt) {
                let o = self.objective(hf, eps_q, bits, &bs.b);
                if best.as_ref().is_none_or(|b| o < b.2) {
                    *best = Some((hh, bs.b, o));
                }
            }
        };
        try_h(base, &mut best);
        try_h((base + 1).min(cap), &mut best);
        for off in 1..=3u32 {
            if best.is_some() {
                break;
            }
            try_h(base.saturating_sub(off).max(1), &mut best);
            try_h((base + 1 + off).min(cap), &mut best);
        }
        best
    }

    /// Optimal integer `H` and bandwidth for fixed integer bit-widths, with
    /// `eps_q` at its lower limit `phi(q)`.
    fn discrete(&self, q: &[u32]) -> Result<Cand<T>> {
        for (i, &qi) in q.iter().enumerate() {
            if !self.fits(i, qi) {
                return Err(FwqError::MemoryInfeasible { device: i });
            }
        }
        let bits: Vec<T> = q.iter().map(|&x| bits_of(x)).collect();
        let eps_q = self.phi(&bits);
        let (h, _, _) = self.fit_hb(&bits, eps_q)?;
        let (h, b, obj) = self.integer_h(h, &bits, eps_q).ok_or_else(|| {
            FwqError::NoFeasibleAllocation(format!("no integer local-step count is feasible for q = {q:?}"))
        })?;
        Ok(Cand {
            h,
            q: q.to_vec(),
            b,
            eps_q,
            obj,
        })
    }

    fn relaxed_run(&self, ell: T) -> Result<Run<T>> {
        let mut qt: Vec<T> = self.dev.iter().map(|d| d.qt_cap.max(self.qt_min)).collect();
        let mut bits: Vec<T> = qt.iter().map(|q| q.exp2()).collect();
        let phi0 = self.phi(&bits);
        if phi0 > ell * (T::one() + T::lit(1e-9)) {
            return Err(FwqError::QuantErrorInfeasible {
                budget: ell.as_f64(),
                achievable: phi0.as_f64(),
            });
        }
        let mut eps_q = ell.max(phi0);
        let (mut h, mut b, mut obj) = self.fit_hb(&bits, eps_q)?;
        let mut history = vec![obj];
        let mut converged = false;
        let mut iters = 0;
        for it in 1..=MAX_OUTER_ITERS {
            iters = it;
            let prev = obj;
            if let Ok(qs) = self.q_step(h, eps_q, &b) {
                let nb: Vec<T> = qs.qtilde.iter().map(|q| q.exp2()).collect();
                let o = self.objective(h, eps_q, &nb, &b);
                if o <= obj {
                    qt = qs.qtilde;
                    bits = nb;
                    obj = o;
                }
            }
            if let Ok(bs) = self.b_step(h, eps_q, &bits, BandwidthRule::Kkt) {
                let o = self.objective(h, eps_q, &bits, &bs.b);
                if o <= obj {
                    b = bs.b;
                    obj = o;
                }
            }
            let eq = self.phi(&bits).min(eps_q);
            if let Ok(h2) = self.h_step(&bits, &b, eq) {
                let o = self.objective(h2, eq, &bits, &b);
                if o <= obj {
                    h = h2;
                    eps_q = eq;
                    obj = o;
                }
            }
            history.push(obj);
            if prev - obj <= T::lit(OUTER_REL_TOL) * prev {
                converged = true;
                break;
            }
        }
        Ok(Run {
            h,
            eps_q,
            qt,
            b,
            obj,
            history,
            converged,
            iters,
        })
    }

    fn best_relaxed(&self, opts: IterateOptions) -> Result<Run<T>> {
        let top: Vec<T> = self.dev.iter().map(|d| d.qt_cap.max(self.qt_min).exp2()).collect();
        let ell_lo = self.phi(&top);
        let eps = self.coeffs().eps;
        if !(ell_lo < eps) {
            return Err(FwqError::TargetInfeasible {
                eps_q: ell_lo.as_f64(),
                eps: eps.as_f64(),
            });
        }
        let base = self.relaxed_run(ell_lo);
        if !opts.budget_search {
            return base;
        }
        let floor = self.phi(&vec![self.qt_min.exp2(); self.n()]);
        let ell_hi = floor.min(T::lit(0.999) * eps);
        if !(ell_hi > ell_lo * (T::one() + T::lit(1e-9))) || !(ell_lo > T::zero()) {
            return base;
        }
        let (x_lo, x_hi) = (ell_lo.ln(), ell_hi.ln());
        let at = |j: usize| x_lo + (x_hi - x_lo) * T::from_usize_lossy(j) / T::from_usize_lossy(BUDGET_GRID - 1);
        let mut runs: Vec<(T, Option<Run<T>>)> = vec![(x_lo, base.ok())];
        for j in 1..BUDGET_GRID {
            let x = at(j);
            runs.push((x, self.relaxed_run(x.exp()).ok()));
        }
        let score = |r: &Option<Run<T>>| r.as_ref().map_or(T::infinity(), |r| r.obj);
        let best_j = (0..runs.len())
            .min_by(|&a, &b| score(&runs[a].1).partial_cmp(&score(&runs[b].1)).unwrap())
            .expect("non-empty");
        if score(&runs[best_j].1).is_finite() {
            let lo = at(best_j.saturating_sub(1));
            let hi = at((best_j + 1).min(BUDGET_GRID - 1));
            let f = |x: T| self.relaxed_run(x.exp()).map_or(T::infinity(), |r| r.obj);
            let x = golden_section_min(lo, hi, T::lit(1e-4), f);
            runs.push((x, self.relaxed_run(x.exp()).ok()));
        }
        let mut best: Option<Run<T>> = None;
        let mut first_err = None;
        for (x, r) in runs {
            match r {
                Some(r) if best.as_ref().is_none_or(|b| r.obj < b.obj) => best = Some(r),
                Some(_) => {}
                None if first_err.is_none() => first_err = Some(x),
                None => {}
            }
        }
        best.ok_or_else(|| FwqError::NoFeasibleAllocation("no quantization budget admits a relaxed solution".into()))
    }

    fn round_bits(&self, qt: &[T]) -> Vec<u32> {
        qt.iter()
            .enumerate()
            .map(|(i, &x)| {
                let e = (x + T::lit(0.5)).floor();
                let nearest = self
                    .q_set
                    .iter()
                    .copied()
                    .min_by(|&a, &b| {
                        let da = (bits_of::<T>(a).log2() - e).abs();
                        let db = (bits_of::<T>(b).log2() - e).abs();
                        da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                    })
                    .expect("non-empty q_set");
                if self.fits(i, nearest) {
                    nearest
                } else {
                    self.max_fitting(i, nearest)
                }
            })
            .collect()
    }

    fn kkt(&self, h: T, eps_q: T, qs: &QSolution<T>, bs: &BSolution<T>) -> KktResiduals<T> {
        let k = self.k(h, eps_q).unwrap_or(T::infinity());
        let r = h * k;
        let ln2 = T::LN_2();
        let eps_band = T::lit(1e-9);
        let q_stationarity = (0..self.n())
            .map(|i| {
                let d = &self.dev[i];
                let qt = qs.qtilde[i];
                let p2 = qt.exp2();
                let em1 = (p2 * ln2).exp_m1();
                let cost = r * (d.p_cp + qs.mu2[i]) * d.c2 * ln2 * p2;
                let relief = ln2 * ln2 * qs.mu1 * self.weight(i) * p2 * (em1 + T::one()) / (em1 * em1);
                let g = cost - relief;
                let scale = r * d.p_cp * d.c2 * ln2 * p2;
                let scale = if scale > T::zero() { scale } else { T::one() };
                let at_lo = qt <= qs.lower + eps_band;
                let at_hi = qt >= qs.upper[i] - eps_band;
                let res = if at_lo && at_hi {
                    T::zero()
                } else if at_lo {
                    (-g).max(T::zero())
                } else if at_hi {
                    g.max(T::zero())
                } else {
                    g.abs()
                };
                res / scale
            })
            .collect();
        let b_stationarity = (0..self.n())
            .map(|i| {
                let d = &self.dev[i];
                if !(bs.omega > T::zero()) {
                    return T::zero();
                }
                let g = bs.omega - k * d.p_cm * d.alpha / (bs.b[i] * bs.b[i]);
                let res = if bs.b[i] > bs.b_min[i] * (T::one() + eps_band) {
                    g.abs()
                } else {
                    (-g).max(T::zero())
                };
                res / bs.omega
            })
            .collect();
        let mu1_slackness = if qs.mu1 > T::zero() {
            (eps_q - qs.phi).abs() / eps_q
        } else {
            T::zero()
        };
        let total_b: T = bs.b.iter().copied().sum();
        let omega_slackness = if bs.omega > T::zero() {
            (self.sc.net.b_max - total_b).abs() / self.sc.net.b_max
        } else {
            T::zero()
        };
        let mu2_slackness = (0..self.n())
            .map(|i| {
                if qs.mu2[i] > T::zero() {
                    let bits = qs.qtilde[i].exp2();
                    let round = h * self.tcp(i, bits) + self.dev[i].alpha / bs.b[i];
                    (self.sc.t_max - k * round).abs() / self.sc.t_max
                } else {
                    T::zero()
                }
            })
            .collect();
        KktResiduals {
            q_stationarity,
            b_stationarity,
            mu1_slackness,
            omega_slackness,
            mu2_slackness,
        }
    }

    /// Re-solves both subproblems at the final `(H, eps_q)` of a run and
    /// records multipliers and residuals.
    fn finish_relaxed(&self, run: &Run<T>) -> RelaxedSolution<T> {
        let (h, eps_q) = (run.h, run.eps_q);
        let polished = self.q_step(h, eps_q, &run.b).and_then(|qs| {
            let bits: Vec<T> = qs.qtilde.iter().map(|q| q.exp2()).collect();
            let bs = self.b_step(h, eps_q, &bits, BandwidthRule::Kkt)?;
            let obj = self.objective(h, eps_q, &bits, &bs.b);
            Ok((qs, bs, obj))
        });
        let k_rounds = self.k(h, eps_q).unwrap_or(T::infinity());
        match polished {
            Ok((qs, bs, obj)) if obj <= run.obj * (T::one() + T::lit(1e-9)) => {
                let kkt = self.kkt(h, eps_q, &qs, &bs);
                RelaxedSolution {
                    h,
                    eps_q,
                    qtilde: qs.qtilde,
                    b: bs.b,
                    k_rounds,
                    objective: obj.min(run.obj),
                    multipliers: Multipliers {
                        mu1: qs.mu1,
                        mu2: qs.mu2,
                        omega: bs.omega,
                    },
                    kkt,
                }
            }
            _ => RelaxedSolution {
                h,
                eps_q,
                qtilde: run.qt.clone(),
                b: run.b.clone(),
                k_rounds,
                objective: run.obj,
                multipliers: Multipliers {
                    mu1: T::zero(),
                    mu2: vec![T::zero(); self.n()],
                    omega: T::zero(),
                },
                kkt: KktResiduals {
                    q_stationarity: vec![T::nan(); self.n()],
                    b_stationarity: vec![T::nan(); self.n()],
                    mu1_slackness: T::nan(),
                    omega_slackness: T::nan(),
                    mu2_slackness: vec![T::nan(); self.n()],
                },
            },
        }
    }

    fn report(&self, h: T, eps_q: T, q: &[u32], b: &[T]) -> FeasibilityReport<T> {
        let c = self.coeffs();
        let bits: Vec<T> = q.iter().map(|&x| bits_of(x)).collect();
        let memory: Vec<T> = (0..self.n())
            .map(|i| self.dev[i].mem_capacity - memory_ratio(bits[i]) * self.dev[i].model_size)
            .collect();
        let phi = self.phi(&bits);
        let quant_error = eps_q - phi;
        let convergence = c.eps - eps_q;
        let k = self.k(h, eps_q).unwrap_or(T::infinity());
        let deadline: Vec<T> = (0..self.n())
            .map(|i| {
                let round = h * self.tcp(i, bits[i]) + self.dev[i].alpha / b[i];
                self.sc.t_max - k * round
            })
            .collect();
        let deadline_min = deadline.iter().copied().fold(T::infinity(), T::min);
        let total_b: T = b.iter().copied().sum();
        let bandwidth = self.sc.net.b_max - total_b;

        let tol = T::lit(FEAS_REL_TOL);
        let mut first_violation = None;
        let mut flag = |ok: bool, what: String| {
            if !ok && first_violation.is_none() {
                first_violation = Some(what);
            }
        };
        for (i, &m) in memory.iter().enumerate() {
            flag(m >= -tol * self.dev[i].mem_capacity, format!("memory (device {i})"));
        }
        flag(quant_error >= -tol * eps_q.max(phi), "quantization error".into());
        flag(convergence > T::zero(), "convergence target".into());
        for (i, &d) in deadline.iter().enumerate() {
            flag(d >= -tol * self.sc.t_max.abs(), format!("deadline (device {i})"));
        }
        flag(bandwidth >= -tol * self.sc.net.b_max, "bandwidth".into());
        for (i, &bi) in b.iter().enumerate() {
            flag(bi > T::zero(), format!("non-positive bandwidth (device {i})"));
        }
        FeasibilityReport {
            memory,
            quant_error,
            convergence,
            deadline,
            deadline_min,
            bandwidth,
            feasible: first_violation.is_none(),
            first_violation,
        }
    }

    fn allocation(&self, cand: &Cand<T>) -> Allocation<T> {
        let h = bits_of::<T>(cand.h);
        let bits: Vec<T> = cand.q.iter().map(|&x| bits_of(x)).collect();
        let k = self.k(h, cand.eps_q).unwrap_or(T::infinity());
        let per_device = (0..self.n())
            .map(|i| {
                let d = &self.dev[i];
                let comp_time = h * self.tcp(i, bits[i]);
                let comm_time = d.alpha / cand.b[i];
                DeviceBreakdown {
                    comp_energy: k * d.p_cp * comp_time,
                    comm_energy: k * d.p_cm * comm_time,
                    comp_time,
                    comm_time,
                }
            })
            .collect();
        Allocation {
            h: cand.h,
            eps_q: cand.eps_q,
            q: cand.q.clone(),
            b: cand.b.clone(),
            k_rounds: k,
            k_rounds_ceil: k.ceil().to_u64().unwrap_or(u64::MAX),
            objective: self.objective(h, cand.eps_q, &bits, &cand.b),
            per_device,
            feasibility: self.report(h, cand.eps_q, &cand.q, &cand.b),
            relaxed: None,
            history: Vec::new(),
            converged: true,
            iterations: 0,
        }
    }
}

/// Feasible `[h_lo, h_hi]` of one device where
/// `rho(H) = (a1 H + a2)^2 (T_cm / H + T_cp) <= thr`, clipped to `[1, H_CAP]`.
fn device_h_interval<T: Scalar>(a1: T, a2: T, tcm: T, tcp: T, thr: T) -> Option<(T, T)> {
    let cap = T::lit(H_CAP);
    let rho = |h: T| (a1 * h + a2).powi(2) * (tcm / h + tcp);
    // argmin of rho: positive root of 2 a1 T_cp H^2 + a1 T_cm H - a2 T_cm = 0
    let h_star = if tcm > T::zero() {
        T::lit(2.0) * a2 * tcm / (a1 * tcm + (a1 * a1 * tcm * tcm + T::lit(8.0) * a1 * tcp * a2 * tcm).sqrt())
    } else {
        T::zero()
    };
    let hs = h_star.max(T::one()).min(cap);
    if !(rho(hs) <= thr) {
        return None;
    }
    let g = |h: T| rho(h) - thr;
    let tol = T::solver_tol();
    let lo = if g(T::one()) <= T::zero() {
        T::one()
    } else {
        bisect(T::one(), hs, tol, g).1
    };
    let hi = if g(cap) <= T::zero() { cap } else { bisect(hs, cap, tol, g).0 };
    Some((lo, hi))
}

// ---------------------------------------------------------------------------
// public entry points

/// Objective of an allocation: `K(H, eps_q) sum_i [p_cm,i alpha_i / b_i +
/// H p_cp,i (c_i2 q_i + c_i1)]`. Infinite when the allocation cannot be
/// evaluated (e.g. `eps_q >= eps`).
pub fn objective<T: Scalar>(sc: &Scenario<T>, alloc: &Allocation<T>) -> T {
    match Ctx::new(sc) {
        Ok(ctx) if alloc.q.len() == ctx.n() && alloc.b.len() == ctx.n() => {
            let bits: Vec<T> = alloc.q.iter().map(|&x| bits_of(x)).collect();
            ctx.objective(bits_of(alloc.h), alloc.eps_q, &bits, &alloc.b)
        }
        _ => T::infinity(),
    }
}

/// Evaluates every constraint of the allocation.
pub fn check_feasible<T: Scalar>(sc: &Scenario<T>, alloc: &Allocation<T>) -> FeasibilityReport<T> {
    let n = sc.devices.len();
    let failed = |why: String| FeasibilityReport {
        memory: vec![T::nan(); n],
        quant_error: T::nan(),
        convergence: T::nan(),
        deadline: vec![T::nan(); n],
        deadline_min: T::nan(),
        bandwidth: T::nan(),
        feasible: false,
        first_violation: Some(why),
    };
    match Ctx::new(sc) {
        Ok(ctx) if alloc.q.len() == n && alloc.b.len() == n => ctx.report(bits_of(alloc.h), alloc.eps_q, &alloc.q, &alloc.b),
        Ok(_) => failed("allocation length does not match the device count".into()),
        Err(e) => failed(e.to_string()),
    }
}

/// Feasible interval of real `H` for real bit-widths `q`, bandwidth `b`
/// and budget `eps_q`: the intersection over devices of
/// `(a1 H + a2)^2 (T_cm,i / H + T_cp,i) <= M (eps - eps_q)^2 t_max`.
pub fn h_bounds<T: Scalar>(sc: &Scenario<T>, q: &[T], b: &[T], eps_q: T) -> Result<(T, T)> {
    let ctx = Ctx::new(sc)?;
    ctx.check_len(q.len())?;
    ctx.check_len(b.len())?;
    ctx.require_deadline()?;
    ctx.h_interval(q, b, eps_q)
}

/// Optimal real `H` and `eps_q = phi(q)` for fixed real bit-widths and
/// bandwidth.
pub fn solve_h<T: Scalar>(sc: &Scenario<T>, q: &[T], b: &[T]) -> Result<(T, T)> {
    let ctx = Ctx::new(sc)?;
    ctx.check_len(q.len())?;
    ctx.check_len(b.len())?;
    ctx.require_deadline()?;
    let eps_q = ctx.phi(q);
    Ok((ctx.h_step(q, b, eps_q)?, eps_q))
}

/// Optimal real bit exponents for fixed `H`, `eps_q` and bandwidth.
pub fn solve_q_given_b<T: Scalar>(sc: &Scenario<T>, h: T, eps_q: T, b_prev: &[T]) -> Result<QSolution<T>> {
    let ctx = Ctx::new(sc)?;
    ctx.check_len(b_prev.len())?;
    ctx.require_deadline()?;
    ctx.q_step(h, eps_q, b_prev)
}

/// Optimal bandwidth for fixed `H`, `eps_q` and real bit exponents.
pub fn solve_b_given_q<T: Scalar>(sc: &Scenario<T>, h: T, eps_q: T, qtilde: &[T]) -> Result<BSolution<T>> {
    solve_b_given_q_with(sc, h, eps_q, qtilde, BandwidthRule::Kkt)
}

pub fn solve_b_given_q_with<T: Scalar>(
    sc: &Scenario<T>,
    h: T,
    eps_q: T,
    qtilde: &[T],
    rule: BandwidthRule,
) -> Result<BSolution<T>> {
    let ctx = Ctx::new(sc)?;
    ctx.check_len(qtilde.len())?;
    ctx.require_deadline()?;
    let bits: Vec<T> = qtilde.iter().map(|q| q.exp2()).collect();
    ctx.b_step(h, eps_q, &bits, rule)
}

/// Best integer `H`, `eps_q` and bandwidth for fixed integer bit-widths.
pub fn optimize_given_q<T: Scalar>(sc: &Scenario<T>, q: &[u32]) -> Result<Allocation<T>> {
    let ctx = Ctx::new(sc)?;
    ctx.check_len(q.len())?;
    ctx.require_deadline()?;
    if let Some(&bad) = q.iter().find(|x| !ctx.q_set.contains(x)) {
        return Err(FwqError::InvalidBitWidth(bad));
    }
    Ok(ctx.allocation(&ctx.discrete(q)?))
}

pub fn iterate<T: Scalar>(sc: &Scenario<T>, init: Option<&Allocation<T>>) -> Result<Allocation<T>> {
    iterate_with(sc, init, IterateOptions::default())
}

/// Alternating minimization followed by rounding.
///
/// The scenario is first checked at the maximal memory-feasible
/// bit-widths (and, failing that, at the minimal ones). The relaxed loop
/// then runs from the maximal bit-widths with the budget `eps_q` starting
/// at their quantization error; with `budget_search` the starting budget
/// is additionally scanned and refined. The relaxed optimum is rounded
/// (`q~` to the nearest integer with ties up, `H` to the better of its
/// integer neighbours) and the bandwidth is re-solved. With
/// `discrete_polish` the rounded point competes with the uniform
/// bit-width assignments and is improved by single-device moves.
pub fn iterate_with<T: Scalar>(
    sc: &Scenario<T>,
    init: Option<&Allocation<T>>,
    opts: IterateOptions,
) -> Result<Allocation<T>> {
    let ctx = Ctx::new(sc)?;
    ctx.require_deadline()?;
    let n = ctx.n();
    let top = *ctx.q_set.last().expect("non-empty");
    let q_max: Vec<u32> = (0..n).map(|i| ctx.max_fitting(i, top)).collect();
    let mut warm = ctx.discrete(&q_max);
    if let Err(e) = &warm {
        if ctx.discrete(&vec![ctx.q_set[0]; n]).is_err() {
            match ctx.restore(&q_max) {
                Some(c) => warm = Ok(c),
                None => return Err(e.clone()),
            }
        }
    }

    let mut relaxed = None;
    let mut history = Vec::new();
    let mut converged = true;
    let mut iterations = 0;
    let mut rounded = None;
    if let Ok(run) = ctx.best_relaxed(opts) {
        let sol = ctx.finish_relaxed(&run);
        rounded = ctx.discrete(&ctx.round_bits(&sol.qtilde)).ok();
        relaxed = Some(sol);
        history = run.history;
        converged = run.converged;
        iterations = run.iters;
    }

    let mut best = match (rounded, warm.ok()) {
        (Some(r), Some(w)) if opts.discrete_polish && w.obj < r.obj => Some(w),
        (Some(r), _) => Some(r),
        (None, w) => w,
    };
    if opts.discrete_polish {
        let mut pool: Vec<Cand<T>> = best.take().into_iter().collect();
        if let Some(a) = init {
            if let Ok(c) = ctx.discrete(&a.q) {
                pool.push(c);
            }
        }
        for &q in &ctx.q_set {
            let uniform: Vec<u32> = (0..n).map(|i| ctx.max_fitting(i, q)).collect();
            if let Ok(c) = ctx.discrete(&uniform) {
                pool.push(c);
            }
        }
        best = pool.into_iter().reduce(|a, b| if b.obj < a.obj { b } else { a });
        if let Some(mut cur) = best.take() {
            loop {
                let mut step: Option<Cand<T>> = None;
                for i in 0..n {
                    for &q in &ctx.q_set {
                        if q == cur.q[i] || !ctx.fits(i, q) {
                            continue;
                        }
                        let mut qv = cur.q.clone();
                        qv[i] = q;
                        if let Ok(c) = ctx.discrete(&qv) {
                            let bar = step.as_ref().map_or(cur.obj * (T::one() - T::lit(1e-12)), |s| s.obj);
                            if c.obj < bar {
                                step = Some(c);
                            }
                        }
                    }
                }
                match step {
                    Some(c) => cur = c,
                    None => break,
                }
            }
            best = Some(cur);
        }
    }

    let best = best.ok_or_else(|| FwqError::NoFeasibleAllocation("rounding produced no feasible point".into()))?;
    let mut alloc = ctx.allocation(&best);
    alloc.relaxed = relaxed;
    alloc.history = history;
    alloc.converged = converged;
    alloc.iterations = iterations;
    Ok(alloc)
}

/// Exhaustive search over integer `H`, all bit-width combinations from the
/// scenario's set, and bandwidth on a simplex grid plus the closed-form
/// optimum for each `(H, q)`. `eps_q` is set to `phi(q)`.
pub fn brute_force<T: Scalar>(sc: &Scenario<T>, grid: BruteForceGrid) -> Result<Allocation<T>> {
    use rayon::prelude::*;

    let ctx = Ctx::new(sc)?;
    ctx.require_deadline()?;
    let n = ctx.n();
    if n > 4 {
        return Err(FwqError::InvalidInput(format!("brute force supports at most 4 devices, got {n}")));
    }
    if grid.h_max == 0 || grid.b_resolution < n as u32 {
        return Err(FwqError::InvalidInput("grid needs h_max >= 1 and b_resolution >= device count".into()));
    }
    let options: Vec<Vec<u32>> = (0..n)
        .map(|i| ctx.q_set.iter().copied().filter(|&q| ctx.fits(i, q)).collect())
        .collect();
    let mut combos: Vec<Vec<u32>> = vec![Vec::new()];
    for opts in &options {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                opts.iter().map(move |&q| {
                    let mut c = c.clone();
                    c.push(q);
                    c
                })
            })
            .collect();
    }
    let simplex = simplex_grid(n, grid.b_resolution);
    let b_max = sc.net.b_max;
    let step = b_max / bits_of::<T>(grid.b_resolution);

    // (objective, H, bit combo index, bandwidth grid index, b)
    type Best<T> = Option<(T, u32, usize, usize, Vec<T>)>;
    let per_h: Vec<Best<T>> = (1..=grid.h_max)
        .into_par_iter()
        .map(|hh| {
            let h = bits_of::<T>(hh);
            let mut best: Best<T> = None;
            for (ci, q) in combos.iter().enumerate() {
                let bits: Vec<T> = q.iter().map(|&x| bits_of(x)).collect();
                let eps_q = ctx.phi(&bits);
                let Ok(k) = ctx.k(h, eps_q) else { continue };
                let deadline_ok = |b: &[T]| {
                    (0..n).all(|i| {
                        k * (h * ctx.tcp(i, bits[i]) + ctx.dev[i].alpha / b[i])
                            <= sc.t_max * (T::one() + T::lit(1e-9))
                    })
                };
                let consider = |b: Vec<T>, bi: usize, best: &mut Best<T>| {
                    if !deadline_ok(&b) {
                        return;
                    }
                    let o = ctx.objective(h, eps_q, &bits, &b);
                    if best.as_ref().is_none_or(|x| o < x.0) {
                        *best = Some((o, hh, ci, bi, b));
                    }
                };
                if let Ok(bs) = ctx.b_step(h, eps_q, &bits, BandwidthRule::Kkt) {
                    consider(bs.b, 0, &mut best);
                }
                for (bi, parts) in simplex.iter().enumerate() {
                    let b: Vec<T> = parts.iter().map(|&p| step * bits_of::<T>(p)).collect();
                    consider(b, bi + 1, &mut best);
                }
            }
            best
        })
        .collect();

    let best = per_h
        .into_iter()
        .flatten()
        .reduce(|a, b| if b.0 < a.0 { b } else { a })
        .ok_or_else(|| FwqError::NoFeasibleAllocation("exhaustive search found no feasible point".into()))?;
    let (_, h, ci, _, b) = best;
    let q = combos[ci].clone();
    let bits: Vec<T> = q.iter().map(|&x| bits_of(x)).collect();
    let eps_q = ctx.phi(&bits);
    let obj = ctx.objective(bits_of(h), eps_q, &bits, &b);
    Ok(ctx.allocation(&Cand { h, q, b, eps_q, obj }))
}

/// All compositions of `total` into `n` positive parts.
fn simplex_grid(n: usize, total: u32) -> Vec<Vec<u32>> {
    fn rec(n: usize, total: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if n == 1 {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in 1..=total.saturating_sub(n as u32 - 1) {
            prefix.push(first);
            rec(n - 1, total - first, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n > 0 && total >= n as u32 {
        rec(n, total, &mut Vec::new(), &mut out);
    }
    out
}
