//! Convergence bound of quantized local SGD, the round-count function
//! `K(H, eps_q)` and fitting of its coefficients from training traces.
//!
//! Coefficient convention: `a1` multiplies `H`, `a2` is the constant and
//! `a3` weights the quantization floor, i.e. the target constraint reads
//! `(a1 H + a2) / sqrt(M H K) + a3 sum_i pi_i^2 delta_i <= eps`.
//!
//! Round bookkeeping: `K` counts communication rounds and `R = H K` counts
//! local iterations. [`bound_value`] takes `K` and evaluates the bound at
//! `R = H K`.

use serde::{Deserialize, Serialize};

use crate::error::{FwqError, Result};
use crate::numerics::solve_dense;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCoeffs<T> {
    pub a1: T,
    pub a2: T,
    pub a3: T,
    /// Target average squared gradient norm.
    pub eps: T,
    pub m_batch: u32,
    /// Weight-magnitude constant `s` in `delta_i = s / (2^q_i - 1)`.
    pub s_scale: T,
}

impl<T: Scalar> ConvergenceCoeffs<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a1", self.a1), ("a2", self.a2), ("a3", self.a3), ("eps", self.eps), ("s_scale", self.s_scale)] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(FwqError::InvalidInput(format!("convergence.{name} must be > 0, got {v}")));
            }
        }
        if self.m_batch == 0 {
            return Err(FwqError::InvalidInput("convergence.m_batch must be >= 1".into()));
        }
        Ok(())
    }

    pub fn m(&self) -> T {
        T::from_u32(self.m_batch).expect("batch size fits")
    }
}

/// Problem constants that only the raw bound needs; everywhere else they
/// are absorbed into `(a1, a2, a3)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams<T> {
    pub lipschitz_l: T,
    pub grad_second_moment_g: T,
    /// Per-device stochastic-gradient standard deviations `tau_i`.
    pub variances: Vec<T>,
    /// Expected initial loss `E[F(w^0)]`.
    pub f_initial: T,
    pub f_star: T,
    pub dim_d: T,
}

/// `1 / (2^q - 1)` for a real bit-width `q`.
pub fn noise_weight<T: Scalar>(q: T) -> T {
    T::one() / (q * T::LN_2()).exp_m1()
}

/// Evaluates the average-squared-gradient bound after `k_rounds`
/// communication rounds of `h` local steps each:
/// `4 Gamma / sqrt(M R) + 6 H L tau / sqrt(M R) + sqrt(d) L G sum pi_i^2 delta_i`
/// with `R = h * k_rounds` and `tau = sum pi_i^2 tau_i^2`.
pub fn bound_value<T: Scalar>(
    k_rounds: u64,
    h: u64,
    theory: &TheoryParams<T>,
    m_batch: u32,
    pis: &[T],
    deltas: &[T],
) -> Result<T> {
    if k_rounds == 0 || h == 0 {
        return Err(FwqError::InvalidInput("rounds and local steps must be >= 1".into()));
    }
    if pis.len() != deltas.len() || pis.len() != theory.variances.len() {
        return Err(FwqError::DimensionMismatch {
            expected: pis.len(),
            got: deltas.len().min(theory.variances.len()),
        });
    }
    let r = T::from_u64(k_rounds * h).expect("iteration count fits");
    let m = T::from_u32(m_batch).expect("batch fits");
    let h = T::from_u64(h).expect("h fits");
    let root = (m * r).sqrt();
    let tau: T = pis.iter().zip(&theory.variances).map(|(&p, &t)| p * p * t * t).sum();
    let floor: T = pis.iter().zip(deltas).map(|(&p, &d)| p * p * d).sum();
    let gap = theory.f_initial - theory.f_star;
    let l = theory.lipschitz_l;
    Ok(T::lit(4.0) * gap / root
        + T::lit(6.0) * h * l * tau / root
        + theory.dim_d.sqrt() * l * theory.grad_second_moment_g * floor)
}

/// Real-valued round count `K = (a1 h + a2)^2 / (M h (eps - eps_q)^2)`.
pub fn rounds_required<T: Scalar>(h: T, eps_q: T, coeffs: &ConvergenceCoeffs<T>) -> Result<T> {
    if !(h > T::zero()) {
        return Err(FwqError::InvalidInput(format!("local steps must be positive, got {h}")));
    }
    if !(eps_q < coeffs.eps) || eps_q < T::zero() {
        return Err(FwqError::TargetInfeasible {
            eps_q: eps_q.as_f64(),
            eps: coeffs.eps.as_f64(),
        });
    }
    let gap = coeffs.eps - eps_q;
    let num = coeffs.a1 * h + coeffs.a2;
    Ok(num * num / (coeffs.m() * h * gap * gap))
}

/// `a3 * sum_i pi_i^2 * s / (2^{q_i} - 1)` for real bit-widths.
pub fn quant_error_term<T: Scalar>(pis: &[T], bits: &[T], coeffs: &ConvergenceCoeffs<T>) -> T {
    pis.iter()
        .zip(bits)
        .map(|(&p, &q)| coeffs.a3 * p * p * coeffs.s_scale * noise_weight(q))
        .sum()
}

/// One training run summarized for coefficient fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTrace<T> {
    pub h: u32,
    pub m_batch: u32,
    pub pis: Vec<T>,
    /// Bit-width per device; `None` means full precision (no noise floor).
    pub bits: Vec<Option<u32>>,
    /// Average squared gradient norm after rounds `1, 2, ...`.
    pub grad_norm_sq: Vec<T>,
}

impl<T: Scalar> FitTrace<T> {
    fn floor_feature(&self, s_scale: T) -> T {
        self.pis
            .iter()
            .zip(&self.bits)
            .map(|(&p, b)| match b {
                Some(q) => p * p * s_scale * noise_weight(T::from_u32(*q).expect("bits fit")),
                None => T::zero(),
            })
            .sum()
    }

    /// Interpolated (real) round at which the trace first drops to `target`.
    /// `None` when the trace starts at or below the target or never reaches it.
    pub fn rounds_to_target(&self, target: T) -> Option<T> {
        let g = &self.grad_norm_sq;
        if g.first().is_none_or(|&g0| g0 <= target) {
            return None;
        }
        let k = g.iter().position(|&v| v <= target)?;
        let (prev, cur) = (g[k - 1], g[k]);
        let frac = (prev - target) / (prev - cur);
        Some(T::from_usize_lossy(k) + frac)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult<T> {
    pub coeffs: ConvergenceCoeffs<T>,
    pub residual_norm: T,
    pub r_squared: T,
    pub n_equations: usize,
}

/// Non-negative least-squares fit of `(a1, a2, a3)`.
///
/// For every trace and every target level `t` that the trace crosses, the
/// crossing round `K` yields one equation
/// `t = a1 sqrt(H / (M K)) + a2 / sqrt(M H K) + a3 sum pi_i^2 delta_i`.
/// The returned coefficients carry `eps` and `s_scale` from the arguments
/// and `m_batch` from the first trace.
pub fn fit_coeffs<T: Scalar>(
    traces: &[FitTrace<T>],
    targets: &[T],
    eps: T,
    s_scale: T,
) -> Result<FitResult<T>> {
    let mut settings: Vec<(u32, &[Option<u32>])> = Vec::new();
    for t in traces {
        if t.pis.len() != t.bits.len() {
            return Err(FwqError::DimensionMismatch {
                expected: t.pis.len(),
                got: t.bits.len(),
            });
        }
        let key = (t.h, t.bits.as_slice());
        if !settings.contains(&key) {
            settings.push(key);
        }
    }
    if settings.len() < 3 {
        return Err(FwqError::UnderdeterminedFit(format!(
            "need at least 3 traces with distinct (H, bit-width) settings, got {}",
            settings.len()
        )));
    }

    let mut rows: Vec<[T; 3]> = Vec::new();
    let mut rhs: Vec<T> = Vec::new();
    for t in traces {
        let m = T::from_u32(t.m_batch).expect("batch fits");
        let h = T::from_u32(t.h).expect("h fits");
        let floor = t.floor_feature(s_scale);
        for &target in targets {
            if let Some(k) = t.rounds_to_target(target) {
                rows.push([(h / (m * k)).sqrt(), T::one() / (m * h * k).sqrt(), floor]);
                rhs.push(target);
            }
        }
    }
    if rows.len() < 3 {
        return Err(FwqError::UnderdeterminedFit(format!(
            "only {} (trace, target) crossings available",
            rows.len()
        )));
    }

    let x = nnls3(&rows, &rhs)?;
    let pred = |r: &[T; 3]| r[0] * x[0] + r[1] * x[1] + r[2] * x[2];
    let ss_res: T = rows.iter().zip(&rhs).map(|(r, &y)| (y - pred(r)).powi(2)).sum();
    let mean = rhs.iter().copied().sum::<T>() / T::from_usize_lossy(rhs.len());
    let ss_tot: T = rhs.iter().map(|&y| (y - mean).powi(2)).sum();
    let r_squared = if ss_tot > T::zero() { T::one() - ss_res / ss_tot } else { T::one() };
    Ok(FitResult {
        coeffs: ConvergenceCoeffs {
            a1: x[0],
            a2: x[1],
            a3: x[2],
            eps,
            m_batch: traces[0].m_batch,
            s_scale,
        },
        residual_norm: ss_res.sqrt(),
        r_squared,
        n_equations: rows.len(),
    })
}

/// Exact NNLS for three unknowns: enumerate the passive sets, solve the
/// column-normalized normal equations on each, keep the best non-negative
/// solution.
fn nnls3<T: Scalar>(rows: &[[T; 3]], rhs: &[T]) -> Result<[T; 3]> {
    let norms: Vec<T> = (0..3)
        .map(|j| rows.iter().map(|r| r[j] * r[j]).sum::<T>().sqrt())
        .collect();
    let pivot = T::epsilon().sqrt() * T::lit(1e-2);
    let gram = |cols: &[usize]| -> (Vec<Vec<T>>, Vec<T>) {
        let a = cols
            .iter()
            .map(|&i| {
                cols.iter()
                    .map(|&j| rows.iter().map(|r| r[i] * r[j]).sum::<T>() / (norms[i] * norms[j]))
                    .collect()
            })
            .collect();
        let b = cols
            .iter()
            .map(|&i| rows.iter().zip(rhs).map(|(r, &y)| r[i] * y).sum::<T>() / norms[i])
            .collect();
        (a, b)
    };
    if norms.iter().any(|&n| n == T::zero()) {
        return Err(FwqError::UnderdeterminedFit("a regressor column is identically zero".into()));
    }
    let (a, b) = gram(&[0, 1, 2]);
    if solve_dense(a, b, pivot).is_none() {
        return Err(FwqError::UnderdeterminedFit("design matrix is rank deficient".into()));
    }

    let mut best: Option<([T; 3], T)> = None;
    for mask in 1u8..8 {
        let cols: Vec<usize> = (0..3).filter(|j| mask & (1 << j) != 0).collect();
        let (a, b) = gram(&cols);
        let Some(z) = solve_dense(a, b, pivot) else { continue };
        if z.iter().any(|&v| v < T::zero()) {
            continue;
        }
        let mut x = [T::zero(); 3];
        for (&j, &v) in cols.iter().zip(&z) {
            x[j] = v / norms[j];
        }
        let res: T = rows
            .iter()
            .zip(rhs)
            .map(|(r, &y)| (y - (r[0] * x[0] + r[1] * x[1] + r[2] * x[2])).powi(2))
            .sum();
        if best.as_ref().is_none_or(|(_, r)| res < *r) {
            best = Some((x, res));
        }
    }
    Ok(best.map(|(x, _)| x).unwrap_or([T::zero(); 3]))
}
