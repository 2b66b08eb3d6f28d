//! Stochastic-rounding weight quantization onto a signed, uniformly spaced
//! `q`-bit level grid.
//!
//! A scheme with `q` bits has `A = 2^(q-1) - 1` positive levels
//! `I_a = a / A`, so the grid spans `[-1, 1]` and every `|w| <= s` is
//! representable after scaling by `s`. The noise figure that enters the
//! convergence bound is tracked separately as `s / (2^q - 1)`
//! (see [`quant_noise`]).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FwqError, Result};
use crate::scalar::Scalar;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantScheme<T> {
    bits: u32,
    num_pos_levels: u64,
    grid_resolution: T,
    noise_resolution: T,
}

impl<T: Scalar> QuantScheme<T> {
    pub fn new(bits: u32) -> Result<Self> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(FwqError::InvalidBitWidth(bits));
        }
        let num_pos_levels = (1u64 << (bits - 1)) - 1;
        let levels = T::from_u64(num_pos_levels).expect("level count fits");
        let full = T::from_u64((1u64 << bits) - 1).expect("level count fits");
        Ok(Self {
            bits,
            num_pos_levels,
            grid_resolution: T::one() / levels,
            noise_resolution: T::one() / full,
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// `A`, the number of strictly positive levels.
    pub fn num_pos_levels(&self) -> u64 {
        self.num_pos_levels
    }

    /// Spacing of the executable grid on `[0, 1]`, `1 / A`.
    pub fn grid_resolution(&self) -> T {
        self.grid_resolution
    }

    /// `1 / (2^q - 1)`, the resolution used for noise accounting.
    pub fn noise_resolution(&self) -> T {
        self.noise_resolution
    }

    fn levels(&self) -> T {
        T::from_u64(self.num_pos_levels).expect("level count fits")
    }

    /// Normalized value of the signed level index `a`, `a / A`.
    pub fn level(&self, a: i64) -> T {
        if a.unsigned_abs() == self.num_pos_levels {
            return if a < 0 { -T::one() } else { T::one() };
        }
        T::from_i64(a).expect("level index fits") / self.levels()
    }

    /// Whether the normalized magnitude `r` sits on a grid point, allowing
    /// for a few ulps of representation error.
    pub fn on_grid(&self, r: T) -> bool {
        self.snap(r.abs() * self.levels()).is_some()
    }

    fn snap(&self, x: T) -> Option<T> {
        let nearest = x.round();
        let tol = T::epsilon() * x.max(T::one()) * T::lit(4.0);
        ((x - nearest).abs() <= tol).then_some(nearest)
    }
}

/// Builds the scheme for a bit-width in `[2, 32]`.
pub fn make_scheme<T: Scalar>(q: u32) -> Result<QuantScheme<T>> {
    QuantScheme::new(q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedVector<T> {
    pub values: Vec<T>,
    pub scale: T,
    pub scheme: QuantScheme<T>,
}

/// Stochastically rounds `w` onto the grid `s * {-1, ..., -1/A, 0, 1/A, ..., 1}`.
///
/// Rounds up to the next level with probability equal to the fractional
/// distance from the lower level, so `E[Q(w)] = w`. Grid points are returned
/// unchanged without consuming randomness.
pub fn quantize_value<T: Scalar, R: Rng + ?Sized>(
    w: T,
    s: T,
    scheme: &QuantScheme<T>,
    rng: &mut R,
) -> Result<T> {
    if !(s > T::zero()) || !s.is_finite() {
        return Err(FwqError::InvalidScale(s.as_f64()));
    }
    if !w.is_finite() {
        return Err(FwqError::InvalidInput(format!("non-finite weight {w}")));
    }
    if w.abs() > s {
        return Err(FwqError::OutOfRange {
            value: w.as_f64(),
            scale: s.as_f64(),
        });
    }
    let mag = (w.abs() / s).min(T::one());
    let x = mag * scheme.levels();
    let level = match scheme.snap(x) {
        Some(exact) => exact,
        None => {
            let lower = x.floor();
            let p_up = x - lower;
            let u = T::lit(rng.random::<f64>());
            if u < p_up {
                lower + T::one()
            } else {
                lower
            }
        }
    };
    let a = level.to_i64().expect("level index fits");
    let signed = if w < T::zero() { -a } else { a };
    Ok(s * scheme.level(signed))
}

/// Quantizes `w` in place with scale `s = ||w||_inf` and returns the scale.
/// An all-zero vector keeps its values and reports scale 1.
pub fn quantize_in_place<T: Scalar, R: Rng + ?Sized>(
    w: &mut [T],
    scheme: &QuantScheme<T>,
    rng: &mut R,
) -> Result<T> {
    if w.is_empty() {
        return Err(FwqError::InvalidInput("cannot quantize an empty vector".into()));
    }
    let mut scale = T::zero();
    for &v in w.iter() {
        if !v.is_finite() {
            return Err(FwqError::InvalidInput(format!("non-finite entry {v}")));
        }
        scale = scale.max(v.abs());
    }
    if scale == T::zero() {
        return Ok(T::one());
    }
    for v in w.iter_mut() {
        *v = quantize_value(*v, scale, scheme, rng)?;
    }
    Ok(scale)
}

/// Quantizes every coordinate independently with the vector's ∞-norm as scale.
pub fn quantize_vector<T: Scalar, R: Rng + ?Sized>(
    w: &[T],
    scheme: &QuantScheme<T>,
    rng: &mut R,
) -> Result<QuantizedVector<T>> {
    let mut values = w.to_vec();
    let scale = quantize_in_place(&mut values, scheme, rng)?;
    Ok(QuantizedVector {
        values,
        scale,
        scheme: *scheme,
    })
}

/// Quantization noise `delta = s / (2^q - 1)` used by the convergence bound
/// and the optimizer.
pub fn quant_noise<T: Scalar>(scheme: &QuantScheme<T>, s: T) -> T {
    s * scheme.noise_resolution()
}
