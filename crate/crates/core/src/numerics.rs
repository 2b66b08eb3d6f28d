//! Small bracketed 1-D routines shared by the solver and the fitter.

use crate::scalar::Scalar;

pub const MAX_HALVINGS: usize = 200;

/// Root of a continuous `f` on `[lo, hi]` where `f(lo)` and `f(hi)` differ
/// in sign. Returns the bracket `(lo, hi)` after convergence, oriented so
/// that the first element keeps the sign of `f(lo)`.
pub fn bisect<T: Scalar>(mut lo: T, mut hi: T, rel_tol: T, f: impl Fn(T) -> T) -> (T, T) {
    let f_lo = f(lo);
    let neg_at_lo = f_lo < T::zero();
    for _ in 0..MAX_HALVINGS {
        let mid = (lo + hi) / T::lit(2.0);
        if mid == lo || mid == hi {
            break;
        }
        let fm = f(mid);
        if fm == T::zero() {
            return (mid, mid);
        }
        if (fm < T::zero()) == neg_at_lo {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo).abs() <= rel_tol * lo.abs().max(hi.abs()) {
            break;
        }
    }
    (lo, hi)
}

/// Bisection in log space for strictly positive brackets spanning many
/// decades.
pub fn bisect_geometric<T: Scalar>(lo: T, hi: T, rel_tol: T, f: impl Fn(T) -> T) -> (T, T) {
    let (a, b) = bisect(lo.ln(), hi.ln(), rel_tol.min(T::lit(1e-3)) * T::lit(1e-2), |x| f(x.exp()));
    let (a, b) = (a.exp(), b.exp());
    if (b - a).abs() <= rel_tol * a.abs().max(b.abs()) {
        return (a, b);
    }
    bisect(a, b, rel_tol, f)
}

/// Golden-section minimization of a unimodal `f` on `[lo, hi]`.
pub fn golden_section_min<T: Scalar>(mut lo: T, mut hi: T, rel_tol: T, f: impl Fn(T) -> T) -> T {
    let inv_phi = (T::lit(5.0).sqrt() - T::one()) / T::lit(2.0);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..MAX_HALVINGS * 2 {
        if (hi - lo).abs() <= rel_tol * (lo.abs() + hi.abs()) {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    (lo + hi) / T::lit(2.0)
}

/// Solves `a x = b` for a small dense system by Gaussian elimination with
/// partial pivoting. `None` when a pivot falls below `rel_pivot` times the
/// largest diagonal magnitude.
pub fn solve_dense<T: Scalar>(mut a: Vec<Vec<T>>, mut b: Vec<T>, rel_pivot: T) -> Option<Vec<T>> {
    let n = b.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(T::zero(), T::max);
    if scale == T::zero() {
        return None;
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[piv][col].abs() <= rel_pivot * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        let (top, rest) = a.split_at_mut(col + 1);
        let pivot_row = &top[col];
        for (r, row) in rest.iter_mut().enumerate() {
            let row_idx = col + 1 + r;
            let factor = row[col] / pivot_row[col];
            for (x, &v) in row[col..n].iter_mut().zip(&pivot_row[col..n]) {
                *x = *x - factor * v;
            }
            let v = b[col];
            b[row_idx] = b[row_idx] - factor * v;
        }
    }
    let mut x = vec![T::zero(); n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc = acc - a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn bisect_finds_sqrt2() {
        let (a, b) = bisect(0.0f64, 2.0, 1e-15, |x| x * x - 2.0);
        assert_relative_eq!(a, 2f64.sqrt(), max_relative = 1e-14);
        assert!(a * a - 2.0 <= 0.0);
        assert!(b * b - 2.0 >= 0.0);
    }

    #[test]
    fn geometric_bisect_spans_decades() {
        let (a, _) = bisect_geometric(1e-30f64, 1e30, 1e-13, |x| x.ln() - 1e-5f64.ln());
        assert_relative_eq!(a, 1e-5, max_relative = 1e-12);
    }

    #[test]
    fn golden_section_quadratic() {
        let x = golden_section_min(-3.0f64, 5.0, 1e-12, |x| (x - 1.25).powi(2) + 3.0);
        assert_relative_eq!(x, 1.25, max_relative = 1e-6);
    }

    #[test]
    fn dense_solve() {
        let a = vec![vec![2.0, 1.0, 0.0], vec![1.0, 3.0, 1.0], vec![0.0, 1.0, 4.0]];
        let x = solve_dense(a, vec![3.0, 5.0, 5.0], 1e-12).unwrap();
        for v in x {
            assert_relative_eq!(v, 1.0, max_relative = 1e-12);
        }
        let singular = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        assert!(solve_dense(singular, vec![1.0, 2.0], 1e-12).is_none());
    }
}
