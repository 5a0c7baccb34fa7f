//! Log-cumulative-hazard basis functions.
//!
//! A survival model here is `P(T <= t) = 1 - exp(-exp(a(t)' theta))` where
//! `a: R+ -> R^P` is one of three bases:
//!
//! * Weibull: `a(t) = (1, log t)`, the two-parameter log-linear baseline,
//! * Bernstein: a Bernstein polynomial of the given order in standardized
//!   log time, monotone whenever `theta` is non-decreasing,
//! * Nonparametric: no parametric form; it only carries a fitted step
//!   cumulative hazard and is used for log-rank scores.
//!
//! Outside the Bernstein support the basis is extrapolated linearly in
//! log time, so the implied log-cumulative hazard stays monotone and
//! likelihood contributions of out-of-range validation times stay finite.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::likelihood::CumulativeHazard;

/// Lower bound enforced on the Weibull accelerator `theta_2` so the
/// feasible set is closed for the constrained optimizer.
pub const WEIBULL_ACCEL_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("basis evaluation requires a positive time, got {0}")]
    NonPositiveTime(f64),
    #[error("the nonparametric basis has no parametric a(t); only log-rank scores are available")]
    NonparametricUnsupported,
    #[error("Bernstein order must be at least 1, got {0}")]
    InvalidOrder(usize),
    #[error("Bernstein support must satisfy lo < hi, got ({0}, {1})")]
    InvalidSupport(f64, f64),
    #[error("support requires at least two distinct finite log-times")]
    DegenerateSupport,
    #[error("parameter length {got} does not match basis dimension {expected}")]
    DimensionMismatch { got: usize, expected: usize },
}

/// One of the three basis parameterizations.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum Basis {
    /// `a(t) = (1, log t)`.
    Weibull,
    /// Bernstein polynomial of degree `order` (so `order + 1` parameters)
    /// in `u = (log t - lo) / (hi - lo)`.
    Bernstein { order: usize, support: (f64, f64) },
    /// Log-rank scores only; `baseline` is the node-local Nelson-Aalen
    /// cumulative hazard, populated at fit time.
    Nonparametric { baseline: Option<CumulativeHazard> },
}

impl Basis {
    pub fn weibull() -> Self {
        Basis::Weibull
    }

    pub fn bernstein(order: usize, support: (f64, f64)) -> Result<Self, BasisError> {
        if order < 1 {
            return Err(BasisError::InvalidOrder(order));
        }
        if !(support.0 < support.1) || !support.0.is_finite() || !support.1.is_finite() {
            return Err(BasisError::InvalidSupport(support.0, support.1));
        }
        Ok(Basis::Bernstein { order, support })
    }

    pub fn nonparametric() -> Self {
        Basis::Nonparametric { baseline: None }
    }

    /// Number of parameters P, or None for the nonparametric basis.
    pub fn param_dim(&self) -> Option<usize> {
        match self {
            Basis::Weibull => Some(2),
            Basis::Bernstein { order, .. } => Some(order + 1),
            Basis::Nonparametric { .. } => None,
        }
    }

    pub fn is_parametric(&self) -> bool {
        !matches!(self, Basis::Nonparametric { .. })
    }

    /// Evaluate `a(t)` into `out` (length P).
    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<(), BasisError> {
        if t <= 0.0 || !t.is_finite() {
            return Err(BasisError::NonPositiveTime(t));
        }
        match self {
            Basis::Weibull => {
                check_len(out, 2)?;
                out[0] = 1.0;
                out[1] = t.ln();
                Ok(())
            }
            Basis::Bernstein { order, support } => {
                check_len(out, order + 1)?;
                let span = support.1 - support.0;
                let u = (t.ln() - support.0) / span;
                let uc = u.clamp(0.0, 1.0);
                bernstein_all(*order, uc, out);
                if u != uc {
                    // linear extrapolation in log time beyond the support
                    let mut d = vec![0.0; order + 1];
                    bernstein_deriv_all(*order, uc, &mut d);
                    for (o, dk) in out.iter_mut().zip(&d) {
                        *o += (u - uc) * dk;
                    }
                }
                Ok(())
            }
            Basis::Nonparametric { .. } => Err(BasisError::NonparametricUnsupported),
        }
    }

    /// Evaluate `d a(t) / d t` into `out` (length P).
    pub fn eval_deriv_into(&self, t: f64, out: &mut [f64]) -> Result<(), BasisError> {
        if t <= 0.0 || !t.is_finite() {
            return Err(BasisError::NonPositiveTime(t));
        }
        match self {
            Basis::Weibull => {
                check_len(out, 2)?;
                out[0] = 0.0;
                out[1] = 1.0 / t;
                Ok(())
            }
            Basis::Bernstein { order, support } => {
                check_len(out, order + 1)?;
                let span = support.1 - support.0;
                let u = ((t.ln() - support.0) / span).clamp(0.0, 1.0);
                bernstein_deriv_all(*order, u, out);
                // chain rule through u(t); the du-derivative is held at its
                // boundary value outside the support, matching the linear
                // extrapolation of eval_into
                for o in out.iter_mut() {
                    *o /= span * t;
                }
                Ok(())
            }
            Basis::Nonparametric { .. } => Err(BasisError::NonparametricUnsupported),
        }
    }

    /// `a(t)` as a fresh vector.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>, BasisError> {
        let p = self.param_dim().ok_or(BasisError::NonparametricUnsupported)?;
        let mut out = vec![0.0; p];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    /// `a'(t)` as a fresh vector.
    pub fn eval_deriv(&self, t: f64) -> Result<Vec<f64>, BasisError> {
        let p = self.param_dim().ok_or(BasisError::NonparametricUnsupported)?;
        let mut out = vec![0.0; p];
        self.eval_deriv_into(t, &mut out)?;
        Ok(out)
    }

    /// Linear inequality constraints `D theta >= rhs` that keep the
    /// log-cumulative hazard non-decreasing.
    pub fn constraints(&self) -> Result<ConstraintSet, BasisError> {
        match self {
            Basis::Weibull => Ok(ConstraintSet {
                dim: 2,
                rows: vec![vec![0.0, 1.0]],
                rhs: vec![WEIBULL_ACCEL_FLOOR],
            }),
            Basis::Bernstein { order, .. } => {
                let p = order + 1;
                let mut rows = Vec::with_capacity(p - 1);
                for k in 0..p - 1 {
                    let mut row = vec![0.0; p];
                    row[k] = -1.0;
                    row[k + 1] = 1.0;
                    rows.push(row);
                }
                Ok(ConstraintSet {
                    dim: p,
                    rows,
                    rhs: vec![0.0; p - 1],
                })
            }
            Basis::Nonparametric { .. } => Err(BasisError::NonparametricUnsupported),
        }
    }
}

/// First-difference (or positivity, for Weibull) constraints `D theta >= rhs`.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
}

impl ConstraintSet {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// `D theta - rhs` for one row.
    pub fn slack(&self, j: usize, theta: &[f64]) -> f64 {
        let row = &self.rows[j];
        let mut s = 0.0;
        for (r, t) in row.iter().zip(theta) {
            s += r * t;
        }
        s - self.rhs[j]
    }

    /// Largest violation `max_j max(0, rhs_j - D_j theta)`.
    pub fn max_violation(&self, theta: &[f64]) -> f64 {
        (0..self.n_rows())
            .map(|j| (-self.slack(j, theta)).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn is_feasible(&self, theta: &[f64], tol: f64) -> bool {
        self.max_violation(theta) <= tol
    }
}

/// Default Bernstein support: the range of the observed finite log-time
/// bounds of the fitting data.
pub fn default_support(log_times: &[f64]) -> Result<(f64, f64), BasisError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in log_times {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !(lo < hi) {
        return Err(BasisError::DegenerateSupport);
    }
    Ok((lo, hi))
}

fn check_len(out: &[f64], p: usize) -> Result<(), BasisError> {
    if out.len() != p {
        return Err(BasisError::DimensionMismatch {
            got: out.len(),
            expected: p,
        });
    }
    Ok(())
}

/// All Bernstein basis polynomials of degree `order` at `u in [0, 1]`,
/// by the de Casteljau-style triangular recurrence.
fn bernstein_all(order: usize, u: f64, out: &mut [f64]) {
    let v = 1.0 - u;
    out[0] = 1.0;
    for j in 1..=order {
        out[j] = u * out[j - 1];
        for k in (1..j).rev() {
            out[k] = u * out[k - 1] + v * out[k];
        }
        out[0] *= v;
    }
}

/// `d/du` of every degree-`order` Bernstein polynomial at `u`:
/// `n (b_{k-1,n-1} - b_{k,n-1})`.
fn bernstein_deriv_all(order: usize, u: f64, out: &mut [f64]) {
    let n = order as f64;
    let mut lower = vec![0.0; order];
    bernstein_all(order - 1, u, &mut lower);
    out[0] = -n * lower[0];
    for k in 1..order {
        out[k] = n * (lower[k - 1] - lower[k]);
    }
    out[order] = n * lower[order - 1];
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn weibull_basis_values() {
        let b = Basis::weibull();
        assert_eq!(b.eval(1.0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(b.eval_deriv(2.0).unwrap(), vec![0.0, 0.5]);
        let a = b.eval(std::f64::consts::E).unwrap();
        assert_relative_eq!(a[1], 1.0, max_relative = 1e-15);
    }

    #[test]
    fn bernstein_midpoint_values() {
        // degree 1 at the support midpoint
        let b = Basis::bernstein(1, (0.0, 1.0)).unwrap();
        let a = b.eval((0.5f64).exp()).unwrap();
        assert_relative_eq!(a[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(a[1], 0.5, epsilon = 1e-14);

        // degree 2: binomial weights at u = 0.5
        let b = Basis::bernstein(2, (0.0, 1.0)).unwrap();
        let a = b.eval((0.5f64).exp()).unwrap();
        assert_relative_eq!(a[0], 0.25, epsilon = 1e-14);
        assert_relative_eq!(a[1], 0.5, epsilon = 1e-14);
        assert_relative_eq!(a[2], 0.25, epsilon = 1e-14);
    }

    #[test]
    fn bernstein_endpoint_property() {
        for order in [1, 3, 5, 8] {
            let b = Basis::bernstein(order, (0.0, 1.0)).unwrap();
            let a = b.eval(1.0).unwrap(); // log 1 = 0 -> u = 0
            assert_relative_eq!(a[0], 1.0, epsilon = 1e-14);
            for k in 1..=order {
                assert_relative_eq!(a[k], 0.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn bernstein_degree_one_derivative() {
        let b = Basis::bernstein(1, (0.0, 1.0)).unwrap();
        let t = (0.3f64).exp();
        let d = b.eval_deriv(t).unwrap();
        assert_relative_eq!(d[0], -1.0 / t, max_relative = 1e-12);
        assert_relative_eq!(d[1], 1.0 / t, max_relative = 1e-12);
    }

    #[test]
    fn derivative_matches_central_differences() {
        // finite-difference oracle, interior and extrapolated points
        for basis in [
            Basis::weibull(),
            Basis::bernstein(5, (0.0, 2.0)).unwrap(),
            Basis::bernstein(8, (-1.0, 3.0)).unwrap(),
        ] {
            for &t in &[0.5f64, 1.1, 2.5, 6.0, 25.0, 80.0] {
                let h = 1e-5 * t;
                let hi = basis.eval(t + h).unwrap();
                let lo = basis.eval(t - h).unwrap();
                let d = basis.eval_deriv(t).unwrap();
                for k in 0..d.len() {
                    let fd = (hi[k] - lo[k]) / (2.0 * h);
                    let scale = d[k].abs().max(1e-8);
                    assert!(
                        (fd - d[k]).abs() / scale < 1e-6,
                        "basis {basis:?} t={t} k={k}: fd={fd} analytic={}",
                        d[k]
                    );
                }
            }
        }
    }

    #[test]
    fn partition_of_unity_and_extrapolation() {
        let b = Basis::bernstein(6, (0.0, 2.0)).unwrap();
        for &t in &[1.0f64, 1.5, 3.0, 7.0, 0.2, 30.0] {
            let a = b.eval(t).unwrap();
            let s: f64 = a.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "sum {s} at t={t}");
        }
    }

    #[test]
    fn extrapolation_is_continuous_and_monotone() {
        let b = Basis::bernstein(4, (0.0, 1.0)).unwrap();
        let theta = [0.0, 0.3, 0.5, 1.0, 2.0];
        let z = |t: f64| -> f64 {
            b.eval(t)
                .unwrap()
                .iter()
                .zip(&theta)
                .map(|(a, th)| a * th)
                .sum()
        };
        // continuity across the upper boundary
        let hi = 1.0f64.exp();
        assert!((z(hi * (1.0 + 1e-9)) - z(hi * (1.0 - 1e-9))).abs() < 1e-7);
        // monotone across a grid spanning both extrapolation regions
        let mut prev = f64::NEG_INFINITY;
        for i in 0..200 {
            let t = 0.05 * (1.1f64).powi(i);
            let v = z(t);
            assert!(v >= prev - 1e-12, "z not monotone at t={t}");
            prev = v;
        }
    }

    #[test]
    fn monotone_map_under_constraints() {
        let b = Basis::bernstein(5, (0.0, 1.0)).unwrap();
        let cons = b.constraints().unwrap();
        let theta = [-1.0, -0.5, -0.5, 0.2, 0.8, 1.4];
        assert!(cons.is_feasible(&theta, 0.0));
        let z = |t: f64| -> f64 {
            b.eval(t)
                .unwrap()
                .iter()
                .zip(&theta)
                .map(|(a, th)| a * th)
                .sum()
        };
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=100 {
            let t = (i as f64 / 100.0).exp();
            let v = z(t);
            assert!(v >= prev - 1e-12);
            prev = v;
        }
    }

    #[test]
    fn weibull_constraint_row() {
        let cons = Basis::weibull().constraints().unwrap();
        assert_eq!(cons.rows, vec![vec![0.0, 1.0]]);
        assert!(cons.is_feasible(&[5.0, 1.0], 0.0));
        assert!(!cons.is_feasible(&[5.0, 0.0], 0.0));
    }

    #[test]
    fn default_support_cases() {
        assert_eq!(default_support(&[0.0, 1.0, 2.0]).unwrap(), (0.0, 2.0));
        assert!(matches!(
            default_support(&[5.0]),
            Err(BasisError::DegenerateSupport)
        ));
        assert!(matches!(
            default_support(&[5.0, 5.0]),
            Err(BasisError::DegenerateSupport)
        ));
    }

    #[test]
    fn eval_rejects_bad_input() {
        let b = Basis::bernstein(3, (0.0, 1.0)).unwrap();
        assert!(matches!(b.eval(0.0), Err(BasisError::NonPositiveTime(_))));
        assert!(matches!(b.eval(-1.0), Err(BasisError::NonPositiveTime(_))));
        assert!(matches!(
            Basis::nonparametric().eval(1.0),
            Err(BasisError::NonparametricUnsupported)
        ));
        assert!(Basis::bernstein(0, (0.0, 1.0)).is_err());
        assert!(Basis::bernstein(3, (1.0, 1.0)).is_err());
    }
}
