//! Constrained maximum-likelihood fitting of transformation models.
//!
//! Monotonicity of the log-cumulative hazard is a set of linear
//! inequalities `D theta >= rhs`. Fits maximize the (weighted) censored
//! log-likelihood under these constraints with an augmented Lagrangian
//! over the inequalities; each subproblem is minimized by a spectral
//! projected gradient loop (Barzilai-Borwein step, nonmonotone line
//! search with memory 10).
//!
//! Entry points:
//! * [`fit_unconditional`] / [`fit_weighted`] — the prognostic model,
//!   optionally with nearest-neighbor weights and a warm start,
//! * [`fit_weighted_predictive`] — adds a constant treatment shift `beta`
//!   or a time-varying deviation `theta_tr` (both arms kept monotone),
//! * [`fit_shift_model`] — linear covariate shifts on the log-cumulative
//!   hazard scale, with optional treatment interactions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{Basis, BasisError, ConstraintSet, WEIBULL_ACCEL_FLOOR};
use crate::likelihood::{
    eval_exact, eval_interval, eval_left, eval_right, kaplan_meier, LikelihoodError, ModelParams,
    Subject, SurvResponse,
};

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error("fitting needs an effective sample of at least two (got total weight {0})")]
    TooFewSubjects(f64),
    #[error("degenerate data: all observations censored in the same direction, likelihood unbounded")]
    Degenerate,
    #[error("predictive fit requires treatment indicators on all weighted subjects")]
    MissingTreatment,
    #[error("shift model requires covariates on all weighted subjects")]
    MissingCovariates,
    #[error("no finite starting point found for the optimizer")]
    NonFiniteStart,
}

/// Solver tolerances and budgets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    pub grad_tol: f64,
    pub constraint_tol: f64,
    pub penalty_growth: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_outer_iters: 50,
            max_inner_iters: 500,
            grad_tol: 1e-6,
            constraint_tol: 1e-8,
            penalty_growth: 10.0,
        }
    }
}

/// A completed fit. `loglik` is the weighted log-likelihood at `params`.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub loglik: f64,
    pub converged: bool,
    /// Indices of (near-)binding inequality rows; for `theta_tr` fits the
    /// first block indexes the control-arm rows, the second the treated arm.
    pub active_constraints: Vec<usize>,
    /// Set when a predictive fit fell back to the prognostic model because
    /// one treatment arm carried no weight.
    pub one_arm_fallback: bool,
    /// Best feasible objective after each outer iteration (diagnostics).
    pub outer_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictiveMode {
    /// Constant log-hazard-ratio shift.
    Beta,
    /// Time-varying treatment deviation `theta_tr`.
    ThetaTr,
}

/// [`fit_shift_model`] output: baseline fit plus the linear coefficients.
#[derive(Debug, Clone)]
pub struct ShiftFit {
    pub fit: FitResult,
    /// Prognostic coefficients, one per covariate column (0 for dropped).
    pub alpha: Vec<f64>,
    /// Main treatment effect, when interactions were requested.
    pub beta: Option<f64>,
    /// Treatment-interaction coefficients (0 for dropped columns).
    pub beta_interactions: Option<Vec<f64>>,
    /// Covariate columns dropped for rank deficiency (constant or collinear).
    pub dropped_columns: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Design rows
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum RowKind {
    Exact,
    Right,
    Left,
    Interval,
}

/// Basis rows evaluated once per (basis, responses); fits over differing
/// weight vectors (forest aggregation) reuse the cache.
pub struct DesignCache {
    p: usize,
    kinds: Vec<RowKind>,
    /// a(t) at the (lower) bound, n x p row-major.
    a0: Vec<f64>,
    /// a'(t) for exact rows, a(upper) for interval rows, zeros otherwise.
    a1: Vec<f64>,
}

impl DesignCache {
    pub fn build(basis: &Basis, responses: &[SurvResponse]) -> Result<Self, FitError> {
        let p = basis
            .param_dim()
            .ok_or(BasisError::NonparametricUnsupported)?;
        let n = responses.len();
        let mut kinds = Vec::with_capacity(n);
        let mut a0 = vec![0.0; n * p];
        let mut a1 = vec![0.0; n * p];
        for (i, r) in responses.iter().enumerate() {
            r.validate().map_err(LikelihoodError::from)?;
            let row0 = &mut a0[i * p..(i + 1) * p];
            match *r {
                SurvResponse::Exact(t) => {
                    kinds.push(RowKind::Exact);
                    basis.eval_into(t, row0)?;
                    basis.eval_deriv_into(t, &mut a1[i * p..(i + 1) * p])?;
                }
                SurvResponse::Right(t) => {
                    kinds.push(RowKind::Right);
                    basis.eval_into(t, row0)?;
                }
                SurvResponse::Left(t) => {
                    kinds.push(RowKind::Left);
                    basis.eval_into(t, row0)?;
                }
                SurvResponse::Interval(lo, hi) => {
                    kinds.push(RowKind::Interval);
                    basis.eval_into(lo, row0)?;
                    basis.eval_into(hi, &mut a1[i * p..(i + 1) * p])?;
                }
            }
        }
        Ok(DesignCache { p, kinds, a0, a1 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Layout {
    Prognostic,
    Beta,
    ThetaTr,
    Shift { n_shift: usize },
}

impl Layout {
    fn dim(&self, p: usize) -> usize {
        match *self {
            Layout::Prognostic => p,
            Layout::Beta => p + 1,
            Layout::ThetaTr => 2 * p,
            Layout::Shift { n_shift } => p + n_shift,
        }
    }
}

/// The weighted log-likelihood as a function of the stacked parameter
/// vector, over rows gathered from a [`DesignCache`].
struct WeightedLik {
    p: usize,
    layout: Layout,
    kinds: Vec<RowKind>,
    treated: Vec<bool>,
    weights: Vec<f64>,
    a0: Vec<f64>,
    a1: Vec<f64>,
    /// Row-major shift covariates for `Layout::Shift`.
    shift: Vec<f64>,
    /// Fixed per-row additions to z (profile fits); empty when unused.
    offsets: Vec<f64>,
    scratch: Vec<f64>,
}

impl WeightedLik {
    /// Gather the rows with positive weight.
    fn gather(
        cache: &DesignCache,
        treated: &[bool],
        weights: &[f64],
        layout: Layout,
        shift: Option<&[f64]>,
        offsets: Option<&[f64]>,
    ) -> Self {
        let p = cache.p;
        let n_shift = match layout {
            Layout::Shift { n_shift } => n_shift,
            _ => 0,
        };
        let keep: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
        let m = keep.len();
        let mut out = WeightedLik {
            p,
            layout,
            kinds: Vec::with_capacity(m),
            treated: Vec::with_capacity(m),
            weights: Vec::with_capacity(m),
            a0: Vec::with_capacity(m * p),
            a1: Vec::with_capacity(m * p),
            shift: Vec::with_capacity(m * n_shift),
            offsets: Vec::new(),
            scratch: vec![0.0; p],
        };
        for &i in &keep {
            out.kinds.push(cache.kinds[i]);
            out.treated.push(treated.get(i).copied().unwrap_or(false));
            out.weights.push(weights[i]);
            out.a0.extend_from_slice(&cache.a0[i * p..(i + 1) * p]);
            out.a1.extend_from_slice(&cache.a1[i * p..(i + 1) * p]);
            if let Some(s) = shift {
                out.shift
                    .extend_from_slice(&s[i * n_shift..(i + 1) * n_shift]);
            }
            if let Some(o) = offsets {
                out.offsets.push(o[i]);
            }
        }
        out
    }

    fn n_rows(&self) -> usize {
        self.kinds.len()
    }

    fn sum_weights(&self) -> f64 {
        self.weights.iter().sum()
    }

    fn kept_kinds_summary(&self) -> (usize, usize, usize, usize) {
        let mut c = (0, 0, 0, 0);
        for k in &self.kinds {
            match k {
                RowKind::Exact => c.0 += 1,
                RowKind::Right => c.1 += 1,
                RowKind::Left => c.2 += 1,
                RowKind::Interval => c.3 += 1,
            }
        }
        c
    }

    /// Weighted log-likelihood at `x`, optionally with its gradient.
    /// Returns `-inf` when any positive-weight row is infeasible.
    fn eval(&mut self, x: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let p = self.p;
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let theta = &x[..p];
        if self.layout == Layout::ThetaTr {
            for k in 0..p {
                self.scratch[k] = theta[k] + x[p + k];
            }
        }
        let n_shift = match self.layout {
            Layout::Shift { n_shift } => n_shift,
            _ => 0,
        };
        let mut total = 0.0;
        for i in 0..self.n_rows() {
            let w = self.weights[i];
            let tr = self.treated[i];
            let th: &[f64] = if tr && self.layout == Layout::ThetaTr {
                &self.scratch
            } else {
                theta
            };
            let mut off = if self.offsets.is_empty() {
                0.0
            } else {
                self.offsets[i]
            };
            match self.layout {
                Layout::Beta if tr => off += x[p],
                Layout::Shift { .. } => {
                    off += dot(&self.shift[i * n_shift..(i + 1) * n_shift], &x[p..]);
                }
                _ => {}
            }
            let a0 = &self.a0[i * p..(i + 1) * p];
            let a1 = &self.a1[i * p..(i + 1) * p];
            let ev = match self.kinds[i] {
                RowKind::Exact => eval_exact(dot(a0, th) + off, dot(a1, th)),
                RowKind::Right => eval_right(dot(a0, th) + off),
                RowKind::Left => eval_left(dot(a0, th) + off),
                RowKind::Interval => eval_interval(dot(a0, th) + off, dot(a1, th) + off),
            };
            if !ev.feasible {
                return f64::NEG_INFINITY;
            }
            total += w * ev.loglik;
            if let Some(g) = grad.as_deref_mut() {
                let c0 = w * ev.dldz_lower;
                let c1 = match self.kinds[i] {
                    RowKind::Exact => w * ev.dlog_slope,
                    RowKind::Interval => w * ev.dldz_upper,
                    _ => 0.0,
                };
                for k in 0..p {
                    g[k] += c0 * a0[k] + c1 * a1[k];
                }
                match self.layout {
                    Layout::ThetaTr if tr => {
                        for k in 0..p {
                            g[p + k] += c0 * a0[k] + c1 * a1[k];
                        }
                    }
                    Layout::Beta if tr => g[p] += w * ev.dldz_total(),
                    Layout::Shift { .. } => {
                        let ds = w * ev.dldz_total();
                        let row = &self.shift[i * n_shift..(i + 1) * n_shift];
                        for (j, &c) in row.iter().enumerate() {
                            g[p + j] += ds * c;
                        }
                    }
                    _ => {}
                }
            }
        }
        total
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn linf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, &b| a.max(b.abs()))
}

// ---------------------------------------------------------------------------
// Constraints on the stacked parameter vector
// ---------------------------------------------------------------------------

struct LinearConstraints {
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
}

impl LinearConstraints {
    fn expand(base: &ConstraintSet, layout: Layout) -> Self {
        let p = base.dim;
        let dim = layout.dim(p);
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for (row, &r) in base.rows.iter().zip(&base.rhs) {
            let mut padded = vec![0.0; dim];
            padded[..p].copy_from_slice(row);
            rows.push(padded);
            rhs.push(r);
        }
        if layout == Layout::ThetaTr {
            // treated arm: D (theta + theta_tr) >= rhs
            for (row, &r) in base.rows.iter().zip(&base.rhs) {
                let mut padded = vec![0.0; dim];
                padded[..p].copy_from_slice(row);
                padded[p..].copy_from_slice(row);
                rows.push(padded);
                rhs.push(r);
            }
        }
        LinearConstraints { rows, rhs }
    }

    fn n(&self) -> usize {
        self.rows.len()
    }

    fn slack(&self, j: usize, x: &[f64]) -> f64 {
        dot(&self.rows[j], x) - self.rhs[j]
    }

    fn max_violation(&self, x: &[f64]) -> f64 {
        (0..self.n())
            .map(|j| (-self.slack(j, x)).max(0.0))
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Spectral projected gradient with nonmonotone line search
// ---------------------------------------------------------------------------

const BB_MIN: f64 = 1e-10;
const BB_MAX: f64 = 1e10;
const NONMONOTONE_MEMORY: usize = 10;
const ARMIJO_C1: f64 = 1e-4;

struct InnerResult {
    x: Vec<f64>,
    converged: bool,
}

/// Minimize `phi` from `x0`; `phi(x, Some(g))` fills the gradient.
fn spg_minimize<F>(mut phi: F, x0: Vec<f64>, max_iters: usize, grad_tol: f64) -> InnerResult
where
    F: FnMut(&[f64], Option<&mut [f64]>) -> f64,
{
    let dim = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; dim];
    let mut fx = phi(&x, Some(&mut g));
    if !fx.is_finite() {
        return InnerResult { x, converged: false };
    }
    let mut history = vec![fx];
    let mut bb = 1.0 / linf(&g).max(1e-8);
    let mut xn = vec![0.0; dim];
    let mut gn = vec![0.0; dim];
    for _ in 0..max_iters {
        let gnorm = linf(&g);
        if gnorm <= grad_tol {
            return InnerResult { x, converged: true };
        }
        let step = bb.clamp(BB_MIN, BB_MAX);
        // d = -step * g, so g'd = -step |g|_2^2
        let gtd: f64 = -step * g.iter().map(|v| v * v).sum::<f64>();
        let fmax = history.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            for k in 0..dim {
                xn[k] = x[k] - alpha * step * g[k];
            }
            let f_try = phi(&xn, None);
            if f_try.is_finite() && f_try <= fmax + ARMIJO_C1 * alpha * gtd {
                accepted = true;
                break;
            }
            // safeguarded quadratic interpolation
            let denom = f_try - fx - alpha * gtd;
            alpha = if f_try.is_finite() && denom > 0.0 {
                (-0.5 * gtd * alpha * alpha / denom).clamp(0.1 * alpha, 0.5 * alpha)
            } else {
                0.5 * alpha
            };
        }
        if !accepted {
            // stalled: no acceptable step along the gradient
            return InnerResult {
                x,
                converged: gnorm <= grad_tol.max(1e-5),
            };
        }
        let fnew = phi(&xn, Some(&mut gn));
        let mut sy = 0.0;
        let mut ss = 0.0;
        for k in 0..dim {
            let s = xn[k] - x[k];
            let y = gn[k] - g[k];
            sy += s * y;
            ss += s * s;
        }
        bb = if sy > 1e-16 {
            (ss / sy).clamp(BB_MIN, BB_MAX)
        } else {
            BB_MAX
        };
        std::mem::swap(&mut x, &mut xn);
        std::mem::swap(&mut g, &mut gn);
        fx = fnew;
        history.push(fx);
        if history.len() > NONMONOTONE_MEMORY {
            history.remove(0);
        }
    }
    InnerResult { x, converged: false }
}

struct SolveOutcome {
    x: Vec<f64>,
    loglik: f64,
    converged: bool,
    outer_trace: Vec<f64>,
}

/// Augmented Lagrangian outer loop: multiplier updates and penalty growth
/// around the spectral-gradient subproblem solver.
fn maximize_constrained(
    lik: &mut WeightedLik,
    cons: &LinearConstraints,
    basis: &Basis,
    layout: Layout,
    x0: Vec<f64>,
    cfg: &FitConfig,
) -> Result<SolveOutcome, FitError> {
    let mut x = x0;
    if !lik.eval(&x, None).is_finite() {
        return Err(FitError::NonFiniteStart);
    }
    let m = cons.n();
    let mut lambda = vec![0.0; m];
    let mut mu = 10.0f64;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut viol_prev = f64::INFINITY;
    let mut converged = false;
    let mut trace = Vec::new();

    for _ in 0..cfg.max_outer_iters {
        let lam = lambda.clone();
        let inner = {
            let lik_ref = &mut *lik;
            spg_minimize(
                move |xv, grad| {
                    augmented_objective(lik_ref, cons, &lam, mu, xv, grad)
                },
                x.clone(),
                cfg.max_inner_iters,
                cfg.grad_tol,
            )
        };
        x = inner.x;
        let viol = cons.max_violation(&x);
        if viol <= cfg.constraint_tol {
            let ll = lik.eval(&x, None);
            if ll.is_finite() && best.as_ref().map_or(true, |(_, b)| ll > *b) {
                best = Some((x.clone(), ll));
            }
        }
        trace.push(best.as_ref().map_or(f64::NEG_INFINITY, |(_, b)| *b));

        let mut max_dlam = 0.0f64;
        for j in 0..m {
            let next = (lambda[j] - mu * cons.slack(j, &x)).max(0.0);
            max_dlam = max_dlam.max((next - lambda[j]).abs());
            lambda[j] = next;
        }
        if viol <= cfg.constraint_tol
            && inner.converged
            && max_dlam <= 1e-6 * (1.0 + linf(&lambda))
        {
            converged = true;
            break;
        }
        if viol > 0.25 * viol_prev && viol > cfg.constraint_tol {
            mu = (mu * cfg.penalty_growth).min(1e12);
        }
        viol_prev = viol;
    }

    // final candidate: exact cone projection of the last iterate
    let mut repaired = x.clone();
    repair_feasible(&mut repaired, basis, layout, lik.p);
    let ll_rep = lik.eval(&repaired, None);
    if cons.max_violation(&repaired) <= cfg.constraint_tol
        && ll_rep.is_finite()
        && best.as_ref().map_or(true, |(_, b)| ll_rep > *b)
    {
        best = Some((repaired, ll_rep));
    }

    match best {
        Some((bx, bll)) => Ok(SolveOutcome {
            x: bx,
            loglik: bll,
            converged,
            outer_trace: trace,
        }),
        None => {
            // never reached feasibility; report the raw iterate, unconverged
            let ll = lik.eval(&x, None);
            Ok(SolveOutcome {
                x,
                loglik: ll,
                converged: false,
                outer_trace: trace,
            })
        }
    }
}

fn augmented_objective(
    lik: &mut WeightedLik,
    cons: &LinearConstraints,
    lambda: &[f64],
    mu: f64,
    x: &[f64],
    grad: Option<&mut [f64]>,
) -> f64 {
    match grad {
        Some(g) => {
            let ll = lik.eval(x, Some(g));
            if !ll.is_finite() {
                return f64::INFINITY;
            }
            for v in g.iter_mut() {
                *v = -*v;
            }
            let mut val = -ll;
            for j in 0..cons.n() {
                let gj = cons.slack(j, x);
                let t = lambda[j] - mu * gj;
                if t > 0.0 {
                    val += -lambda[j] * gj + 0.5 * mu * gj * gj;
                    for (gk, rk) in g.iter_mut().zip(&cons.rows[j]) {
                        *gk -= t * rk;
                    }
                } else {
                    val -= 0.5 * lambda[j] * lambda[j] / mu;
                }
            }
            val
        }
        None => {
            let ll = lik.eval(x, None);
            if !ll.is_finite() {
                return f64::INFINITY;
            }
            let mut val = -ll;
            for j in 0..cons.n() {
                let gj = cons.slack(j, x);
                let t = lambda[j] - mu * gj;
                if t > 0.0 {
                    val += -lambda[j] * gj + 0.5 * mu * gj * gj;
                } else {
                    val -= 0.5 * lambda[j] * lambda[j] / mu;
                }
            }
            val
        }
    }
}

// ---------------------------------------------------------------------------
// Feasible starting points
// ---------------------------------------------------------------------------

/// Pool-adjacent-violators isotonic regression, in place, unit weights.
fn pav_inplace(v: &mut [f64]) {
    let n = v.len();
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &val in v.iter() {
        let mut cur = (val, 1usize);
        while let Some(&(m, c)) = blocks.last() {
            if m > cur.0 {
                blocks.pop();
                let total = c + cur.1;
                cur = ((m * c as f64 + cur.0 * cur.1 as f64) / total as f64, total);
            } else {
                break;
            }
        }
        blocks.push(cur);
    }
    let mut i = 0;
    for (m, c) in blocks {
        for _ in 0..c {
            v[i] = m;
            i += 1;
        }
    }
}

/// Euclidean projection of `theta` onto the feasible cone.
fn project_cone(theta: &mut [f64], basis: &Basis) {
    match basis {
        Basis::Weibull => theta[1] = theta[1].max(WEIBULL_ACCEL_FLOOR),
        Basis::Bernstein { .. } => pav_inplace(theta),
        Basis::Nonparametric { .. } => {}
    }
}

/// Nudge a fitted coefficient vector strictly inside the monotone cone.
/// Binding first-difference constraints make the density slope vanish at
/// the support edge, turning out-of-support event evaluations into `-inf`;
/// a 1e-9 margin keeps them finite while moving the objective by less
/// than 1e-8. No-op for non-Bernstein bases.
pub(crate) fn margin_monotone_theta(theta: &mut [f64], basis: &Basis) {
    if !matches!(basis, Basis::Bernstein { .. }) {
        return;
    }
    let e = 1e-9 * (1.0 + theta.iter().fold(0.0f64, |a, &b| a.max(b.abs())));
    for k in 1..theta.len() {
        if theta[k] < theta[k - 1] + e {
            theta[k] = theta[k - 1] + e;
        }
    }
}

/// Push `theta` strictly inside the cone so every exact-time density slope
/// is positive and the starting objective is finite.
fn strictify(theta: &mut [f64], basis: &Basis) {
    match basis {
        Basis::Weibull => theta[1] = theta[1].max(1e-3),
        Basis::Bernstein { .. } => {
            let scale = 1e-6 * (1.0 + linf(theta));
            for k in 1..theta.len() {
                if theta[k] < theta[k - 1] + scale {
                    theta[k] = theta[k - 1] + scale;
                }
            }
        }
        Basis::Nonparametric { .. } => {}
    }
}

/// Project a stacked iterate onto the layout's cone (theta block, and for
/// `theta_tr` fits the treated-arm sum as well).
fn repair_feasible(x: &mut [f64], basis: &Basis, layout: Layout, p: usize) {
    project_cone(&mut x[..p], basis);
    if layout == Layout::ThetaTr {
        let mut combined: Vec<f64> = (0..p).map(|k| x[k] + x[p + k]).collect();
        project_cone(&mut combined, basis);
        for k in 0..p {
            x[p + k] = combined[k] - x[k];
        }
    }
}

fn default_ramp(basis: &Basis, p: usize) -> Vec<f64> {
    match basis {
        Basis::Weibull => vec![-2.0, 2.0],
        _ => (0..p)
            .map(|k| -2.0 + 4.0 * k as f64 / (p.max(2) - 1) as f64)
            .collect(),
    }
}

/// Starting value: regress cloglog of the Kaplan-Meier distribution
/// function at event times onto the basis, project onto the cone, then
/// nudge strictly inside. Falls back to an increasing ramp across (-2, 2)
/// when fewer than two distinct event times carry weight.
fn initial_theta(basis: &Basis, responses: &[SurvResponse], weights: &[f64]) -> Vec<f64> {
    let p = basis.param_dim().expect("parametric basis");
    let kept: Vec<SurvResponse> = responses
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(r, _)| *r)
        .collect();
    let km = kaplan_meier(&kept);
    let mut theta = if km.len() < 2 {
        default_ramp(basis, p)
    } else {
        let mut ata = DMatrix::<f64>::zeros(p, p);
        let mut aty = DVector::<f64>::zeros(p);
        let mut row = vec![0.0; p];
        for &(t, s) in &km {
            if basis.eval_into(t, &mut row).is_err() {
                return default_ramp(basis, p);
            }
            let sc = s.clamp(1e-6, 1.0 - 1e-6);
            let y = (-sc.ln()).ln();
            for i in 0..p {
                for j in 0..p {
                    ata[(i, j)] += row[i] * row[j];
                }
                aty[i] += row[i] * y;
            }
        }
        for i in 0..p {
            ata[(i, i)] += 1e-8;
        }
        match ata.cholesky() {
            Some(ch) => ch.solve(&aty).iter().copied().collect(),
            None => default_ramp(basis, p),
        }
    };
    project_cone(&mut theta, basis);
    strictify(&mut theta, basis);
    theta
}

// ---------------------------------------------------------------------------
// Public fits
// ---------------------------------------------------------------------------

fn check_weights(weights: &[f64], n: usize) -> Result<(), FitError> {
    if weights.len() != n {
        return Err(LikelihoodError::WeightLengthMismatch {
            got: weights.len(),
            expected: n,
        }
        .into());
    }
    for &w in weights {
        if w < 0.0 {
            return Err(LikelihoodError::NegativeWeight(w).into());
        }
    }
    Ok(())
}

fn active_rows(cons: &LinearConstraints, x: &[f64], cfg: &FitConfig) -> Vec<usize> {
    let tol = (10.0 * cfg.constraint_tol).max(1e-6);
    (0..cons.n())
        .filter(|&j| cons.slack(j, x) <= tol)
        .collect()
}

/// Unconditional maximum likelihood: all weights one.
pub fn fit_unconditional(
    basis: &Basis,
    subjects: &[Subject],
    cfg: &FitConfig,
) -> Result<FitResult, FitError> {
    let weights = vec![1.0; subjects.len()];
    fit_weighted(basis, subjects, &weights, cfg, None)
}

/// Weighted maximum likelihood under the monotonicity constraints;
/// `warm_start` (length P) seeds the solver.
pub fn fit_weighted(
    basis: &Basis,
    subjects: &[Subject],
    weights: &[f64],
    cfg: &FitConfig,
    warm_start: Option<&[f64]>,
) -> Result<FitResult, FitError> {
    check_weights(weights, subjects.len())?;
    let responses: Vec<SurvResponse> = subjects.iter().map(|s| s.response).collect();
    let cache = DesignCache::build(basis, &responses)?;
    fit_prognostic_cached(basis, &cache, &responses, weights, cfg, warm_start)
}

/// As [`fit_weighted`], over a prebuilt design cache (forest hot path).
pub fn fit_prognostic_cached(
    basis: &Basis,
    cache: &DesignCache,
    responses: &[SurvResponse],
    weights: &[f64],
    cfg: &FitConfig,
    warm_start: Option<&[f64]>,
) -> Result<FitResult, FitError> {
    fit_with_offsets_cached(basis, cache, responses, weights, None, cfg, warm_start)
}

/// Prognostic fit with fixed per-subject z-offsets (profile likelihoods).
pub(crate) fn fit_with_offsets_cached(
    basis: &Basis,
    cache: &DesignCache,
    responses: &[SurvResponse],
    weights: &[f64],
    offsets: Option<&[f64]>,
    cfg: &FitConfig,
    warm_start: Option<&[f64]>,
) -> Result<FitResult, FitError> {
    check_weights(weights, responses.len())?;
    let treated = vec![false; responses.len()];
    let mut lik = WeightedLik::gather(cache, &treated, weights, Layout::Prognostic, None, offsets);
    precheck(&lik)?;
    let x0 = starting_point(basis, responses, weights, warm_start, cache.p, Layout::Prognostic);
    run_fit(basis, Layout::Prognostic, &mut lik, x0, cfg, false)
}

/// Weighted predictive fit: `(theta, beta)` or `(theta, theta_tr)` with both
/// arms' log-cumulative hazards monotone. Falls back to the prognostic fit
/// (flagged, not an error) when one arm carries no weight.
pub fn fit_weighted_predictive(
    basis: &Basis,
    subjects: &[Subject],
    weights: &[f64],
    mode: PredictiveMode,
    cfg: &FitConfig,
    warm_start: Option<&[f64]>,
) -> Result<FitResult, FitError> {
    check_weights(weights, subjects.len())?;
    let responses: Vec<SurvResponse> = subjects.iter().map(|s| s.response).collect();
    let treated: Vec<Option<bool>> = subjects
        .iter()
        .map(|s| s.treatment.map(|r| r == 1))
        .collect();
    let cache = DesignCache::build(basis, &responses)?;
    fit_predictive_cached(basis, &cache, &responses, &treated, weights, mode, cfg, warm_start)
}

/// As [`fit_weighted_predictive`], over a prebuilt design cache.
#[allow(clippy::too_many_arguments)]
pub fn fit_predictive_cached(
    basis: &Basis,
    cache: &DesignCache,
    responses: &[SurvResponse],
    treated: &[Option<bool>],
    weights: &[f64],
    mode: PredictiveMode,
    cfg: &FitConfig,
    warm_start: Option<&[f64]>,
) -> Result<FitResult, FitError> {
    check_weights(weights, responses.len())?;
    let p = cache.p;
    let mut arm_weight = [0.0f64; 2];
    let mut flags = vec![false; responses.len()];
    for i in 0..responses.len() {
        if weights[i] > 0.0 {
            match treated[i] {
                None => return Err(FitError::MissingTreatment),
                Some(t) => {
                    flags[i] = t;
                    arm_weight[t as usize] += weights[i];
                }
            }
        }
    }
    if arm_weight[0] == 0.0 || arm_weight[1] == 0.0 {
        // one-arm degeneracy: prognostic fit with a null treatment term
        let mut fit = fit_prognostic_cached(basis, cache, responses, weights, cfg, warm_start)?;
        fit.one_arm_fallback = true;
        fit.params = match mode {
            PredictiveMode::Beta => ModelParams::with_beta(fit.params.theta, 0.0),
            PredictiveMode::ThetaTr => {
                let tr = vec![0.0; p];
                ModelParams::with_theta_tr(fit.params.theta, tr)
            }
        };
        return Ok(fit);
    }
    let layout = match mode {
        PredictiveMode::Beta => Layout::Beta,
        PredictiveMode::ThetaTr => Layout::ThetaTr,
    };
    let mut lik = WeightedLik::gather(cache, &flags, weights, layout, None, None);
    precheck(&lik)?;
    let x0 = starting_point(basis, responses, weights, warm_start, p, layout);
    run_fit(basis, layout, &mut lik, x0, cfg, false)
}

/// Linear-shift baseline: `z(t) = a(t)' theta + x' alpha` plus, with
/// interactions, `(beta + x' beta_int) 1(r = 1)`. Rank-deficient covariate
/// columns are dropped and reported.
pub fn fit_shift_model(
    basis: &Basis,
    subjects: &[Subject],
    with_treatment_interactions: bool,
    cfg: &FitConfig,
) -> Result<ShiftFit, FitError> {
    let n = subjects.len();
    if n < 2 {
        return Err(FitError::TooFewSubjects(n as f64));
    }
    let n_cov = subjects[0].covariates.len();
    if subjects.iter().any(|s| s.covariates.len() != n_cov) {
        return Err(FitError::MissingCovariates);
    }
    if with_treatment_interactions && subjects.iter().any(|s| s.treatment.is_none()) {
        return Err(FitError::MissingTreatment);
    }
    let responses: Vec<SurvResponse> = subjects.iter().map(|s| s.response).collect();
    let weights = vec![1.0; n];

    // raw shift columns: covariates, then treatment main effect and
    // interactions when requested
    let k_raw = if with_treatment_interactions {
        2 * n_cov + 1
    } else {
        n_cov
    };
    let mut raw = vec![0.0; n * k_raw];
    for (i, s) in subjects.iter().enumerate() {
        let r = if s.is_treated() { 1.0 } else { 0.0 };
        let row = &mut raw[i * k_raw..(i + 1) * k_raw];
        row[..n_cov].copy_from_slice(&s.covariates);
        if with_treatment_interactions {
            row[n_cov] = r;
            for j in 0..n_cov {
                row[n_cov + 1 + j] = r * s.covariates[j];
            }
        }
    }

    // standardize and drop constant / collinear columns
    let (kept, means, sds) = select_columns(&raw, n, k_raw);
    let k = kept.len();
    let mut shift = vec![0.0; n * k];
    for i in 0..n {
        for (jj, &j) in kept.iter().enumerate() {
            shift[i * k + jj] = (raw[i * k_raw + j] - means[jj]) / sds[jj];
        }
    }

    let cache = DesignCache::build(basis, &responses)?;
    let p = cache.p;
    let layout = Layout::Shift { n_shift: k };
    let mut lik = WeightedLik::gather(cache_ref(&cache), &vec![false; n], &weights, layout, Some(&shift), None);
    precheck(&lik)?;
    let x0 = starting_point(basis, &responses, &weights, None, p, layout);
    let mut fit = run_fit(basis, layout, &mut lik, x0, cfg, false)?;

    // undo the standardization: gamma_j = gamma'_j / sd_j and the absorbed
    // constant shifts the (partition-of-unity) baseline
    let gamma_std: Vec<f64> = fit.params.theta[p..].to_vec();
    let mut theta = fit.params.theta[..p].to_vec();
    let mut kappa = 0.0;
    let mut coef = vec![0.0; k_raw];
    for (jj, &j) in kept.iter().enumerate() {
        let gamma = gamma_std[jj] / sds[jj];
        coef[j] = gamma;
        kappa += gamma * means[jj];
    }
    match basis {
        Basis::Weibull => theta[0] -= kappa,
        _ => {
            for t in theta.iter_mut() {
                *t -= kappa;
            }
        }
    }
    fit.params = ModelParams::prognostic(theta);

    let dropped: Vec<usize> = (0..k_raw).filter(|j| !kept.contains(j)).collect();
    let (alpha, beta, beta_int) = if with_treatment_interactions {
        (
            coef[..n_cov].to_vec(),
            Some(coef[n_cov]),
            Some(coef[n_cov + 1..].to_vec()),
        )
    } else {
        (coef, None, None)
    };
    Ok(ShiftFit {
        fit,
        alpha,
        beta,
        beta_interactions: beta_int,
        dropped_columns: dropped,
    })
}

// run_fit borrows the cache twice in fit_shift_model without this shim
fn cache_ref(c: &DesignCache) -> &DesignCache {
    c
}

/// Column selection for the shift design: drop constants, then greedily
/// drop columns whose standardized residual against previously kept
/// columns is numerically zero. Returns kept indices with their means and
/// standard deviations.
fn select_columns(raw: &[f64], n: usize, k_raw: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut kept = Vec::new();
    let mut means = Vec::new();
    let mut sds = Vec::new();
    // orthonormalized kept columns for the collinearity check
    let mut basis_cols: Vec<Vec<f64>> = Vec::new();
    for j in 0..k_raw {
        let col: Vec<f64> = (0..n).map(|i| raw[i * k_raw + j]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd < 1e-12 {
            continue;
        }
        let mut resid: Vec<f64> = col.iter().map(|v| (v - mean) / sd).collect();
        for b in &basis_cols {
            let proj = dot(&resid, b);
            for (r, bv) in resid.iter_mut().zip(b) {
                *r -= proj * bv;
            }
        }
        let norm = resid.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-8 * (n as f64).sqrt() {
            continue;
        }
        for r in resid.iter_mut() {
            *r /= norm;
        }
        basis_cols.push(resid);
        kept.push(j);
        means.push(mean);
        sds.push(sd);
    }
    (kept, means, sds)
}

fn precheck(lik: &WeightedLik) -> Result<(), FitError> {
    let total = lik.sum_weights();
    if total < 2.0 || lik.n_rows() < 2 {
        return Err(FitError::TooFewSubjects(total));
    }
    let (exact, right, left, interval) = lik.kept_kinds_summary();
    if exact == 0 && interval == 0 && (right == 0 || left == 0) {
        return Err(FitError::Degenerate);
    }
    Ok(())
}

fn starting_point(
    basis: &Basis,
    responses: &[SurvResponse],
    weights: &[f64],
    warm_start: Option<&[f64]>,
    p: usize,
    layout: Layout,
) -> Vec<f64> {
    let mut theta = match warm_start {
        Some(w) if w.len() == p => {
            let mut t = w.to_vec();
            project_cone(&mut t, basis);
            strictify(&mut t, basis);
            t
        }
        _ => initial_theta(basis, responses, weights),
    };
    let dim = layout.dim(p);
    theta.resize(dim, 0.0);
    theta
}

fn run_fit(
    basis: &Basis,
    layout: Layout,
    lik: &mut WeightedLik,
    mut x0: Vec<f64>,
    cfg: &FitConfig,
    one_arm_fallback: bool,
) -> Result<FitResult, FitError> {
    let cons = LinearConstraints::expand(&basis.constraints()?, layout);
    if !lik.eval(&x0, None).is_finite() {
        // warm start infeasible for this data (e.g. boundary ties): retry
        // from the data-driven default
        let p = lik.p;
        let mut ramp = default_ramp(basis, p);
        strictify(&mut ramp, basis);
        ramp.resize(layout.dim(p), 0.0);
        x0 = ramp;
    }
    let out = maximize_constrained(lik, &cons, basis, layout, x0, cfg)?;
    let p = lik.p;
    let params = match layout {
        Layout::Prognostic | Layout::Shift { .. } => ModelParams {
            theta: out.x.clone(),
            beta: None,
            theta_tr: None,
        },
        Layout::Beta => ModelParams::with_beta(out.x[..p].to_vec(), out.x[p]),
        Layout::ThetaTr => {
            ModelParams::with_theta_tr(out.x[..p].to_vec(), out.x[p..2 * p].to_vec())
        }
    };
    let active = active_rows(&cons, &out.x, cfg);
    Ok(FitResult {
        params,
        loglik: out.loglik,
        converged: out.converged,
        active_constraints: active,
        one_arm_fallback,
        outer_trace: out.outer_trace,
    })
}
