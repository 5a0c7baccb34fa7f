//! Censored-data log-likelihood contributions and score functions.
//!
//! For `z(t) = a(t)' theta` (plus optional treatment terms) the per-subject
//! contributions are
//!
//! * exact `T = t`:        `z(t) - exp(z(t)) + log(z'(t))`
//! * right-censored `T > t`:  `-exp(z(t))`
//! * left-censored `T < t`:   `log(1 - exp(-exp(z(t))))`
//! * interval `(tl, tu]`:     `log(exp(-exp(z(tl))) - exp(-exp(z(tu))))`
//!
//! Left and interval terms are evaluated through log-space differences so
//! early censoring bounds do not underflow. An exact observation with
//! non-positive density slope (`z'(t) <= 0`) yields `-inf` as an explicit
//! infeasibility flag rather than an error or NaN: the constrained
//! optimizer treats it as a rejected step.
//!
//! The score families build on one shared four-case kernel:
//! per-subject derivatives with respect to `theta`, to an intercept shift
//! `alpha` at 0 (log-rank scores), and to treatment terms `beta` or
//! `theta_tr`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{Basis, BasisError};

#[derive(Debug, Error)]
pub enum LikelihoodError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("invalid survival response: {0}")]
    InvalidResponse(String),
    #[error("model has a treatment term but the subject carries no treatment indicator")]
    MissingTreatment,
    #[error("at most one of beta and theta_tr may be set")]
    ConflictingTreatmentTerms,
    #[error("weights must be non-negative, got {0}")]
    NegativeWeight(f64),
    #[error("weights length {got} does not match subject count {expected}")]
    WeightLengthMismatch { got: usize, expected: usize },
    #[error("nonparametric basis has no fitted baseline cumulative hazard")]
    MissingBaseline,
}

/// One subject's survival observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SurvResponse {
    /// Observed event at `t`.
    Exact(f64),
    /// `T > t`.
    Right(f64),
    /// `T < t`.
    Left(f64),
    /// `T in (lower, upper]`.
    Interval(f64, f64),
}

impl SurvResponse {
    pub fn validate(&self) -> Result<(), LikelihoodError> {
        let bad = |msg: String| Err(LikelihoodError::InvalidResponse(msg));
        match *self {
            SurvResponse::Exact(t) | SurvResponse::Right(t) | SurvResponse::Left(t) => {
                if !(t > 0.0) || !t.is_finite() {
                    return bad(format!("time must be positive and finite, got {t}"));
                }
            }
            SurvResponse::Interval(lo, hi) => {
                if !(lo > 0.0) || !lo.is_finite() || !hi.is_finite() || !(lo < hi) {
                    return bad(format!("interval requires 0 < lower < upper < inf, got ({lo}, {hi})"));
                }
            }
        }
        Ok(())
    }

    pub fn is_event(&self) -> bool {
        matches!(self, SurvResponse::Exact(_))
    }

    /// Finite observation bounds, used for support construction.
    pub fn finite_bounds(&self) -> (f64, Option<f64>) {
        match *self {
            SurvResponse::Exact(t) | SurvResponse::Right(t) | SurvResponse::Left(t) => (t, None),
            SurvResponse::Interval(lo, hi) => (lo, Some(hi)),
        }
    }
}

/// Fitted parameters: baseline coefficients plus at most one treatment term.
///
/// The intercept shift `alpha` of the log-rank model is fixed at zero in
/// every score evaluation and is therefore not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub theta: Vec<f64>,
    /// Constant log-hazard-ratio treatment shift.
    pub beta: Option<f64>,
    /// Time-varying treatment deviation; the treated arm uses
    /// `theta + theta_tr`.
    pub theta_tr: Option<Vec<f64>>,
}

impl ModelParams {
    pub fn prognostic(theta: Vec<f64>) -> Self {
        ModelParams { theta, beta: None, theta_tr: None }
    }

    pub fn with_beta(theta: Vec<f64>, beta: f64) -> Self {
        ModelParams { theta, beta: Some(beta), theta_tr: None }
    }

    pub fn with_theta_tr(theta: Vec<f64>, theta_tr: Vec<f64>) -> Self {
        ModelParams { theta, beta: None, theta_tr: Some(theta_tr) }
    }

    pub fn validate(&self) -> Result<(), LikelihoodError> {
        if self.beta.is_some() && self.theta_tr.is_some() {
            return Err(LikelihoodError::ConflictingTreatmentTerms);
        }
        Ok(())
    }

    pub fn has_treatment_term(&self) -> bool {
        self.beta.is_some() || self.theta_tr.is_some()
    }
}

/// One subject: response, numeric covariates, optional treatment arm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Subject {
    pub response: SurvResponse,
    pub covariates: Vec<f64>,
    pub treatment: Option<u8>,
}

impl Subject {
    pub fn new(response: SurvResponse, covariates: Vec<f64>) -> Self {
        Subject { response, covariates, treatment: None }
    }

    pub fn with_treatment(response: SurvResponse, covariates: Vec<f64>, arm: u8) -> Self {
        Subject { response, covariates, treatment: Some(arm) }
    }

    pub fn is_treated(&self) -> bool {
        self.treatment == Some(1)
    }
}

// ---------------------------------------------------------------------------
// Four-case kernel
// ---------------------------------------------------------------------------

/// `log(1 - exp(-x))` for `x > 0`; series below 1e-8 where the direct form
/// loses all digits.
pub(crate) fn log1mexp(x: f64) -> f64 {
    if x < 1e-8 {
        x.ln() - 0.5 * x
    } else {
        (-(-x).exp_m1()).ln()
    }
}

/// `x / (exp(x) - 1)`, the log-rank score of a left-censoring bound with
/// cumulative hazard `x`; limits 1 at 0 and 0 at infinity.
pub(crate) fn x_over_expm1(x: f64) -> f64 {
    if x < 1e-8 {
        1.0 - 0.5 * x
    } else {
        x / x.exp_m1()
    }
}

/// Per-case likelihood and z-derivatives. For interval observations the
/// two bounds carry distinct derivatives; for the other kinds only
/// `dldz_lower` is used. `dlog_slope` is the exact-case `1 / z'(t)` factor
/// multiplying `a'(t)` in the theta-gradient.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CaseEval {
    pub loglik: f64,
    pub dldz_lower: f64,
    pub dldz_upper: f64,
    pub dlog_slope: f64,
    pub feasible: bool,
}

impl CaseEval {
    fn infeasible() -> Self {
        CaseEval {
            loglik: f64::NEG_INFINITY,
            dldz_lower: 0.0,
            dldz_upper: 0.0,
            dlog_slope: 0.0,
            feasible: false,
        }
    }

    /// Derivative of the contribution with respect to a constant shift of z.
    pub fn dldz_total(&self) -> f64 {
        self.dldz_lower + self.dldz_upper
    }
}

/// Exact observation: needs `z(t)` and the slope `z'(t)`.
pub(crate) fn eval_exact(z: f64, zprime: f64) -> CaseEval {
    if !(zprime > 0.0) || !z.is_finite() {
        return CaseEval::infeasible();
    }
    let x = z.exp();
    CaseEval {
        loglik: z - x + zprime.ln(),
        dldz_lower: 1.0 - x,
        dldz_upper: 0.0,
        dlog_slope: 1.0 / zprime,
        feasible: true,
    }
}

/// Right-censored at cumulative hazard `x = exp(z)`.
pub(crate) fn eval_right_x(x: f64) -> CaseEval {
    if !x.is_finite() {
        return CaseEval::infeasible();
    }
    CaseEval { loglik: -x, dldz_lower: -x, dldz_upper: 0.0, dlog_slope: 0.0, feasible: true }
}

/// Left-censored at cumulative hazard `x = exp(z)`.
pub(crate) fn eval_left_x(x: f64) -> CaseEval {
    if !x.is_finite() || x <= 0.0 {
        return CaseEval::infeasible();
    }
    CaseEval {
        loglik: log1mexp(x),
        dldz_lower: x_over_expm1(x),
        dldz_upper: 0.0,
        dlog_slope: 0.0,
        feasible: true,
    }
}

/// Interval-censored with cumulative hazards `xl = exp(z(tl))` and
/// `xu = exp(z(tu))`; requires `xl < xu` (monotone z).
pub(crate) fn eval_interval_x(xl: f64, xu: f64) -> CaseEval {
    let d = xu - xl;
    if !d.is_finite() || d <= 0.0 || !xl.is_finite() {
        return CaseEval::infeasible();
    }
    let em1 = d.exp_m1(); // inf for d > ~709 is fine: the upper term -> 0
    CaseEval {
        loglik: -xl + log1mexp(d),
        // -xl / (1 - e^{-d}) rewritten so the two derivatives sum to the
        // stable total d/(e^d - 1) - xl
        dldz_lower: -xl - xl / em1,
        dldz_upper: xu / em1,
        dlog_slope: 0.0,
        feasible: true,
    }
}

pub(crate) fn eval_right(z: f64) -> CaseEval {
    eval_right_x(z.exp())
}

pub(crate) fn eval_left(z: f64) -> CaseEval {
    eval_left_x(z.exp())
}

pub(crate) fn eval_interval(zl: f64, zu: f64) -> CaseEval {
    eval_interval_x(zl.exp(), zu.exp())
}

// ---------------------------------------------------------------------------
// Public per-subject operations
// ---------------------------------------------------------------------------

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Effective baseline coefficients for a subject: `theta + theta_tr` on the
/// treated arm, `theta` otherwise. Returns whether the subject is treated.
fn effective_theta(p: &ModelParams, s: &Subject) -> Result<(Vec<f64>, bool, f64), LikelihoodError> {
    p.validate()?;
    if p.has_treatment_term() && s.treatment.is_none() {
        return Err(LikelihoodError::MissingTreatment);
    }
    let treated = s.is_treated();
    let mut theta = p.theta.clone();
    let mut offset = 0.0;
    if treated {
        if let Some(tr) = &p.theta_tr {
            for (t, d) in theta.iter_mut().zip(tr) {
                *t += d;
            }
        }
        if let Some(b) = p.beta {
            offset = b;
        }
    }
    Ok((theta, treated, offset))
}

/// Kernel evaluation for one subject at its effective parameters; shared by
/// the public log-likelihood and score operations.
fn case_eval(
    b: &Basis,
    theta: &[f64],
    offset: f64,
    resp: &SurvResponse,
) -> Result<CaseEval, LikelihoodError> {
    resp.validate()?;
    Ok(match *resp {
        SurvResponse::Exact(t) => {
            let a = b.eval(t)?;
            let ad = b.eval_deriv(t)?;
            eval_exact(dot(&a, theta) + offset, dot(&ad, theta))
        }
        SurvResponse::Right(t) => eval_right(dot(&b.eval(t)?, theta) + offset),
        SurvResponse::Left(t) => eval_left(dot(&b.eval(t)?, theta) + offset),
        SurvResponse::Interval(lo, hi) => eval_interval(
            dot(&b.eval(lo)?, theta) + offset,
            dot(&b.eval(hi)?, theta) + offset,
        ),
    })
}

/// Log-likelihood contribution of one subject. Returns `-inf` (not an
/// error) when the parameters are infeasible for this observation.
pub fn loglik(b: &Basis, p: &ModelParams, s: &Subject) -> Result<f64, LikelihoodError> {
    let (theta, _, offset) = effective_theta(p, s)?;
    Ok(case_eval(b, &theta, offset, &s.response)?.loglik)
}

/// Gradient of the contribution with respect to `theta`.
pub fn score_theta(b: &Basis, p: &ModelParams, s: &Subject) -> Result<Vec<f64>, LikelihoodError> {
    let (theta, _, offset) = effective_theta(p, s)?;
    score_theta_at(b, &theta, offset, &s.response)
}

/// theta-gradient at explicit effective coefficients; the chain rule
/// through `theta + theta_tr` is the identity, so predictive scores reuse
/// this directly.
fn score_theta_at(
    b: &Basis,
    theta: &[f64],
    offset: f64,
    resp: &SurvResponse,
) -> Result<Vec<f64>, LikelihoodError> {
    resp.validate()?;
    let p = b.param_dim().ok_or(BasisError::NonparametricUnsupported)?;
    let mut g = vec![0.0; p];
    match *resp {
        SurvResponse::Exact(t) => {
            let a = b.eval(t)?;
            let ad = b.eval_deriv(t)?;
            let ev = eval_exact(dot(&a, theta) + offset, dot(&ad, theta));
            if ev.feasible {
                for k in 0..p {
                    g[k] = ev.dldz_lower * a[k] + ev.dlog_slope * ad[k];
                }
            }
        }
        SurvResponse::Right(t) => {
            let a = b.eval(t)?;
            let ev = eval_right(dot(&a, theta) + offset);
            for k in 0..p {
                g[k] = ev.dldz_lower * a[k];
            }
        }
        SurvResponse::Left(t) => {
            let a = b.eval(t)?;
            let ev = eval_left(dot(&a, theta) + offset);
            for k in 0..p {
                g[k] = ev.dldz_lower * a[k];
            }
        }
        SurvResponse::Interval(lo, hi) => {
            let al = b.eval(lo)?;
            let au = b.eval(hi)?;
            let ev = eval_interval(dot(&al, theta) + offset, dot(&au, theta) + offset);
            if ev.feasible {
                for k in 0..p {
                    g[k] = ev.dldz_lower * al[k] + ev.dldz_upper * au[k];
                }
            }
        }
    }
    Ok(g)
}

/// Log-rank score: derivative with respect to an intercept shift at zero.
/// With a nonparametric basis the model cumulative hazard `exp(z)` is
/// replaced by the fitted Nelson-Aalen baseline.
pub fn score_alpha(b: &Basis, p: &ModelParams, s: &Subject) -> Result<f64, LikelihoodError> {
    if let Basis::Nonparametric { baseline } = b {
        let na = baseline.as_ref().ok_or(LikelihoodError::MissingBaseline)?;
        s.response.validate()?;
        return Ok(match s.response {
            SurvResponse::Exact(t) => 1.0 - na.eval(t),
            SurvResponse::Right(t) => -na.eval(t),
            SurvResponse::Left(t) => x_over_expm1(na.eval(t)),
            SurvResponse::Interval(lo, hi) => {
                let (xl, xu) = (na.eval(lo), na.eval(hi));
                let d = xu - xl;
                if d <= 0.0 {
                    // flat baseline across the interval: exact-case limit
                    1.0 - xl
                } else {
                    x_over_expm1(d) - xl
                }
            }
        });
    }
    let (theta, _, offset) = effective_theta(p, s)?;
    Ok(case_eval(b, &theta, offset, &s.response)?.dldz_total())
}

/// Bivariate predictive log-rank score `s^alpha * (1, 1(r=1))`.
pub fn score_alpha_beta(b: &Basis, p: &ModelParams, s: &Subject) -> Result<[f64; 2], LikelihoodError> {
    if s.treatment.is_none() {
        return Err(LikelihoodError::MissingTreatment);
    }
    let u = score_alpha(b, p, s)?;
    Ok([u, if s.is_treated() { u } else { 0.0 }])
}

/// `(d l / d theta, d l / d beta)`.
pub fn score_theta_beta(b: &Basis, p: &ModelParams, s: &Subject) -> Result<Vec<f64>, LikelihoodError> {
    if s.treatment.is_none() {
        return Err(LikelihoodError::MissingTreatment);
    }
    let (theta, treated, offset) = effective_theta(p, s)?;
    let mut g = score_theta_at(b, &theta, offset, &s.response)?;
    let dbeta = if treated {
        case_eval(b, &theta, offset, &s.response)?.dldz_total()
    } else {
        0.0
    };
    g.push(dbeta);
    Ok(g)
}

/// `(d l / d theta, d l / d theta_tr)`: the second block is zero for
/// untreated subjects and equals the first for treated ones.
pub fn score_theta_thetatr(
    b: &Basis,
    p: &ModelParams,
    s: &Subject,
) -> Result<Vec<f64>, LikelihoodError> {
    if s.treatment.is_none() {
        return Err(LikelihoodError::MissingTreatment);
    }
    let (theta, treated, offset) = effective_theta(p, s)?;
    let base = score_theta_at(b, &theta, offset, &s.response)?;
    let mut g = Vec::with_capacity(2 * base.len());
    g.extend_from_slice(&base);
    if treated {
        g.extend_from_slice(&base);
    } else {
        g.extend(std::iter::repeat(0.0).take(base.len()));
    }
    Ok(g)
}

/// Weighted total `sum_i w_i l_i`. Zero-weight subjects contribute exactly
/// zero even when their own contribution would be `-inf`.
pub fn total_loglik(
    b: &Basis,
    p: &ModelParams,
    subjects: &[Subject],
    weights: &[f64],
) -> Result<f64, LikelihoodError> {
    if weights.len() != subjects.len() {
        return Err(LikelihoodError::WeightLengthMismatch {
            got: weights.len(),
            expected: subjects.len(),
        });
    }
    let mut total = 0.0;
    for (s, &w) in subjects.iter().zip(weights) {
        if w < 0.0 {
            return Err(LikelihoodError::NegativeWeight(w));
        }
        if w == 0.0 {
            continue;
        }
        total += w * loglik(b, p, s)?;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Nonparametric baseline estimators
// ---------------------------------------------------------------------------

/// Right-continuous step cumulative hazard on observed event times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeHazard {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl CumulativeHazard {
    /// `Lambda(t)`; zero before the first event time.
    pub fn eval(&self, t: f64) -> f64 {
        match self.times.partition_point(|&u| u <= t) {
            0 => 0.0,
            k => self.values[k - 1],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Nelson-Aalen estimator from exact (event) and right-censored
/// observations; left- and interval-censored subjects are not entered into
/// the risk sets.
pub fn nelson_aalen(responses: &[SurvResponse]) -> CumulativeHazard {
    let (times, increments) = risk_set_sweep(responses);
    let mut cum = 0.0;
    let values = increments
        .iter()
        .map(|&(d, n)| {
            cum += d / n;
            cum
        })
        .collect();
    CumulativeHazard { times, values }
}

/// Kaplan-Meier survivor estimate evaluated at the event times, as
/// `(event_time, S(event_time))` pairs.
pub fn kaplan_meier(responses: &[SurvResponse]) -> Vec<(f64, f64)> {
    let (times, increments) = risk_set_sweep(responses);
    let mut s = 1.0;
    times
        .iter()
        .zip(&increments)
        .map(|(&t, &(d, n))| {
            s *= 1.0 - d / n;
            (t, s)
        })
        .collect()
}

/// Distinct event times with `(events, at-risk)` counts.
fn risk_set_sweep(responses: &[SurvResponse]) -> (Vec<f64>, Vec<(f64, f64)>) {
    let mut obs: Vec<(f64, bool)> = responses
        .iter()
        .filter_map(|r| match *r {
            SurvResponse::Exact(t) => Some((t, true)),
            SurvResponse::Right(t) => Some((t, false)),
            _ => None,
        })
        .collect();
    // events before censorings at tied times: censored subjects remain at
    // risk for a death at their censoring time
    obs.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
    let mut times = Vec::new();
    let mut counts = Vec::new();
    let n = obs.len();
    let mut i = 0;
    while i < n {
        let t = obs[i].0;
        let at_risk = (n - i) as f64;
        let mut events = 0.0;
        let mut j = i;
        while j < n && obs[j].0 == t {
            if obs[j].1 {
                events += 1.0;
            }
            j += 1;
        }
        if events > 0.0 {
            times.push(t);
            counts.push((events, at_risk));
        }
        i = j;
    }
    (times, counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_exponential() -> (Basis, ModelParams) {
        (Basis::weibull(), ModelParams::prognostic(vec![0.0, 1.0]))
    }

    fn subj(r: SurvResponse) -> Subject {
        Subject::new(r, vec![])
    }

    #[test]
    fn loglik_unit_exponential_cases() {
        let (b, p) = unit_exponential();
        assert_relative_eq!(
            loglik(&b, &p, &subj(SurvResponse::Exact(2.0))).unwrap(),
            -2.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            loglik(&b, &p, &subj(SurvResponse::Right(3.0))).unwrap(),
            -3.0,
            epsilon = 1e-12
        );
        // log(e^-1 - e^-2), frozen from direct evaluation
        assert_relative_eq!(
            loglik(&b, &p, &subj(SurvResponse::Interval(1.0, 2.0))).unwrap(),
            -1.4586751453870819,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            loglik(&b, &p, &subj(SurvResponse::Left(1.0))).unwrap(),
            (1.0f64 - (-1.0f64).exp()).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn null_treatment_effect_is_identity() {
        let b = Basis::weibull();
        let p0 = ModelParams::prognostic(vec![0.3, 1.2]);
        let pb = ModelParams::with_beta(vec![0.3, 1.2], 0.0);
        let ptr = ModelParams::with_theta_tr(vec![0.3, 1.2], vec![0.0, 0.0]);
        let s = Subject::with_treatment(SurvResponse::Exact(2.5), vec![], 1);
        let l0 = loglik(&b, &p0, &s).unwrap();
        assert_relative_eq!(loglik(&b, &pb, &s).unwrap(), l0, epsilon = 1e-14);
        assert_relative_eq!(loglik(&b, &ptr, &s).unwrap(), l0, epsilon = 1e-14);
    }

    #[test]
    fn infeasible_slope_flags_neg_infinity() {
        let b = Basis::weibull();
        let p = ModelParams::prognostic(vec![0.0, -1.0]);
        let l = loglik(&b, &p, &subj(SurvResponse::Exact(2.0))).unwrap();
        assert!(l == f64::NEG_INFINITY);
    }

    #[test]
    fn score_theta_hand_values() {
        let (b, p) = unit_exponential();
        let g = score_theta(&b, &p, &subj(SurvResponse::Exact(1.0))).unwrap();
        assert_relative_eq!(g[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(g[1], 1.0, epsilon = 1e-12);
        let g = score_theta(&b, &p, &subj(SurvResponse::Right(1.0))).unwrap();
        assert_relative_eq!(g[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(g[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn score_alpha_hand_values() {
        let (b, p) = unit_exponential();
        assert_relative_eq!(
            score_alpha(&b, &p, &subj(SurvResponse::Exact(2.0))).unwrap(),
            -1.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            score_alpha(&b, &p, &subj(SurvResponse::Right(3.0))).unwrap(),
            -3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn score_alpha_beta_indicator() {
        let (b, p) = unit_exponential();
        let untreated = Subject::with_treatment(SurvResponse::Exact(2.0), vec![], 0);
        let treated = Subject::with_treatment(SurvResponse::Exact(2.0), vec![], 1);
        let pb = ModelParams::with_beta(p.theta.clone(), 0.0);
        assert_eq!(score_alpha_beta(&b, &pb, &untreated).unwrap(), [-1.0, 0.0]);
        assert_eq!(score_alpha_beta(&b, &pb, &treated).unwrap(), [-1.0, -1.0]);
        let no_arm = subj(SurvResponse::Exact(2.0));
        assert!(matches!(
            score_alpha_beta(&b, &pb, &no_arm),
            Err(LikelihoodError::MissingTreatment)
        ));
    }

    #[test]
    fn predictive_score_blocks() {
        let b = Basis::bernstein(3, (-1.0, 2.0)).unwrap();
        let theta = vec![-1.0, -0.2, 0.5, 1.5];
        let p = ModelParams::with_theta_tr(theta.clone(), vec![0.0; 4]);
        let untreated = Subject::with_treatment(SurvResponse::Interval(1.0, 3.0), vec![], 0);
        let treated = Subject::with_treatment(SurvResponse::Interval(1.0, 3.0), vec![], 1);
        let gu = score_theta_thetatr(&b, &p, &untreated).unwrap();
        assert!(gu[4..].iter().all(|&v| v == 0.0));
        let gt = score_theta_thetatr(&b, &p, &treated).unwrap();
        assert_eq!(&gt[..4], &gt[4..]);
        // theta_tr = 0: first block equals the prognostic score
        let prog = score_theta(&b, &ModelParams::prognostic(theta), &untreated).unwrap();
        for (a, b) in gt[..4].iter().zip(&prog) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
        // theta-beta: untreated last entry zero, beta=0 first block prognostic
        let pb = ModelParams::with_beta(p.theta.clone(), 0.0);
        let g = score_theta_beta(&b, &pb, &untreated).unwrap();
        assert_eq!(g[4], 0.0);
        for (a, b) in g[..4].iter().zip(&prog) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    /// Central finite differences of the log-likelihood: the oracle every
    /// score family must reproduce.
    fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut hi = x.to_vec();
                let mut lo = x.to_vec();
                hi[k] += h;
                lo[k] -= h;
                (f(&hi) - f(&lo)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], fd: &[f64], tol: f64) {
        for (a, f) in analytic.iter().zip(fd) {
            // near-zero components are compared absolutely: central
            // differences carry ~1e-10 noise of their own
            let scale = a.abs().max(f.abs()).max(1e-4);
            assert!(
                (a - f).abs() / scale < tol,
                "gradient mismatch: analytic {a} vs fd {f}"
            );
        }
    }

    #[test]
    fn all_score_families_match_finite_differences() {
        let responses = [
            SurvResponse::Exact(1.7),
            SurvResponse::Right(0.8),
            SurvResponse::Left(2.6),
            SurvResponse::Interval(0.9, 2.2),
        ];
        let bases = [Basis::weibull(), Basis::bernstein(4, (-1.0, 1.5)).unwrap()];
        for b in &bases {
            let pdim = b.param_dim().unwrap();
            let theta: Vec<f64> = (0..pdim).map(|k| -0.5 + 0.9 * k as f64).collect();
            for resp in &responses {
                for arm in [0u8, 1u8] {
                    let s = Subject::with_treatment(*resp, vec![], arm);
                    // theta score
                    let p = ModelParams::prognostic(theta.clone());
                    let g = score_theta(b, &p, &s).unwrap();
                    let fd = fd_grad(
                        &|th: &[f64]| {
                            loglik(b, &ModelParams::prognostic(th.to_vec()), &s).unwrap()
                        },
                        &theta,
                        1e-6,
                    );
                    assert_close(&g, &fd, 1e-5);

                    // alpha score: shift every component of z via beta on a
                    // treated subject with beta as the probe
                    let treated = Subject::with_treatment(*resp, vec![], 1);
                    let ga = score_alpha(b, &p, &treated).unwrap();
                    let fda = fd_grad(
                        &|bb: &[f64]| {
                            loglik(b, &ModelParams::with_beta(theta.clone(), bb[0]), &treated)
                                .unwrap()
                        },
                        &[0.2],
                        1e-6,
                    );
                    let ga_at = score_alpha(
                        b,
                        &ModelParams::with_beta(theta.clone(), 0.2),
                        &treated,
                    )
                    .unwrap();
                    assert_close(&[ga_at], &fda, 1e-5);
                    let _ = ga;

                    // theta-beta
                    let beta = 0.3;
                    let pb = ModelParams::with_beta(theta.clone(), beta);
                    let g = score_theta_beta(b, &pb, &s).unwrap();
                    let mut x = theta.clone();
                    x.push(beta);
                    let fd = fd_grad(
                        &|v: &[f64]| {
                            let (th, be) = v.split_at(pdim);
                            loglik(b, &ModelParams::with_beta(th.to_vec(), be[0]), &s).unwrap()
                        },
                        &x,
                        1e-6,
                    );
                    assert_close(&g, &fd, 1e-5);

                    // theta-thetatr
                    let tr: Vec<f64> = (0..pdim).map(|k| 0.05 * (k as f64 + 1.0)).collect();
                    let ptr = ModelParams::with_theta_tr(theta.clone(), tr.clone());
                    let g = score_theta_thetatr(b, &ptr, &s).unwrap();
                    let mut x = theta.clone();
                    x.extend_from_slice(&tr);
                    let fd = fd_grad(
                        &|v: &[f64]| {
                            let (th, t2) = v.split_at(pdim);
                            loglik(
                                b,
                                &ModelParams::with_theta_tr(th.to_vec(), t2.to_vec()),
                                &s,
                            )
                            .unwrap()
                        },
                        &x,
                        1e-6,
                    );
                    assert_close(&g, &fd, 1e-5);
                }
            }
        }
    }

    #[test]
    fn interval_degenerates_to_right_censoring() {
        let (b, p) = unit_exponential();
        let right = loglik(&b, &p, &subj(SurvResponse::Right(1.5))).unwrap();
        let wide = loglik(&b, &p, &subj(SurvResponse::Interval(1.5, 1e9))).unwrap();
        assert_relative_eq!(right, wide, epsilon = 1e-9);
        // and equals log(F(hi) - F(lo)) exactly at finite bounds
        let f = |t: f64| 1.0 - (-t).exp();
        let l = loglik(&b, &p, &subj(SurvResponse::Interval(0.5, 2.0))).unwrap();
        assert_relative_eq!(l, (f(2.0) - f(0.5)).ln(), epsilon = 1e-12);
    }

    #[test]
    fn total_loglik_weighting() {
        let (b, p) = unit_exponential();
        let subjects = vec![subj(SurvResponse::Exact(2.0)), subj(SurvResponse::Right(1.0))];
        assert_eq!(total_loglik(&b, &p, &subjects, &[0.0, 0.0]).unwrap(), 0.0);
        let single = total_loglik(&b, &p, &subjects[..1], &[1.0]).unwrap();
        assert_relative_eq!(single, -2.0, epsilon = 1e-12);
        let l1 = total_loglik(&b, &p, &subjects, &[1.0, 1.0]).unwrap();
        let l2 = total_loglik(&b, &p, &subjects, &[2.0, 2.0]).unwrap();
        assert_relative_eq!(l2, 2.0 * l1, epsilon = 1e-12);
        assert!(matches!(
            total_loglik(&b, &p, &subjects, &[1.0, -0.5]),
            Err(LikelihoodError::NegativeWeight(_))
        ));
    }

    #[test]
    fn early_left_censoring_is_stable() {
        // exp(z) ~ 1e-13 at the bound: the naive log(1 - e^{-x}) underflows
        let b = Basis::weibull();
        let p = ModelParams::prognostic(vec![-30.0, 1.0]);
        let s = subj(SurvResponse::Left(2.0));
        let l = loglik(&b, &p, &s).unwrap();
        let x = (-30.0f64 + 2.0f64.ln()).exp();
        assert_relative_eq!(l, x.ln() - x / 2.0, epsilon = 1e-10);
        assert!(l.is_finite());
        let g = score_theta(&b, &p, &s).unwrap();
        assert_relative_eq!(g[0], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn nelson_aalen_basics() {
        let rs = vec![
            SurvResponse::Exact(1.0),
            SurvResponse::Exact(2.0),
            SurvResponse::Right(1.5),
            SurvResponse::Right(3.0),
        ];
        let na = nelson_aalen(&rs);
        assert_relative_eq!(na.eval(0.5), 0.0);
        assert_relative_eq!(na.eval(1.0), 0.25, epsilon = 1e-12);
        assert_relative_eq!(na.eval(2.5), 0.25 + 0.5, epsilon = 1e-12);

        // no events: identically zero, right-censored log-rank scores all 0
        let censored_only = vec![SurvResponse::Right(1.0), SurvResponse::Right(2.0)];
        let na = nelson_aalen(&censored_only);
        assert!(na.is_empty());
        let b = Basis::Nonparametric { baseline: Some(na) };
        let p = ModelParams::prognostic(vec![]);
        for r in &censored_only {
            assert_eq!(score_alpha(&b, &p, &subj(*r)).unwrap(), 0.0);
        }
    }

    #[test]
    fn nonparametric_log_rank_scores_sum_to_zero() {
        // martingale residuals of the Nelson-Aalen estimator sum to zero
        let rs = vec![
            SurvResponse::Exact(1.0),
            SurvResponse::Exact(2.0),
            SurvResponse::Exact(2.0),
            SurvResponse::Right(1.5),
            SurvResponse::Right(4.0),
            SurvResponse::Exact(5.0),
        ];
        let b = Basis::Nonparametric { baseline: Some(nelson_aalen(&rs)) };
        let p = ModelParams::prognostic(vec![]);
        let total: f64 = rs
            .iter()
            .map(|r| score_alpha(&b, &p, &subj(*r)).unwrap())
            .sum();
        assert_relative_eq!(total, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kaplan_meier_matches_hand_computation() {
        let rs = vec![
            SurvResponse::Exact(1.0),
            SurvResponse::Right(1.5),
            SurvResponse::Exact(2.0),
            SurvResponse::Right(3.0),
        ];
        let km = kaplan_meier(&rs);
        assert_eq!(km.len(), 2);
        assert_relative_eq!(km[0].1, 0.75, epsilon = 1e-12);
        assert_relative_eq!(km[1].1, 0.75 * 0.5, epsilon = 1e-12);
    }
}
