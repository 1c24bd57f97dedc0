//! Logistic and multistage dose-response model classes of polynomial order `p`.
//!
//! Both families act on the linear predictor `eta = d_vec(d)' beta` with the
//! dose basis `d_vec(d) = (1, d, ..., d^p)`:
//!
//! * logistic: `pi = exp(eta) / (1 + exp(eta))`
//! * multistage: `pi = 1 - exp(-eta)`, with `eta >= 0` at every design dose.
//!
//! Besides evaluation this module provides the derivatives with respect to
//! `beta`, the extra-risk function, the benchmark dose (BMD) as the inverse of
//! extra risk, and the BMD gradient.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{BmdError, Result};
use crate::selection::WeightVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Logistic,
    Multistage,
}

impl Family {
    fn prefix(self) -> &'static str {
        match self {
            Family::Logistic => "LG",
            Family::Multistage => "MS",
        }
    }
}

/// A model class: family plus polynomial order. Ordering is the canonical
/// label order used for tie-breaking (LG1 < LG2 < MS1 < MS2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModelSpec {
    pub family: Family,
    pub order: usize,
}

impl ModelSpec {
    pub const LG1: ModelSpec = ModelSpec { family: Family::Logistic, order: 1 };
    pub const LG2: ModelSpec = ModelSpec { family: Family::Logistic, order: 2 };
    pub const MS1: ModelSpec = ModelSpec { family: Family::Multistage, order: 1 };
    pub const MS2: ModelSpec = ModelSpec { family: Family::Multistage, order: 2 };

    /// The four classes compared throughout: LG1, LG2, MS1, MS2.
    pub const STANDARD: [ModelSpec; 4] = [Self::LG1, Self::LG2, Self::MS1, Self::MS2];

    pub fn new(family: Family, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(BmdError::UnknownModel(format!("{}0", family.prefix())));
        }
        Ok(Self { family, order })
    }

    /// Number of coefficients, `p + 1`.
    pub fn n_params(&self) -> usize {
        self.order + 1
    }

    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.family.prefix(), self.order)
    }
}

impl FromStr for ModelSpec {
    type Err = BmdError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_uppercase();
        let (family, rest) = if let Some(r) = t.strip_prefix("LG") {
            (Family::Logistic, r)
        } else if let Some(r) = t.strip_prefix("MS") {
            (Family::Multistage, r)
        } else {
            return Err(BmdError::UnknownModel(s.to_string()));
        };
        let order: usize = rest.parse().map_err(|_| BmdError::UnknownModel(s.to_string()))?;
        ModelSpec::new(family, order).map_err(|_| BmdError::UnknownModel(s.to_string()))
    }
}

impl Serialize for ModelSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Coefficient vector `(beta_0, ..., beta_p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn new(beta: Vec<f64>) -> Self {
        Self(beta)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, b| m.max(b.abs()))
    }

    /// Check length against `spec` and, for multistage, `eta >= -tol` at
    /// each of `doses`.
    pub fn validate(&self, spec: ModelSpec, doses: &[f64], tol: f64) -> Result<()> {
        if self.len() != spec.n_params() {
            return Err(BmdError::InvalidParameters {
                spec,
                reason: format!("expected {} coefficients, got {}", spec.n_params(), self.len()),
            });
        }
        if self.0.iter().any(|b| !b.is_finite()) {
            return Err(BmdError::InvalidParameters {
                spec,
                reason: "non-finite coefficient".into(),
            });
        }
        if spec.family == Family::Multistage {
            if let Some(&d) = doses.iter().find(|&&d| linear_predictor(&self.0, d) < -tol) {
                return Err(BmdError::InvalidParameters {
                    spec,
                    reason: format!("multistage predictor negative at dose {d}"),
                });
            }
        }
        Ok(())
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Where a BMD estimate came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Selected { model: ModelSpec },
    Averaged { weights: WeightVector },
    Nonparametric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmdEstimate {
    pub estimator: String,
    pub q: f64,
    /// Dose on the analysis (standardized) scale.
    pub dose: f64,
    pub provenance: Provenance,
}

/// Dose basis `(1, d, d^2, ..., d^p)`.
pub fn dose_basis(d: f64, order: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(order + 1);
    let mut x = 1.0;
    for _ in 0..=order {
        v.push(x);
        x *= d;
    }
    v
}

pub fn linear_predictor(beta: &[f64], d: f64) -> f64 {
    // Horner
    beta.iter().rev().fold(0.0, |acc, &b| acc * d + b)
}

/// Derivative of the linear predictor in dose: `sum_j j beta_j d^(j-1)`.
pub fn predictor_slope(beta: &[f64], d: f64) -> f64 {
    beta.iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (j, &b)| acc * d + j as f64 * b)
}

/// `(pi, 1 - pi)` computed without cancellation.
pub fn pi_pair(spec: ModelSpec, beta: &[f64], d: f64) -> (f64, f64) {
    let eta = linear_predictor(beta, d);
    match spec.family {
        Family::Logistic => (sigmoid(eta), sigmoid(-eta)),
        Family::Multistage => (-(-eta).exp_m1(), (-eta).exp()),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn eval_pi(spec: ModelSpec, beta: &ParamVector, d: f64) -> f64 {
    pi_pair(spec, &beta.0, d).0
}

/// Factor `f` with `grad pi = f * d_vec`: `pi (1 - pi)` for logistic, `1 - pi`
/// for multistage.
pub(crate) fn grad_factor(spec: ModelSpec, pi: f64, pibar: f64) -> f64 {
    match spec.family {
        Family::Logistic => pi * pibar,
        Family::Multistage => pibar,
    }
}

pub fn grad_pi(spec: ModelSpec, beta: &ParamVector, d: f64) -> Vec<f64> {
    let (p, pb) = pi_pair(spec, &beta.0, d);
    let f = grad_factor(spec, p, pb);
    dose_basis(d, spec.order).into_iter().map(|x| f * x).collect()
}

/// Hessian of `pi` in `beta` (not negated), row-major `(p+1) x (p+1)`.
pub fn hess_pi(spec: ModelSpec, beta: &ParamVector, d: f64) -> Vec<Vec<f64>> {
    let (p, pb) = pi_pair(spec, &beta.0, d);
    let f = match spec.family {
        Family::Logistic => -p * pb * (2.0 * p - 1.0),
        Family::Multistage => -pb,
    };
    let v = dose_basis(d, spec.order);
    v.iter().map(|&a| v.iter().map(|&b| f * a * b).collect()).collect()
}

pub fn extra_risk(spec: ModelSpec, beta: &ParamVector, d: f64) -> Result<f64> {
    let (p0, pb0) = pi_pair(spec, &beta.0, 0.0);
    if pb0 <= 0.0 {
        return Err(BmdError::BackgroundCertain);
    }
    let (p, _) = pi_pair(spec, &beta.0, d);
    Ok((p - p0) / pb0)
}

/// Largest design dose assumed when none is given (standardized designs).
pub const DEFAULT_MAX_DESIGN_DOSE: f64 = 1.0;
/// The root search never looks past this multiple of the largest design dose.
pub const BMD_SEARCH_FACTOR: f64 = 10.0;

/// Benchmark dose on a design whose largest dose is 1.
pub fn bmd(spec: ModelSpec, beta: &ParamVector, q: f64) -> Result<f64> {
    bmd_within(spec, beta, q, DEFAULT_MAX_DESIGN_DOSE)
}

/// Benchmark dose: the dose where extra risk equals `q`.
///
/// The bracket starts at `[0, max_design_dose]` and doubles until extra risk
/// reaches `q`, up to `10 * max_design_dose`; bisection then runs to
/// floating-point resolution.
pub fn bmd_within(spec: ModelSpec, beta: &ParamVector, q: f64, max_design_dose: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(BmdError::InvalidBmr(q));
    }
    if beta.0.iter().skip(1).all(|&b| b == 0.0) {
        return Err(BmdError::DegenerateCurve);
    }
    let f = |d: f64| extra_risk(spec, beta, d).map(|r| r - q);
    let cap = BMD_SEARCH_FACTOR * max_design_dose;
    let mut hi = max_design_dose;
    while f(hi)? < 0.0 {
        if hi >= cap {
            return Err(BmdError::BmrUnattainable { q, max_dose: cap });
        }
        hi = (2.0 * hi).min(cap);
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // hi always satisfies f >= 0; pick whichever endpoint is closer to the root
    if f(hi)?.abs() <= f(lo)?.abs() {
        Ok(hi)
    } else {
        Ok(lo)
    }
}

/// Gradient of the BMD with respect to `beta`, by implicit differentiation of
/// `pi(tau) - pi(0) = q (1 - pi(0))`:
///
/// `tau' = [(1 - q) grad pi(0) - grad pi(tau)] / (d pi / d dose)(tau)`.
pub fn bmd_gradient(spec: ModelSpec, beta: &ParamVector, q: f64) -> Result<Vec<f64>> {
    let tau = bmd(spec, beta, q)?;
    bmd_gradient_at(spec, beta, q, tau)
}

pub(crate) fn bmd_gradient_at(spec: ModelSpec, beta: &ParamVector, q: f64, tau: f64) -> Result<Vec<f64>> {
    let (p, pb) = pi_pair(spec, &beta.0, tau);
    let dpi_dd = predictor_slope(&beta.0, tau) * grad_factor(spec, p, pb);
    if dpi_dd == 0.0 || !dpi_dd.is_finite() {
        return Err(BmdError::FlatDoseResponseAtBmd);
    }
    let g0 = grad_pi(spec, beta, 0.0);
    let gt = grad_pi(spec, beta, tau);
    Ok(g0
        .iter()
        .zip(&gt)
        .map(|(a, b)| ((1.0 - q) * a - b) / dpi_dd)
        .collect())
}

/// BMD gradient in the closed form printed for the two families.
///
/// For the logistic family this is identical to [`bmd_gradient`]. For the
/// multistage family the printed form carries `pi(tau)` in the numerator
/// where implicit differentiation gives `1 - pi(tau)`:
///
/// `[(1 - q) e_1 exp(-beta_0) - d_vec(tau) pi(tau)] / [slope(tau) (1 - pi(tau))]`.
///
/// Risk matrices use this form by default since it reproduces the published
/// selections; see [`crate::focused::TauGradient`].
pub fn bmd_gradient_published(spec: ModelSpec, beta: &ParamVector, q: f64) -> Result<Vec<f64>> {
    let tau = bmd(spec, beta, q)?;
    bmd_gradient_published_at(spec, beta, q, tau)
}

pub(crate) fn bmd_gradient_published_at(
    spec: ModelSpec,
    beta: &ParamVector,
    q: f64,
    tau: f64,
) -> Result<Vec<f64>> {
    match spec.family {
        Family::Logistic => bmd_gradient_at(spec, beta, q, tau),
        Family::Multistage => {
            let slope = predictor_slope(&beta.0, tau);
            let (p, pb) = pi_pair(spec, &beta.0, tau);
            let denom = slope * pb;
            if denom == 0.0 || !denom.is_finite() {
                return Err(BmdError::FlatDoseResponseAtBmd);
            }
            let bg = (-beta[0]).exp();
            Ok(dose_basis(tau, spec.order)
                .iter()
                .enumerate()
                .map(|(j, &x)| {
                    let e1 = if j == 0 { (1.0 - q) * bg } else { 0.0 };
                    (e1 - x * p) / denom
                })
                .collect())
        }
    }
}
