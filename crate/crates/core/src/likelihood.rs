//! Binomial log-likelihood, maximum-likelihood fits and information criteria.

use serde::{Deserialize, Serialize};

use crate::data::QuantalDataset;
use crate::error::{BmdError, Result};
use crate::models::{pi_pair, ModelSpec, ParamVector};
use crate::nonparametric::{empirical_probs, pava};
use crate::optim::BinomialObjective;

/// Probability clamp used in the log-likelihood.
pub const LOGLIK_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub beta_hat: ParamVector,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Coefficients diverged: the likelihood supremum is approached at
    /// infinity and `beta_hat` is a point close to it.
    pub separation: bool,
}

impl FittedModel {
    pub fn n_params(&self) -> usize {
        self.spec.n_params()
    }
}

/// `sum_j [Y_j ln pi_j + (N_j - Y_j) ln(1 - pi_j)]` with `pi_j` and
/// `1 - pi_j` floored at `1e-10`. Zero-count terms contribute nothing.
pub fn log_likelihood(data: &QuantalDataset, spec: ModelSpec, beta: &ParamVector) -> f64 {
    let mut ll = 0.0;
    for ((&d, &n), &y) in data.doses().iter().zip(data.subjects()).zip(data.events()) {
        let (p, pb) = pi_pair(spec, beta.as_slice(), d);
        let (p, pb) = (p.max(LOGLIK_EPS), pb.max(LOGLIK_EPS));
        if y > 0 {
            ll += y as f64 * p.ln();
        }
        if n > y {
            ll += (n - y) as f64 * pb.ln();
        }
    }
    ll
}

/// `(AIC, BIC)` for a fit with `n_params` coefficients on `n_total` subjects.
pub fn information_criteria(loglik: f64, n_params: usize, n_total: u64) -> (f64, f64) {
    let g = n_params as f64;
    (-2.0 * loglik + 2.0 * g, -2.0 * loglik + g * (n_total as f64).ln())
}

/// Maximum-likelihood fit of `spec`.
///
/// Starts are the default least-squares start on the link scale, the zero
/// vector (made feasible), and any `starts` given. The best result is kept.
/// A fit that fails to converge is returned with `converged = false`.
pub fn fit_mle(data: &QuantalDataset, spec: ModelSpec, starts: &[ParamVector]) -> Result<FittedModel> {
    if let Some(s) = starts.iter().find(|s| s.len() != spec.n_params()) {
        return Err(BmdError::InvalidParameters {
            spec,
            reason: format!("start has {} coefficients, expected {}", s.len(), spec.n_params()),
        });
    }
    let weights = data.subjects_f64();
    let target = empirical_probs(data);
    let smoothed = pava(&target, &weights);
    let obj = BinomialObjective { spec, doses: data.doses(), weights: &weights, target: &target };
    let start_obj = BinomialObjective { target: &smoothed, ..obj };

    let mut all = vec![start_obj.default_start(), vec![0.0; spec.n_params()]];
    all.extend(starts.iter().map(|s| s.0.clone()));
    let m = obj.maximize(&all);

    let beta_hat = ParamVector(m.beta);
    let loglik = log_likelihood(data, spec, &beta_hat);
    let (aic, bic) = information_criteria(loglik, spec.n_params(), data.n_total());
    Ok(FittedModel {
        spec,
        beta_hat,
        loglik,
        aic,
        bic,
        converged: m.converged,
        iterations: m.iterations,
        separation: m.separation,
    })
}

/// Fit every spec in `specs` with default starts.
pub fn fit_all(data: &QuantalDataset, specs: &[ModelSpec]) -> Vec<FittedModel> {
    specs
        .iter()
        .map(|&s| fit_mle(data, s, &[]).expect("default starts have the right length"))
        .collect()
}
