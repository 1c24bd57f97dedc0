//! AIC/BIC selection, information-criterion weights, and the two-step and
//! model-averaged BMD estimators.
//!
//! Fits that did not converge take no part in selection or averaging.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{BmdError, Result};
use crate::likelihood::FittedModel;
use crate::models::{bmd_within, BmdEstimate, ModelSpec, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Criterion {
    #[serde(rename = "AIC")]
    Aic,
    #[serde(rename = "BIC")]
    Bic,
}

impl Criterion {
    pub fn value(self, fit: &FittedModel) -> f64 {
        match self {
            Criterion::Aic => fit.aic,
            Criterion::Bic => fit.bic,
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Aic => "AIC",
            Criterion::Bic => "BIC",
        })
    }
}

/// Normalized non-negative model weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector {
    pub weights: BTreeMap<ModelSpec, f64>,
}

impl WeightVector {
    pub fn get(&self, spec: ModelSpec) -> f64 {
        self.weights.get(&spec).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ModelSpec, f64)> + '_ {
        self.weights.iter().map(|(&s, &w)| (s, w))
    }

    pub fn total(&self) -> f64 {
        self.weights.values().sum()
    }

    /// Highest-weight model; ties go to the canonical order.
    pub fn argmax(&self) -> Option<ModelSpec> {
        self.iter()
            .fold(None, |best: Option<(ModelSpec, f64)>, (s, w)| match best {
                Some((_, bw)) if bw >= w => best,
                _ => Some((s, w)),
            })
            .map(|(s, _)| s)
    }
}

fn usable(fits: &[FittedModel], criterion: Criterion) -> impl Iterator<Item = &FittedModel> {
    fits.iter().filter(move |f| f.converged && criterion.value(f).is_finite())
}

/// Index of the smallest finite value; ties go to the lower `ModelSpec`.
pub(crate) fn argmin_canonical<I: IntoIterator<Item = (ModelSpec, f64)>>(items: I) -> Option<ModelSpec> {
    items
        .into_iter()
        .filter(|(_, v)| !v.is_nan())
        .fold(None, |best: Option<(ModelSpec, f64)>, (s, v)| match best {
            Some((bs, bv)) if bv < v || (bv == v && bs < s) => best,
            _ => Some((s, v)),
        })
        .map(|(s, _)| s)
}

/// Model minimizing the criterion among converged fits.
pub fn select_ic(fits: &[FittedModel], criterion: Criterion) -> Result<ModelSpec> {
    argmin_canonical(usable(fits, criterion).map(|f| (f.spec, criterion.value(f)))).ok_or(BmdError::NoConvergedFits)
}

/// Weights `exp(-IC/2)` normalized, with the minimum subtracted first.
pub fn ic_weights_from_values(values: &[(ModelSpec, f64)]) -> Result<WeightVector> {
    let finite: Vec<_> = values.iter().filter(|(_, v)| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(BmdError::NoConvergedFits);
    }
    let min = finite.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    let raw: Vec<(ModelSpec, f64)> = finite.iter().map(|&&(s, v)| (s, (-0.5 * (v - min)).exp())).collect();
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    Ok(WeightVector {
        weights: raw.into_iter().map(|(s, w)| (s, w / total)).collect(),
    })
}

pub fn ic_weights(fits: &[FittedModel], criterion: Criterion) -> Result<WeightVector> {
    let values: Vec<_> = usable(fits, criterion).map(|f| (f.spec, criterion.value(f))).collect();
    ic_weights_from_values(&values)
}

fn fit_for(fits: &[FittedModel], spec: ModelSpec) -> Result<&FittedModel> {
    fits.iter()
        .find(|f| f.spec == spec && f.converged)
        .ok_or(BmdError::NoConvergedFits)
}

/// BMD of the criterion-selected model at its MLE. `max_dose` is the largest
/// design dose, which sets the BMD search range.
pub fn two_step_bmd(fits: &[FittedModel], criterion: Criterion, q: f64, max_dose: f64) -> Result<BmdEstimate> {
    let spec = select_ic(fits, criterion)?;
    let fit = fit_for(fits, spec)?;
    Ok(BmdEstimate {
        estimator: criterion.to_string(),
        q,
        dose: bmd_within(spec, &fit.beta_hat, q, max_dose)?,
        provenance: Provenance::Selected { model: spec },
    })
}

/// Weighted sum of per-model BMDs. Every model carrying positive weight must
/// have an attainable BMD.
pub fn model_averaged_bmd(fits: &[FittedModel], criterion: Criterion, q: f64, max_dose: f64) -> Result<BmdEstimate> {
    let weights = ic_weights(fits, criterion)?;
    let mut dose = 0.0;
    for (spec, w) in weights.iter() {
        if w > 0.0 {
            let fit = fit_for(fits, spec)?;
            dose += w * bmd_within(spec, &fit.beta_hat, q, max_dose)?;
        }
    }
    Ok(BmdEstimate {
        estimator: format!("{criterion}ModAve"),
        q,
        dose,
        provenance: Provenance::Averaged { weights },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ParamVector;
    use approx::assert_relative_eq;

    fn fake(spec: ModelSpec, aic: f64, bic: f64, beta: &[f64]) -> FittedModel {
        FittedModel {
            spec,
            beta_hat: ParamVector(beta.to_vec()),
            loglik: 0.0,
            aic,
            bic,
            converged: true,
            iterations: 1,
            separation: false,
        }
    }

    #[test]
    fn tie_goes_to_canonical_order() {
        let fits = vec![
            fake(ModelSpec::MS1, 10.0, 10.0, &[0.0, 1.0]),
            fake(ModelSpec::LG2, 10.0, 11.0, &[0.0, 1.0, 0.0]),
        ];
        assert_eq!(select_ic(&fits, Criterion::Aic).unwrap(), ModelSpec::LG2);
        assert_eq!(select_ic(&fits, Criterion::Bic).unwrap(), ModelSpec::MS1);
    }

    #[test]
    fn non_converged_fits_are_ignored() {
        let mut a = fake(ModelSpec::LG1, 1.0, 1.0, &[0.0, 1.0]);
        a.converged = false;
        let b = fake(ModelSpec::MS1, 5.0, 5.0, &[0.0, 1.0]);
        assert_eq!(select_ic(&[a.clone(), b.clone()], Criterion::Aic).unwrap(), ModelSpec::MS1);
        let w = ic_weights(&[a.clone(), b], Criterion::Aic).unwrap();
        assert_eq!(w.get(ModelSpec::LG1), 0.0);
        assert_eq!(w.get(ModelSpec::MS1), 1.0);
        assert_eq!(select_ic(&[a], Criterion::Aic), Err(BmdError::NoConvergedFits));
    }

    #[test]
    fn weight_examples() {
        let w = ic_weights_from_values(&[(ModelSpec::LG1, 3.0), (ModelSpec::MS1, 3.0)]).unwrap();
        assert_eq!(w.get(ModelSpec::LG1), 0.5);
        let w = ic_weights_from_values(&[(ModelSpec::LG1, 10.0), (ModelSpec::MS1, 12.0)]).unwrap();
        let e = (-1.0f64).exp();
        assert_relative_eq!(w.get(ModelSpec::LG1), 1.0 / (1.0 + e), epsilon = 1e-15);
        assert_relative_eq!(w.get(ModelSpec::MS1), e / (1.0 + e), epsilon = 1e-15);
        assert!((w.get(ModelSpec::LG1) - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn weights_stable_at_large_magnitude() {
        let w = ic_weights_from_values(&[(ModelSpec::LG1, 1e4), (ModelSpec::MS1, 1e4 + 1.0), (ModelSpec::MS2, 2e4)])
            .unwrap();
        assert_relative_eq!(w.total(), 1.0, epsilon = 1e-12);
        assert!(w.iter().all(|(_, x)| x >= 0.0 && x.is_finite()));
        assert_eq!(w.argmax(), Some(ModelSpec::LG1));
    }

    #[test]
    fn degenerate_weights_reduce_to_two_step() {
        let fits = vec![
            fake(ModelSpec::MS1, 0.0, 0.0, &[0.0, 1.0]),
            fake(ModelSpec::MS2, 5000.0, 5000.0, &[0.0, 0.32, 0.52]),
        ];
        let avg = model_averaged_bmd(&fits, Criterion::Aic, 0.1, 1.0).unwrap();
        let two = two_step_bmd(&fits, Criterion::Aic, 0.1, 1.0).unwrap();
        assert_eq!(avg.dose, two.dose);
        assert_eq!(two.provenance, Provenance::Selected { model: ModelSpec::MS1 });
        assert_eq!(avg.estimator, "AICModAve");
    }

    #[test]
    fn averaging_fails_when_a_weighted_bmd_fails() {
        let fits = vec![
            fake(ModelSpec::MS1, 0.0, 0.0, &[0.0, 1.0]),
            fake(ModelSpec::LG1, 0.0, 0.0, &[0.0, -1.0]),
        ];
        assert!(matches!(
            model_averaged_bmd(&fits, Criterion::Aic, 0.1, 1.0),
            Err(BmdError::BmrUnattainable { .. })
        ));
    }
}
