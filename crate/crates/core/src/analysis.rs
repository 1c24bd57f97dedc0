//! One-call analysis of a dataset: fits, selections and every BMD estimator
//! at each requested BMR.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::QuantalDataset;
use crate::error::{BmdError, Result};
use crate::focused::{fic_bmd, fic_select, project_all, Design, FicVariant, FocusedOptions, RiskMatrix};
use crate::likelihood::{fit_mle, FittedModel};
use crate::models::{BmdEstimate, ModelSpec};
use crate::nonparametric::{nonpar_bmd, PavaFit};
use crate::selection::{model_averaged_bmd, select_ic, two_step_bmd, Criterion};

/// The eight BMD estimators, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "FIC1")]
    Fic1,
    #[serde(rename = "FIC2")]
    Fic2,
    #[serde(rename = "FIC3")]
    Fic3,
    #[serde(rename = "AIC")]
    Aic,
    #[serde(rename = "BIC")]
    Bic,
    #[serde(rename = "AICModAve")]
    AicModAve,
    #[serde(rename = "BICModAve")]
    BicModAve,
    #[serde(rename = "NONPAR")]
    Nonpar,
}

impl Estimator {
    pub const ALL: [Estimator; 8] = [
        Estimator::Fic1,
        Estimator::Fic2,
        Estimator::Fic3,
        Estimator::Aic,
        Estimator::Bic,
        Estimator::AicModAve,
        Estimator::BicModAve,
        Estimator::Nonpar,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Estimator::Fic1 => "FIC1",
            Estimator::Fic2 => "FIC2",
            Estimator::Fic3 => "FIC3",
            Estimator::Aic => "AIC",
            Estimator::Bic => "BIC",
            Estimator::AicModAve => "AICModAve",
            Estimator::BicModAve => "BICModAve",
            Estimator::Nonpar => "NONPAR",
        }
    }

    fn needs_risk_matrix(self) -> bool {
        matches!(self, Estimator::Fic1 | Estimator::Fic2 | Estimator::Fic3)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Estimator {
    type Err = BmdError;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| BmdError::InvalidConfig(format!("unknown estimator `{s}`")))
    }
}

/// The five model selectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Selector {
    #[serde(rename = "FIC1")]
    Fic1,
    #[serde(rename = "FIC2")]
    Fic2,
    #[serde(rename = "FIC3")]
    Fic3,
    #[serde(rename = "AIC")]
    Aic,
    #[serde(rename = "BIC")]
    Bic,
}

impl Selector {
    pub const ALL: [Selector; 5] = [Selector::Fic1, Selector::Fic2, Selector::Fic3, Selector::Aic, Selector::Bic];

    pub fn label(self) -> &'static str {
        match self {
            Selector::Fic1 => "FIC1",
            Selector::Fic2 => "FIC2",
            Selector::Fic3 => "FIC3",
            Selector::Aic => "AIC",
            Selector::Bic => "BIC",
        }
    }

    fn fic(self) -> Option<FicVariant> {
        match self {
            Selector::Fic1 => Some(FicVariant::FE),
            Selector::Fic2 => Some(FicVariant::FM),
            Selector::Fic3 => Some(FicVariant::EMP),
            _ => None,
        }
    }

    /// AIC and BIC choices do not depend on the BMR.
    pub fn depends_on_bmr(self) -> bool {
        self.fic().is_some()
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub models: Vec<ModelSpec>,
    pub bmrs: Vec<f64>,
    pub estimators: Vec<Estimator>,
    pub selectors: Vec<Selector>,
    pub focused: FocusedOptions,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            models: ModelSpec::STANDARD.to_vec(),
            bmrs: vec![0.01, 0.05, 0.10],
            estimators: Estimator::ALL.to_vec(),
            selectors: Selector::ALL.to_vec(),
            focused: FocusedOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmrAnalysis {
    pub q: f64,
    pub risk_matrix: Option<RiskMatrix>,
    pub selections: Vec<(Selector, std::result::Result<ModelSpec, String>)>,
    pub estimates: Vec<(Estimator, std::result::Result<BmdEstimate, String>)>,
}

impl BmrAnalysis {
    pub fn estimate(&self, e: Estimator) -> Option<&std::result::Result<BmdEstimate, String>> {
        self.estimates.iter().find(|(x, _)| *x == e).map(|(_, r)| r)
    }

    pub fn selection(&self, s: Selector) -> Option<&std::result::Result<ModelSpec, String>> {
        self.selections.iter().find(|(x, _)| *x == s).map(|(_, r)| r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub fits: Vec<FittedModel>,
    pub pava: PavaFit,
    pub per_bmr: Vec<BmrAnalysis>,
}

impl Analysis {
    pub fn at(&self, q: f64) -> Option<&BmrAnalysis> {
        self.per_bmr.iter().find(|b| b.q == q)
    }
}

/// Fit the requested classes and evaluate the requested selectors and
/// estimators at every BMR. Failures are kept per cell.
pub fn analyze(data: &QuantalDataset, options: &AnalysisOptions) -> Result<Analysis> {
    if let Some(&q) = options.bmrs.iter().find(|&&q| !(q > 0.0 && q < 1.0)) {
        return Err(BmdError::InvalidBmr(q));
    }
    let fits: Vec<FittedModel> = options
        .models
        .iter()
        .map(|&s| fit_mle(data, s, &[]))
        .collect::<Result<_>>()?;
    let pava = PavaFit::from_data(data);
    let max_dose = data.max_dose();

    let need_risk = options.estimators.iter().any(|e| e.needs_risk_matrix())
        || options.selectors.iter().any(|s| s.depends_on_bmr());
    let projections = need_risk.then(|| project_all(&Design::from_data(data), &fits, &pava, options.focused.execution));

    let per_bmr = options
        .bmrs
        .iter()
        .map(|&q| {
            let risk_matrix = projections.as_ref().map(|p| p.risk_matrix(q, options.focused.gradient));
            let fic_sel = |v: FicVariant| -> Result<ModelSpec> {
                fic_select(risk_matrix.as_ref().expect("risk matrix computed"), v)
            };
            let selections = options
                .selectors
                .iter()
                .map(|&s| {
                    let r = match s {
                        Selector::Aic => select_ic(&fits, Criterion::Aic),
                        Selector::Bic => select_ic(&fits, Criterion::Bic),
                        _ => fic_sel(s.fic().unwrap()),
                    };
                    (s, r.map_err(|e| e.to_string()))
                })
                .collect();
            let estimates = options
                .estimators
                .iter()
                .map(|&e| {
                    let fic = |v| fic_bmd(&fits, risk_matrix.as_ref().expect("risk matrix computed"), v, max_dose);
                    let r = match e {
                        Estimator::Fic1 => fic(FicVariant::FE),
                        Estimator::Fic2 => fic(FicVariant::FM),
                        Estimator::Fic3 => fic(FicVariant::EMP),
                        Estimator::Aic => two_step_bmd(&fits, Criterion::Aic, q, max_dose),
                        Estimator::Bic => two_step_bmd(&fits, Criterion::Bic, q, max_dose),
                        Estimator::AicModAve => model_averaged_bmd(&fits, Criterion::Aic, q, max_dose),
                        Estimator::BicModAve => model_averaged_bmd(&fits, Criterion::Bic, q, max_dose),
                        Estimator::Nonpar => nonpar_bmd(&pava, q),
                    };
                    (e, r.map_err(|e| e.to_string()))
                })
                .collect();
            BmrAnalysis { q, risk_matrix, selections, estimates }
        })
        .collect();
    Ok(Analysis { fits, pava, per_bmr })
}
