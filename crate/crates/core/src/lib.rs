//! Benchmark dose (BMD) estimation for quantal dose-response data.
//!
//! Four parametric model classes (logistic and multistage of order 1 and 2)
//! are fitted by maximum likelihood. BMD estimates come from two-step
//! AIC/BIC selection, information-criterion model averaging, focused
//! risk-based selection over Kullback-Leibler projections, and a
//! nonparametric estimator built on isotonic regression.

pub mod analysis;
pub mod data;
pub mod error;
pub mod focused;
pub mod likelihood;
pub mod models;
pub mod nonparametric;
pub mod optim;
pub mod par;
pub mod selection;
pub mod simulation;

pub use analysis::{analyze, Analysis, AnalysisOptions, BmrAnalysis, Estimator, Selector};
pub use data::{load_dataset, standardize_doses, QuantalDataset};
pub use error::{BmdError, Result};
pub use likelihood::{fit_mle, information_criteria, log_likelihood, FittedModel};
pub use models::{
    bmd, bmd_gradient, bmd_gradient_published, eval_pi, extra_risk, grad_pi, hess_pi, BmdEstimate, Family,
    ModelSpec, ParamVector, Provenance,
};
pub use focused::{
    build_risk_matrices, build_risk_matrix, fic_bmd, fic_select, gamma_hat, kl_project, risk_estimate, Design,
    FicVariant, FocusedOptions, RiskCell, RiskMatrix, TargetDistribution, TauGradient,
};
pub use nonparametric::{nonpar_bmd, pava, PavaFit};
pub use par::Execution;
pub use selection::{ic_weights, model_averaged_bmd, select_ic, two_step_bmd, Criterion, WeightVector};
pub use simulation::{
    generate_replicate, run_experiment, solve_curve_constraints, ExperimentConfig, ExperimentSummary, PresetDesign,
    TrueCurve,
};
