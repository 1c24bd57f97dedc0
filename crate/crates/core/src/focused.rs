//! Kullback-Leibler projections, sandwich risk estimates and the focused
//! model selectors.
//!
//! For an assumed class `M` and a target distribution with dose-response
//! probabilities `t_j`, the projection `theta*` maximizes
//! `K(theta) = sum_j N_j [t_j ln pi_j + (1 - t_j) ln(1 - pi_j)]`.
//! The risk of estimating the BMD with class `M` is estimated as
//!
//! `R = tau'(theta*)' Xi tau'(theta*) + n (tau(theta*) - tau_emp)^2`
//!
//! with `Xi = A^-1 Sigma A^-1` (both matrices divided by `n`) and `tau_emp`
//! the nonparametric BMD. Rows of a [`RiskMatrix`] are estimator classes,
//! columns are the targets: each fitted class plus the empirical (PAVA)
//! target.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::QuantalDataset;
use crate::error::{BmdError, Result};
use crate::likelihood::FittedModel;
use crate::models::{
    bmd_gradient_at, bmd_gradient_published_at, bmd_within, dose_basis, grad_factor, pi_pair, BmdEstimate,
    Family, ModelSpec, ParamVector, Provenance,
};
use crate::nonparametric::{nonpar_bmd_dose, PavaFit};
use crate::optim::BinomialObjective;
use crate::par::Execution;
use crate::selection::argmin_canonical;

/// Probability clamp inside the KL objective and the A / Sigma matrices.
pub const KL_EPS: f64 = 1e-8;

/// Doses and per-dose subject counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub doses: Vec<f64>,
    pub subjects: Vec<f64>,
}

impl Design {
    pub fn new(doses: Vec<f64>, subjects: Vec<f64>) -> Self {
        assert_eq!(doses.len(), subjects.len(), "doses and subjects must have equal length");
        Self { doses, subjects }
    }

    pub fn from_data(data: &QuantalDataset) -> Self {
        Self::new(data.doses().to_vec(), data.subjects_f64())
    }

    pub fn n_total(&self) -> f64 {
        self.subjects.iter().sum()
    }

    pub fn max_dose(&self) -> f64 {
        self.doses.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Column label of a risk matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TargetLabel {
    Model(ModelSpec),
    Empirical,
}

impl fmt::Display for TargetLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetLabel::Model(s) => write!(f, "{s}"),
            TargetLabel::Empirical => f.write_str("EMP"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TargetSource {
    Model { spec: ModelSpec, beta: ParamVector },
    Empirical(PavaFit),
}

/// An assumed truth: probabilities at the design doses and the source that
/// defines its BMD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution {
    pub probs: Vec<f64>,
    pub source: TargetSource,
}

impl TargetDistribution {
    pub fn from_model(design: &Design, spec: ModelSpec, beta: ParamVector) -> Self {
        let probs = design.doses.iter().map(|&d| pi_pair(spec, beta.as_slice(), d).0).collect();
        Self { probs, source: TargetSource::Model { spec, beta } }
    }

    pub fn empirical(fit: PavaFit) -> Self {
        Self { probs: fit.probs.clone(), source: TargetSource::Empirical(fit) }
    }

    pub fn label(&self) -> TargetLabel {
        match &self.source {
            TargetSource::Model { spec, .. } => TargetLabel::Model(*spec),
            TargetSource::Empirical(_) => TargetLabel::Empirical,
        }
    }

    /// The target's own BMD.
    pub fn bmd(&self, q: f64, max_dose: f64) -> Result<f64> {
        match &self.source {
            TargetSource::Model { spec, beta } => bmd_within(*spec, beta, q, max_dose),
            TargetSource::Empirical(fit) => nonpar_bmd_dose(fit, q),
        }
    }
}

/// Which closed form of the BMD gradient enters the variance term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauGradient {
    /// Implicit-differentiation gradient, [`crate::models::bmd_gradient`].
    Exact,
    /// The printed multistage form, [`crate::models::bmd_gradient_published`].
    #[default]
    Published,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocusedOptions {
    pub gradient: TauGradient,
    pub execution: Execution,
}

impl Default for FocusedOptions {
    fn default() -> Self {
        Self { gradient: TauGradient::Published, execution: Execution::Parallel }
    }
}

fn clamped_pair(spec: ModelSpec, beta: &[f64], d: f64) -> (f64, f64) {
    let (p, pb) = pi_pair(spec, beta, d);
    (p.max(KL_EPS), pb.max(KL_EPS))
}

/// `K(theta)` with model probabilities clamped at `1e-8`.
pub fn kl_objective(design: &Design, target: &TargetDistribution, spec: ModelSpec, beta: &ParamVector) -> f64 {
    let mut k = 0.0;
    for (j, &d) in design.doses.iter().enumerate() {
        let (p, pb) = clamped_pair(spec, beta.as_slice(), d);
        let t = target.probs[j];
        if t > 0.0 {
            k += design.subjects[j] * t * p.ln();
        }
        if t < 1.0 {
            k += design.subjects[j] * (1.0 - t) * pb.ln();
        }
    }
    k
}

/// Gradient of `K`: `sum_j N_j (t_j - pi_j) / (pi_j (1 - pi_j)) grad pi_j`.
pub fn kl_score(design: &Design, target: &TargetDistribution, spec: ModelSpec, beta: &ParamVector) -> Vec<f64> {
    let mut u = vec![0.0; spec.n_params()];
    for (j, &d) in design.doses.iter().enumerate() {
        let p = pi_pair(spec, beta.as_slice(), d).0;
        let t = target.probs[j];
        let w = match spec.family {
            Family::Logistic => design.subjects[j] * (t - p),
            Family::Multistage => design.subjects[j] * (t / p - 1.0),
        };
        for (k, x) in dose_basis(d, spec.order).into_iter().enumerate() {
            u[k] += w * x;
        }
    }
    u
}

fn outer_sum<F: Fn(usize, f64, f64, f64) -> f64>(design: &Design, spec: ModelSpec, beta: &ParamVector, w: F) -> DMatrix<f64> {
    let k = spec.n_params();
    let mut m = DMatrix::zeros(k, k);
    for (j, &d) in design.doses.iter().enumerate() {
        let (p, pb) = clamped_pair(spec, beta.as_slice(), d);
        let x = DVector::from_vec(dose_basis(d, spec.order));
        m.ger(w(j, design.subjects[j], p, pb), &x, &x, 1.0);
    }
    m
}

/// `A = -Hessian of K`, closed form per family: logistic
/// `sum N pi (1 - pi) D`, multistage `sum N t (1 - pi) / pi^2 D`.
pub fn kl_info(design: &Design, target: &TargetDistribution, spec: ModelSpec, beta: &ParamVector) -> DMatrix<f64> {
    outer_sum(design, spec, beta, |j, n, p, pb| match spec.family {
        Family::Logistic => n * p * pb,
        Family::Multistage => n * target.probs[j] * pb / (p * p),
    })
}

/// `A` from the general expression
/// `sum N / w [(t - pi)(-hess pi) + (t (1 - t) + (t - pi)^2) / w grad pi grad pi']`
/// with `w = pi (1 - pi)`.
pub fn kl_info_generic(design: &Design, target: &TargetDistribution, spec: ModelSpec, beta: &ParamVector) -> DMatrix<f64> {
    outer_sum(design, spec, beta, |j, n, p, pb| {
        let t = target.probs[j];
        let w = p * pb;
        let g = grad_factor(spec, p, pb);
        let neg_hess = match spec.family {
            Family::Logistic => p * pb * (2.0 * p - 1.0),
            Family::Multistage => pb,
        };
        n / w * ((t - p) * neg_hess + (t * (1.0 - t) + (t - p) * (t - p)) / w * g * g)
    })
}

/// Covariance of the score under the target, closed form per family:
/// logistic `sum N t (1 - t) D`, multistage `sum N t (1 - t) / pi^2 D`.
pub fn score_covariance(design: &Design, target: &TargetDistribution, spec: ModelSpec, beta: &ParamVector) -> DMatrix<f64> {
    outer_sum(design, spec, beta, |j, n, p, _| {
        let t = target.probs[j];
        match spec.family {
            Family::Logistic => n * t * (1.0 - t),
            Family::Multistage => n * t * (1.0 - t) / (p * p),
        }
    })
}

/// `sum N t (1 - t) / w^2 grad pi grad pi'`.
pub fn score_covariance_generic(
    design: &Design,
    target: &TargetDistribution,
    spec: ModelSpec,
    beta: &ParamVector,
) -> DMatrix<f64> {
    outer_sum(design, spec, beta, |j, n, p, pb| {
        let t = target.probs[j];
        let w = p * pb;
        let g = grad_factor(spec, p, pb);
        n * t * (1.0 - t) / (w * w) * g * g
    })
}

/// Projection of the target onto class `spec`. Extra `starts` (such as the
/// class MLE) are tried alongside the default start.
pub fn kl_project_from(
    design: &Design,
    target: &TargetDistribution,
    spec: ModelSpec,
    starts: &[ParamVector],
) -> Result<ParamVector> {
    let obj = BinomialObjective {
        spec,
        doses: &design.doses,
        weights: &design.subjects,
        target: &target.probs,
    };
    let mut all = vec![obj.default_start()];
    all.extend(starts.iter().filter(|s| s.len() == spec.n_params()).map(|s| s.0.clone()));
    let m = obj.maximize(&all);
    if !m.converged {
        return Err(BmdError::ProjectionFailed {
            spec,
            reason: format!("no convergence after {} iterations", m.iterations),
        });
    }
    Ok(ParamVector(m.beta))
}

pub fn kl_project(design: &Design, target: &TargetDistribution, spec: ModelSpec) -> Result<ParamVector> {
    kl_project_from(design, target, spec, &[])
}

/// `Gamma = tau'' Xi tau'` at a given projection `theta`.
pub fn gamma_at(
    design: &Design,
    target: &TargetDistribution,
    spec: ModelSpec,
    theta: &ParamVector,
    q: f64,
    gradient: TauGradient,
) -> Result<f64> {
    let n = design.n_total();
    let a = kl_info(design, target, spec, theta) / n;
    let s = score_covariance(design, target, spec, theta) / n;
    let tau = bmd_within(spec, theta, q, design.max_dose())?;
    let tdot = match gradient {
        TauGradient::Exact => bmd_gradient_at(spec, theta, q, tau)?,
        TauGradient::Published => bmd_gradient_published_at(spec, theta, q, tau)?,
    };
    let tdot = DVector::from_vec(tdot);
    let u = solve_info(&a, &tdot).ok_or(BmdError::SingularInformation(spec))?;
    let g = (u.transpose() * &s * &u)[(0, 0)];
    if !g.is_finite() {
        return Err(BmdError::SingularInformation(spec));
    }
    Ok(g.max(0.0))
}

fn solve_info(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if !a.iter().all(|v| v.is_finite()) {
        return None;
    }
    let x = match a.clone().cholesky() {
        Some(c) => c.solve(b),
        None => a.clone().lu().solve(b)?,
    };
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Project the target onto `spec`, then evaluate `Gamma`.
pub fn gamma_hat(design: &Design, target: &TargetDistribution, spec: ModelSpec, q: f64, gradient: TauGradient) -> Result<f64> {
    let theta = kl_project(design, target, spec)?;
    gamma_at(design, target, spec, &theta, q, gradient)
}

/// One evaluated risk-matrix entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCell {
    pub gamma: f64,
    /// `n (tau(theta*) - tau_emp)^2`
    pub bias_term: f64,
    pub risk: f64,
    pub projected_bmd: f64,
}

/// `R = Gamma + n (tau(theta) - empirical_bmd)^2` at a given projection.
pub fn risk_at(
    design: &Design,
    target: &TargetDistribution,
    empirical_bmd: f64,
    spec: ModelSpec,
    theta: &ParamVector,
    q: f64,
    gradient: TauGradient,
) -> Result<RiskCell> {
    let gamma = gamma_at(design, target, spec, theta, q, gradient)?;
    let projected_bmd = bmd_within(spec, theta, q, design.max_dose())?;
    let bias_term = design.n_total() * (projected_bmd - empirical_bmd).powi(2);
    Ok(RiskCell { gamma, bias_term, risk: gamma + bias_term, projected_bmd })
}

pub fn risk_estimate(
    design: &Design,
    target: &TargetDistribution,
    empirical_bmd: f64,
    spec: ModelSpec,
    q: f64,
    gradient: TauGradient,
) -> Result<f64> {
    let theta = kl_project(design, target, spec)?;
    risk_at(design, target, empirical_bmd, spec, &theta, q, gradient).map(|c| c.risk)
}

/// Estimated risks for every (estimator class, target) pair at one BMR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskMatrix {
    pub q: f64,
    pub rows: Vec<ModelSpec>,
    pub columns: Vec<TargetLabel>,
    /// `cells[row][column]`; failures keep their error message.
    pub cells: Vec<Vec<std::result::Result<RiskCell, String>>>,
}

impl RiskMatrix {
    /// Risk of a cell, `+inf` when it failed or is absent.
    pub fn risk(&self, row: ModelSpec, col: TargetLabel) -> f64 {
        let (Some(i), Some(j)) = (
            self.rows.iter().position(|&r| r == row),
            self.columns.iter().position(|&c| c == col),
        ) else {
            return f64::INFINITY;
        };
        match &self.cells[i][j] {
            Ok(c) if c.risk.is_finite() => c.risk,
            _ => f64::INFINITY,
        }
    }

    fn entries(&self) -> impl Iterator<Item = (ModelSpec, TargetLabel, f64)> + '_ {
        self.rows
            .iter()
            .flat_map(move |&r| self.columns.iter().map(move |&c| (r, c, self.risk(r, c))))
    }

    /// Multiply every risk by `factor`.
    pub fn scaled(&self, factor: f64) -> RiskMatrix {
        let mut m = self.clone();
        for row in &mut m.cells {
            for cell in row.iter_mut().flatten() {
                cell.gamma *= factor;
                cell.bias_term *= factor;
                cell.risk *= factor;
            }
        }
        m
    }

    /// CSV with one row per estimator class and one column per target.
    /// Failed cells are written as `NA`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["model".to_string()];
        header.extend(self.columns.iter().map(|c| c.to_string()));
        wtr.write_record(&header)?;
        for (i, r) in self.rows.iter().enumerate() {
            let mut rec = vec![r.to_string()];
            rec.extend(self.cells[i].iter().map(|c| match c {
                Ok(c) => format!("{}", c.risk),
                Err(_) => "NA".to_string(),
            }));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Projections for all (class, target) pairs, shared across BMR values.
#[derive(Debug, Clone)]
pub struct Projections {
    pub design: Design,
    pub rows: Vec<ModelSpec>,
    pub targets: Vec<TargetDistribution>,
    pub pava: PavaFit,
    /// `theta[row][column]`
    pub theta: Vec<Vec<Result<ParamVector>>>,
}

/// Project every converged class onto every converged fit and the PAVA
/// target.
pub fn project_all(design: &Design, fits: &[FittedModel], pava: &PavaFit, execution: Execution) -> Projections {
    let usable: Vec<&FittedModel> = fits.iter().filter(|f| f.converged).collect();
    let mut targets: Vec<TargetDistribution> = usable
        .iter()
        .map(|f| TargetDistribution::from_model(design, f.spec, f.beta_hat.clone()))
        .collect();
    targets.push(TargetDistribution::empirical(pava.clone()));
    let jobs: Vec<(usize, usize)> = (0..usable.len())
        .flat_map(|i| (0..targets.len()).map(move |j| (i, j)))
        .collect();
    let flat = execution.map(jobs, |(i, j)| {
        let f = usable[i];
        kl_project_from(design, &targets[j], f.spec, std::slice::from_ref(&f.beta_hat))
    });
    let mut it = flat.into_iter();
    let theta = (0..usable.len())
        .map(|_| (0..targets.len()).map(|_| it.next().unwrap()).collect())
        .collect();
    Projections {
        design: design.clone(),
        rows: usable.iter().map(|f| f.spec).collect(),
        targets,
        pava: pava.clone(),
        theta,
    }
}

impl Projections {
    pub fn risk_matrix(&self, q: f64, gradient: TauGradient) -> RiskMatrix {
        let columns: Vec<TargetLabel> = self.targets.iter().map(|t| t.label()).collect();
        let anchor = nonpar_bmd_dose(&self.pava, q);
        let cells = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, &spec)| {
                self.targets
                    .iter()
                    .enumerate()
                    .map(|(j, target)| {
                        let anchor = anchor.clone().map_err(|e| format!("empirical BMD: {e}"))?;
                        let theta = self.theta[i][j].as_ref().map_err(|e| e.to_string())?;
                        risk_at(&self.design, target, anchor, spec, theta, q, gradient).map_err(|e| e.to_string())
                    })
                    .collect()
            })
            .collect();
        RiskMatrix { q, rows: self.rows.clone(), columns, cells }
    }
}

pub fn build_risk_matrix(
    data: &QuantalDataset,
    fits: &[FittedModel],
    pava: &PavaFit,
    q: f64,
    options: &FocusedOptions,
) -> RiskMatrix {
    project_all(&Design::from_data(data), fits, pava, options.execution).risk_matrix(q, options.gradient)
}

/// Risk matrices for several BMR values; projections are computed once.
pub fn build_risk_matrices(
    data: &QuantalDataset,
    fits: &[FittedModel],
    pava: &PavaFit,
    qs: &[f64],
    options: &FocusedOptions,
) -> Vec<RiskMatrix> {
    let proj = project_all(&Design::from_data(data), fits, pava, options.execution);
    qs.iter().map(|&q| proj.risk_matrix(q, options.gradient)).collect()
}

/// The three focused selectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FicVariant {
    /// Global minimum over model-based targets; returns the estimator class.
    FE,
    /// Global minimum over model-based targets; returns the target class.
    FM,
    /// Minimum of the empirical column.
    EMP,
}

impl FicVariant {
    pub const ALL: [FicVariant; 3] = [FicVariant::FE, FicVariant::FM, FicVariant::EMP];

    pub fn estimator_label(self) -> &'static str {
        match self {
            FicVariant::FE => "FIC1",
            FicVariant::FM => "FIC2",
            FicVariant::EMP => "FIC3",
        }
    }
}

impl fmt::Display for FicVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.estimator_label())
    }
}

/// Model chosen by a focused selector. Failed cells count as `+inf`; ties
/// go to the canonical class order.
pub fn fic_select(matrix: &RiskMatrix, variant: FicVariant) -> Result<ModelSpec> {
    let finite = |v: f64| v.is_finite().then_some(v);
    let chosen = match variant {
        FicVariant::FE | FicVariant::FM => {
            let best = matrix
                .entries()
                .filter_map(|(r, c, v)| match c {
                    TargetLabel::Model(m) => finite(v).map(|v| (r, m, v)),
                    TargetLabel::Empirical => None,
                })
                .fold(None, |best: Option<(ModelSpec, ModelSpec, f64)>, cur| match best {
                    Some(b) if b.2 < cur.2 || (b.2 == cur.2 && tie_key(variant, &b) <= tie_key(variant, &cur)) => Some(b),
                    _ => Some(cur),
                });
            best.map(|(r, c, _)| if variant == FicVariant::FE { r } else { c })
        }
        FicVariant::EMP => argmin_canonical(
            matrix
                .rows
                .iter()
                .filter_map(|&r| finite(matrix.risk(r, TargetLabel::Empirical)).map(|v| (r, v))),
        ),
    };
    chosen.ok_or(BmdError::EmptyRiskMatrix)
}

fn tie_key(variant: FicVariant, e: &(ModelSpec, ModelSpec, f64)) -> (ModelSpec, ModelSpec) {
    match variant {
        FicVariant::FM => (e.1, e.0),
        _ => (e.0, e.1),
    }
}

/// BMD of the focused-selected class, evaluated at that class's MLE.
pub fn fic_bmd(fits: &[FittedModel], matrix: &RiskMatrix, variant: FicVariant, max_dose: f64) -> Result<BmdEstimate> {
    let spec = fic_select(matrix, variant)?;
    let fit = fits
        .iter()
        .find(|f| f.spec == spec && f.converged)
        .ok_or(BmdError::NoConvergedFits)?;
    Ok(BmdEstimate {
        estimator: variant.estimator_label().to_string(),
        q: matrix.q,
        dose: bmd_within(spec, &fit.beta_hat, matrix.q, max_dose)?,
        provenance: Provenance::Selected { model: spec },
    })
}
