//! Monte-Carlo experiments: simulate quantal data from a known curve, run
//! every selector and estimator on each replicate, and summarize against the
//! true BMD.
//!
//! Replicate `r` draws dose `j` from a ChaCha stream keyed on `(seed, r)`
//! with stream id `j`, so results do not depend on execution order. Per-
//! replicate results are gathered in replicate order and aggregated
//! sequentially with compensated sums.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::analysis::{analyze, AnalysisOptions, Estimator, Selector};
use crate::data::QuantalDataset;
use crate::error::{BmdError, Result};
use crate::focused::{FocusedOptions, TauGradient};
use crate::models::{bmd_within, dose_basis, eval_pi, Family, ModelSpec, ParamVector};
use crate::nonparametric::{nonpar_bmd_dose, PavaFit};
use crate::par::Execution;

/// Four-dose design `(0, 0.25, 0.5, 1)`.
pub const DESIGN_J4: [f64; 4] = [0.0, 0.25, 0.5, 1.0];
/// Eight-dose design with geometric spacing toward zero.
pub const DESIGN_J8: [f64; 8] = [0.0, 0.00625, 0.03125, 0.0625, 0.125, 0.25, 0.5, 1.0];
/// Standardized doses of the BCME study.
pub const BCME_DOSES: [f64; 7] = [0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0];
/// Per-dose subjects of the BCME study, used for Experiment 1.
pub const BCME_SUBJECTS: [u64; 7] = [240, 41, 26, 18, 18, 34, 20];

/// Coefficients solving `pi(d_i; beta) = p_i` for `order + 1` constraints,
/// via the family's link: logit for logistic, `-ln(1 - p)` for multistage.
pub fn solve_curve_constraints(family: Family, order: usize, constraints: &[(f64, f64)]) -> Result<ParamVector> {
    let spec = ModelSpec::new(family, order).map_err(|e| BmdError::InvalidConstraints(e.to_string()))?;
    if constraints.len() != order + 1 {
        return Err(BmdError::InvalidConstraints(format!(
            "{} constraints given, {} needed for order {order}",
            constraints.len(),
            order + 1
        )));
    }
    let mut sorted = constraints.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    if sorted.iter().any(|&(_, p)| !(p > 0.0 && p < 1.0)) {
        return Err(BmdError::InvalidConstraints("probabilities must lie in (0, 1)".into()));
    }
    if sorted.windows(2).any(|w| w[1].1 <= w[0].1) {
        return Err(BmdError::InvalidConstraints("probabilities must increase with dose".into()));
    }
    let k = order + 1;
    let x = nalgebra::DMatrix::from_fn(k, k, |i, j| dose_basis(sorted[i].0, order)[j]);
    let z = nalgebra::DVector::from_iterator(
        k,
        sorted.iter().map(|&(_, p)| match family {
            Family::Logistic => (p / (1.0 - p)).ln(),
            Family::Multistage => -(-p).ln_1p(),
        }),
    );
    let beta = x
        .lu()
        .solve(&z)
        .filter(|b| b.iter().all(|v| v.is_finite()))
        .ok_or_else(|| BmdError::InvalidConstraints("singular constraint system".into()))?;
    let beta = ParamVector(beta.iter().copied().collect());
    if family == Family::Multistage {
        let doses: Vec<f64> = sorted.iter().map(|c| c.0).collect();
        beta.validate(spec, &doses, 1e-12)
            .map_err(|e| BmdError::InvalidConstraints(e.to_string()))?;
    }
    Ok(beta)
}

/// How the true curve is specified in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveConfig {
    /// Model label such as `MS2`; omitted when `probs` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    /// `[[dose, probability], ...]`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<Vec<(f64, f64)>>,
    /// Probabilities at the design doses, interpolated linearly in between.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
}

/// The resolved generating curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrueCurve {
    Model { spec: ModelSpec, beta: ParamVector },
    Probabilities(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SubjectsConfig {
    PerDose(u64),
    List(Vec<u64>),
}

/// Declarative description of one simulation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub doses: Vec<f64>,
    pub subjects: SubjectsConfig,
    pub curve: CurveConfig,
    #[serde(default = "default_bmrs")]
    pub bmrs: Vec<f64>,
    #[serde(default = "default_mreps")]
    pub mreps: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_models")]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub gradient: TauGradient,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_bmrs() -> Vec<f64> {
    vec![0.01, 0.05, 0.10]
}
fn default_mreps() -> usize {
    2000
}
fn default_seed() -> u64 {
    20_240_101
}
fn default_models() -> Vec<ModelSpec> {
    ModelSpec::STANDARD.to_vec()
}

/// Dose design for the additional experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PresetDesign {
    J4,
    J8,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| BmdError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| BmdError::InvalidConfig(e.to_string()))
    }

    /// Experiment presets `expt1` to `expt9`. `design` and `n` apply to
    /// experiments 2 to 9 (defaults J4 and 100); experiment 1 always uses
    /// the BCME design.
    pub fn preset(name: &str, design: Option<PresetDesign>, n: Option<u64>) -> Result<Self> {
        let number: u32 = name
            .trim()
            .to_ascii_lowercase()
            .strip_prefix("expt")
            .and_then(|s| s.parse().ok())
            .filter(|k| (1..=9).contains(k))
            .ok_or_else(|| BmdError::InvalidConfig(format!("unknown preset `{name}`")))?;
        let base = ExperimentConfig {
            name: format!("expt{number}"),
            doses: vec![],
            subjects: SubjectsConfig::PerDose(n.unwrap_or(100)),
            curve: CurveConfig { model: None, beta: None, constraints: None, probs: None },
            bmrs: default_bmrs(),
            mreps: default_mreps(),
            seed: default_seed(),
            models: default_models(),
            gradient: TauGradient::default(),
        };
        if number == 1 {
            return Ok(ExperimentConfig {
                doses: BCME_DOSES.to_vec(),
                subjects: SubjectsConfig::List(BCME_SUBJECTS.to_vec()),
                curve: CurveConfig { model: Some(ModelSpec::MS2), beta: Some(vec![0.0, 0.32, 0.52]), ..base.curve },
                ..base
            });
        }
        let (low, mid, high) = if number <= 5 { (0.05, 0.30, 0.50) } else { (0.30, 0.52, 0.75) };
        let spec = match (number - 2) % 4 {
            0 => ModelSpec::LG1,
            1 => ModelSpec::LG2,
            2 => ModelSpec::MS1,
            _ => ModelSpec::MS2,
        };
        let constraints = if spec.order == 1 {
            vec![(0.0, low), (1.0, high)]
        } else {
            vec![(0.0, low), (0.5, mid), (1.0, high)]
        };
        let doses = match design.unwrap_or(PresetDesign::J4) {
            PresetDesign::J4 => DESIGN_J4.to_vec(),
            PresetDesign::J8 => DESIGN_J8.to_vec(),
        };
        Ok(ExperimentConfig {
            doses,
            curve: CurveConfig { model: Some(spec), constraints: Some(constraints), ..base.curve },
            ..base
        })
    }

    pub fn subjects(&self) -> Vec<u64> {
        match &self.subjects {
            SubjectsConfig::PerDose(n) => vec![*n; self.doses.len()],
            SubjectsConfig::List(v) => v.clone(),
        }
    }

    pub fn true_curve(&self) -> Result<TrueCurve> {
        let c = &self.curve;
        let given = [c.beta.is_some(), c.constraints.is_some(), c.probs.is_some()]
            .iter()
            .filter(|&&b| b)
            .count();
        if given != 1 {
            return Err(BmdError::InvalidConfig(
                "curve needs exactly one of `beta`, `constraints` or `probs`".into(),
            ));
        }
        if let Some(p) = &c.probs {
            if p.len() != self.doses.len() {
                return Err(BmdError::InvalidConfig("`probs` must have one entry per dose".into()));
            }
            if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(BmdError::InvalidConfig("`probs` must lie in [0, 1]".into()));
            }
            return Ok(TrueCurve::Probabilities(p.clone()));
        }
        let spec = c
            .model
            .ok_or_else(|| BmdError::InvalidConfig("curve `model` is required with `beta` or `constraints`".into()))?;
        let beta = match (&c.beta, &c.constraints) {
            (Some(b), _) => ParamVector(b.clone()),
            (_, Some(cons)) => solve_curve_constraints(spec.family, spec.order, cons)?,
            _ => unreachable!(),
        };
        beta.validate(spec, &self.doses, 1e-12)
            .map_err(|e| BmdError::InvalidConfig(e.to_string()))?;
        Ok(TrueCurve::Model { spec, beta })
    }

    pub fn validate(&self) -> Result<()> {
        if self.mreps == 0 {
            return Err(BmdError::InvalidConfig("mreps must be at least 1".into()));
        }
        if let Some(q) = self.bmrs.iter().find(|&&q| !(q > 0.0 && q < 1.0)) {
            return Err(BmdError::InvalidConfig(format!("BMR {q} outside (0, 1)")));
        }
        if self.models.is_empty() {
            return Err(BmdError::InvalidConfig("at least one model is required".into()));
        }
        let subjects = self.subjects();
        if subjects.len() != self.doses.len() {
            return Err(BmdError::InvalidConfig("`subjects` must have one entry per dose".into()));
        }
        QuantalDataset::new(self.doses.clone(), subjects.clone(), vec![0; subjects.len()])
            .map_err(|e| BmdError::InvalidConfig(e.to_string()))?;
        let curve = self.true_curve()?;
        let probs = self.true_probs(&curve);
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(BmdError::InvalidConfig("true curve leaves [0, 1] at a design dose".into()));
        }
        if probs.windows(2).any(|w| w[1] < w[0]) {
            return Err(BmdError::InvalidConfig("true probabilities must not decrease with dose".into()));
        }
        for &q in &self.bmrs {
            self.true_bmd(&curve, q)
                .map_err(|e| BmdError::InvalidConfig(format!("no true BMD at q = {q}: {e}")))?;
        }
        Ok(())
    }

    fn sorted_doses(&self) -> Vec<f64> {
        let mut d = self.doses.clone();
        d.sort_by(f64::total_cmp);
        d
    }

    fn max_dose(&self) -> f64 {
        self.doses.iter().copied().fold(0.0, f64::max)
    }

    /// True probabilities at the doses in increasing order.
    pub fn true_probs(&self, curve: &TrueCurve) -> Vec<f64> {
        match curve {
            TrueCurve::Model { spec, beta } => self.sorted_doses().iter().map(|&d| eval_pi(*spec, beta, d)).collect(),
            TrueCurve::Probabilities(p) => {
                let mut pairs: Vec<(f64, f64)> = self.doses.iter().copied().zip(p.iter().copied()).collect();
                pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
                pairs.into_iter().map(|x| x.1).collect()
            }
        }
    }

    /// True BMD at `q`. A probability-vector curve is interpolated linearly
    /// between doses.
    pub fn true_bmd(&self, curve: &TrueCurve, q: f64) -> Result<f64> {
        match curve {
            TrueCurve::Model { spec, beta } => bmd_within(*spec, beta, q, self.max_dose()),
            TrueCurve::Probabilities(_) => {
                let mut s: Vec<(f64, u64)> = self.doses.iter().copied().zip(self.subjects()).collect();
                s.sort_by(|a, b| a.0.total_cmp(&b.0));
                let fit = PavaFit {
                    knots: s.iter().map(|x| x.0).collect(),
                    probs: self.true_probs(curve),
                    weights: s.iter().map(|x| x.1 as f64).collect(),
                };
                nonpar_bmd_dose(&fit, q)
            }
        }
    }
}

/// Draw replicate `replicate` of the experiment.
pub fn generate_replicate(config: &ExperimentConfig, replicate: u64) -> Result<QuantalDataset> {
    let curve = config.true_curve()?;
    Ok(draw(config, &config.true_probs(&curve), replicate))
}

fn replicate_rng(seed: u64, replicate: u64, dose_index: usize) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&replicate.to_le_bytes());
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream(dose_index as u64);
    rng
}

fn draw(config: &ExperimentConfig, probs: &[f64], replicate: u64) -> QuantalDataset {
    let doses = config.sorted_doses();
    let mut pairs: Vec<(f64, u64)> = config.doses.iter().copied().zip(config.subjects()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let subjects: Vec<u64> = pairs.iter().map(|x| x.1).collect();
    let events = subjects
        .iter()
        .zip(probs)
        .enumerate()
        .map(|(j, (&n, &p))| {
            let mut rng = replicate_rng(config.seed, replicate, j);
            Binomial::new(n, p.clamp(0.0, 1.0)).expect("valid binomial").sample(&mut rng)
        })
        .collect();
    QuantalDataset::new(doses, subjects, events).expect("simulated data are valid")
}

/// Per-replicate outcome: estimates and selections at each BMR, in config
/// order. `None` marks a failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: u64,
    /// `estimates[bmr index][estimator index]` following [`Estimator::ALL`].
    pub estimates: Vec<Vec<Option<f64>>>,
    /// `selections[bmr index][selector index]` following [`Selector::ALL`].
    pub selections: Vec<Vec<Option<ModelSpec>>>,
}

fn run_replicate(config: &ExperimentConfig, probs: &[f64], replicate: u64) -> ReplicateRecord {
    let data = draw(config, probs, replicate);
    let options = AnalysisOptions {
        models: config.models.clone(),
        bmrs: config.bmrs.clone(),
        estimators: Estimator::ALL.to_vec(),
        selectors: Selector::ALL.to_vec(),
        focused: FocusedOptions { gradient: config.gradient, execution: Execution::Sequential },
    };
    let nq = config.bmrs.len();
    match analyze(&data, &options) {
        Ok(a) => ReplicateRecord {
            replicate,
            estimates: a
                .per_bmr
                .iter()
                .map(|b| b.estimates.iter().map(|(_, r)| r.as_ref().ok().map(|e| e.dose)).collect())
                .collect(),
            selections: a
                .per_bmr
                .iter()
                .map(|b| b.selections.iter().map(|(_, r)| r.as_ref().ok().copied()).collect())
                .collect(),
        },
        Err(_) => ReplicateRecord {
            replicate,
            estimates: vec![vec![None; Estimator::ALL.len()]; nq],
            selections: vec![vec![None; Selector::ALL.len()]; nq],
        },
    }
}

/// Run every replicate and return the raw records in replicate order.
pub fn run_replicates(config: &ExperimentConfig, execution: Execution) -> Result<Vec<ReplicateRecord>> {
    config.validate()?;
    let curve = config.true_curve()?;
    let probs = config.true_probs(&curve);
    let ids: Vec<u64> = (0..config.mreps as u64).collect();
    Ok(execution.map(ids, |r| run_replicate(config, &probs, r)))
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub q: f64,
    pub true_bmd: f64,
    /// Replicates with a usable estimate.
    pub n: usize,
    pub failures: usize,
    pub mean: f64,
    pub bias: f64,
    /// Population standard deviation of the estimates.
    pub se: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub selector: Selector,
    pub q: f64,
    /// Percentage of all replicates choosing each class.
    pub percentages: BTreeMap<ModelSpec, f64>,
    pub failure_percentage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: ExperimentConfig,
    pub true_bmds: Vec<(f64, f64)>,
    pub estimators: Vec<EstimatorSummary>,
    pub selections: Vec<SelectionSummary>,
}

impl ExperimentSummary {
    pub fn estimator(&self, e: Estimator, q: f64) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.estimator == e && s.q == q)
    }

    pub fn selection(&self, s: Selector, q: f64) -> Option<&SelectionSummary> {
        self.selections.iter().find(|x| x.selector == s && x.q == q)
    }

    /// `estimator,q,true_bmd,n,failures,mean,bias,se,rmse`
    pub fn write_estimators_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["estimator", "q", "true_bmd", "n", "failures", "mean", "bias", "se", "rmse"])?;
        for s in &self.estimators {
            wtr.write_record([
                s.estimator.label().to_string(),
                s.q.to_string(),
                s.true_bmd.to_string(),
                s.n.to_string(),
                s.failures.to_string(),
                s.mean.to_string(),
                s.bias.to_string(),
                s.se.to_string(),
                s.rmse.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// One block of rows per selector: `selector,q,<model>...,failed`.
    pub fn write_selections_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["selector".to_string(), "q".to_string()];
        header.extend(self.config.models.iter().map(|m| m.to_string()));
        header.push("failed".into());
        wtr.write_record(&header)?;
        for sel in Selector::ALL {
            for s in self.selections.iter().filter(|s| s.selector == sel) {
                let mut rec = vec![sel.label().to_string(), s.q.to_string()];
                rec.extend(self.config.models.iter().map(|m| s.percentages.get(m).copied().unwrap_or(0.0).to_string()));
                rec.push(s.failure_percentage.to_string());
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Write `estimators.csv`, `selections.csv` and `summary.json` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_estimators_csv(std::fs::File::create(dir.join("estimators.csv"))?)?;
        self.write_selections_csv(std::fs::File::create(dir.join("selections.csv"))?)?;
        let json = serde_json::to_string_pretty(self).map_err(|e| BmdError::Io(e.to_string()))?;
        std::fs::write(dir.join("summary.json"), json)?;
        Ok(())
    }
}

/// Aggregate records against the true BMDs.
pub fn summarize(config: &ExperimentConfig, records: &[ReplicateRecord]) -> Result<ExperimentSummary> {
    let curve = config.true_curve()?;
    let true_bmds: Vec<(f64, f64)> = config
        .bmrs
        .iter()
        .map(|&q| config.true_bmd(&curve, q).map(|b| (q, b)))
        .collect::<Result<_>>()
        .map_err(|e| BmdError::InvalidConfig(format!("true BMD: {e}")))?;
    let total = records.len() as f64;

    let mut estimators = Vec::new();
    let mut selections = Vec::new();
    for (qi, &(q, truth)) in true_bmds.iter().enumerate() {
        for (ei, &estimator) in Estimator::ALL.iter().enumerate() {
            let values: Vec<f64> = records.iter().filter_map(|r| r.estimates[qi][ei]).collect();
            let n = values.len();
            let (mut s, mut dev, mut err) = (CompensatedSum::default(), CompensatedSum::default(), CompensatedSum::default());
            for &v in &values {
                s.add(v);
            }
            let mean = if n > 0 { s.value() / n as f64 } else { f64::NAN };
            for &v in &values {
                dev.add((v - mean) * (v - mean));
                err.add((v - truth) * (v - truth));
            }
            let nf = n as f64;
            estimators.push(EstimatorSummary {
                estimator,
                q,
                true_bmd: truth,
                n,
                failures: records.len() - n,
                mean,
                bias: mean - truth,
                se: if n > 0 { (dev.value() / nf).sqrt() } else { f64::NAN },
                rmse: if n > 0 { (err.value() / nf).sqrt() } else { f64::NAN },
            });
        }
        for (si, &selector) in Selector::ALL.iter().enumerate() {
            let mut counts: BTreeMap<ModelSpec, usize> = config.models.iter().map(|&m| (m, 0)).collect();
            let mut failed = 0;
            for r in records {
                match r.selections[qi][si] {
                    Some(m) => *counts.entry(m).or_insert(0) += 1,
                    None => failed += 1,
                }
            }
            selections.push(SelectionSummary {
                selector,
                q,
                percentages: counts.into_iter().map(|(m, c)| (m, 100.0 * c as f64 / total)).collect(),
                failure_percentage: 100.0 * failed as f64 / total,
            });
        }
    }
    Ok(ExperimentSummary { config: config.clone(), true_bmds, estimators, selections })
}

pub fn run_experiment(config: &ExperimentConfig, execution: Execution) -> Result<ExperimentSummary> {
    let records = run_replicates(config, execution)?;
    summarize(config, &records)
}

/// Long-format `estimator,q,replicate,bmd` rows for box plots.
pub fn write_replicate_csv<W: Write>(config: &ExperimentConfig, records: &[ReplicateRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["estimator", "q", "replicate", "bmd"])?;
    for r in records {
        for (qi, &q) in config.bmrs.iter().enumerate() {
            for (ei, e) in Estimator::ALL.iter().enumerate() {
                if let Some(v) = r.estimates[qi][ei] {
                    wtr.write_record([e.label().to_string(), q.to_string(), r.replicate.to_string(), v.to_string()])?;
                }
            }
        }
    }
    wtr.flush()?;
    Ok(())
}
