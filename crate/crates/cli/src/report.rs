//! Run reports and their table, JSON and CSV renderings.

use std::io::Write;
use std::path::Path;

use bmdsel::simulation::ExperimentSummary;
use bmdsel::{eval_pi, fic_select, Analysis, FicVariant, Provenance, QuantalDataset, RiskMatrix};
use serde::Serialize;

use crate::Format;

const CURVE_POINTS: usize = 201;
const FAILED: &str = "--";

#[derive(Serialize)]
pub struct DatasetSummary {
    pub path: String,
    pub groups: usize,
    pub subjects: u64,
    pub events: u64,
    pub standardized: bool,
    /// Original dose = analysis dose × dose_scale.
    pub dose_scale: f64,
}

#[derive(Serialize)]
pub struct FitRow {
    pub model: String,
    pub beta: Vec<f64>,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub converged: bool,
}

#[derive(Serialize)]
pub struct SelectionRow {
    pub selector: String,
    pub q: f64,
    pub model: Option<String>,
    pub error: Option<String>,
}

#[derive(Serialize)]
pub struct BmdRow {
    pub estimator: String,
    pub q: f64,
    pub bmd: Option<f64>,
    pub bmd_original: Option<f64>,
    pub provenance: Option<Provenance>,
    pub error: Option<String>,
}

#[derive(Serialize)]
pub struct RunReport {
    pub dataset: DatasetSummary,
    pub fits: Vec<FitRow>,
    pub selections: Vec<SelectionRow>,
    pub bmds: Vec<BmdRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub risk_matrices: Option<Vec<RiskMatrix>>,
}

impl RunReport {
    pub fn new(path: &Path, data: &QuantalDataset, standardized: bool, analysis: &Analysis, risk: bool) -> Self {
        let scale = data.dose_scale();
        let dataset = DatasetSummary {
            path: path.display().to_string(),
            groups: data.n_groups(),
            subjects: data.n_total(),
            events: data.events().iter().sum(),
            standardized,
            dose_scale: scale,
        };
        let fits = analysis
            .fits
            .iter()
            .map(|f| FitRow {
                model: f.spec.to_string(),
                beta: f.beta_hat.0.clone(),
                loglik: f.loglik,
                aic: f.aic,
                bic: f.bic,
                converged: f.converged,
            })
            .collect();
        let mut selections = vec![];
        let mut bmds = vec![];
        for b in &analysis.per_bmr {
            for (s, r) in &b.selections {
                selections.push(SelectionRow {
                    selector: s.to_string(),
                    q: b.q,
                    model: r.as_ref().ok().map(|m| m.to_string()),
                    error: r.as_ref().err().cloned(),
                });
            }
            for (e, r) in &b.estimates {
                bmds.push(match r {
                    Ok(x) => BmdRow {
                        estimator: e.to_string(),
                        q: b.q,
                        bmd: Some(x.dose),
                        bmd_original: Some(x.dose * scale),
                        provenance: Some(x.provenance.clone()),
                        error: None,
                    },
                    Err(msg) => BmdRow {
                        estimator: e.to_string(),
                        q: b.q,
                        bmd: None,
                        bmd_original: None,
                        provenance: None,
                        error: Some(msg.clone()),
                    },
                });
            }
        }
        let risk_matrices = risk.then(|| analysis.per_bmr.iter().filter_map(|b| b.risk_matrix.clone()).collect());
        Self { dataset, fits, selections, bmds, risk_matrices }
    }

    fn json(&self, out: &mut impl Write) -> anyhow::Result<()> {
        serde_json::to_writer_pretty(&mut *out, self)?;
        writeln!(out)?;
        Ok(())
    }

    pub fn write_fits(&self, out: &mut impl Write, format: Format) -> anyhow::Result<()> {
        match format {
            Format::Json => self.json(out),
            Format::Csv => {
                let mut w = csv::Writer::from_writer(out);
                w.write_record(["model", "beta", "loglik", "aic", "bic", "converged"])?;
                for f in &self.fits {
                    let beta: Vec<String> = f.beta.iter().map(|b| b.to_string()).collect();
                    w.write_record([
                        f.model.clone(),
                        beta.join(";"),
                        f.loglik.to_string(),
                        f.aic.to_string(),
                        f.bic.to_string(),
                        f.converged.to_string(),
                    ])?;
                }
                w.flush()?;
                Ok(())
            }
            Format::Table => {
                self.header(out)?;
                writeln!(out, "{:<6} {:>10} {:>10} {:>10}  beta", "model", "loglik", "AIC", "BIC")?;
                let best = |key: fn(&FitRow) -> f64| {
                    self.fits.iter().min_by(|a, b| key(a).total_cmp(&key(b))).map(|f| f.model.clone())
                };
                let (aic, bic) = (best(|f| f.aic), best(|f| f.bic));
                for f in &self.fits {
                    let beta: Vec<String> = f.beta.iter().map(|b| format!("{b:.6}")).collect();
                    let mut marks = String::new();
                    if aic.as_ref() == Some(&f.model) {
                        marks.push_str(" *AIC");
                    }
                    if bic.as_ref() == Some(&f.model) {
                        marks.push_str(" *BIC");
                    }
                    if !f.converged {
                        marks.push_str(" (not converged)");
                    }
                    writeln!(
                        out,
                        "{:<6} {:>10.4} {:>10.4} {:>10.4}  [{}]{marks}",
                        f.model,
                        f.loglik,
                        f.aic,
                        f.bic,
                        beta.join(", ")
                    )?;
                }
                Ok(())
            }
        }
    }

    pub fn write_selections(&self, out: &mut impl Write, format: Format) -> anyhow::Result<()> {
        match format {
            Format::Json => self.json(out),
            Format::Csv => {
                let mut w = csv::Writer::from_writer(out);
                w.write_record(["selector", "q", "model", "error"])?;
                for s in &self.selections {
                    w.write_record([
                        s.selector.clone(),
                        s.q.to_string(),
                        s.model.clone().unwrap_or_default(),
                        s.error.clone().unwrap_or_default(),
                    ])?;
                }
                w.flush()?;
                Ok(())
            }
            Format::Table => {
                self.header(out)?;
                let qs = self.qs();
                write!(out, "{:<9}", "selector")?;
                for q in &qs {
                    write!(out, " {:>8}", format!("q={q}"))?;
                }
                writeln!(out)?;
                let mut names: Vec<&str> = vec![];
                for s in &self.selections {
                    if !names.contains(&s.selector.as_str()) {
                        names.push(&s.selector);
                    }
                }
                for name in names {
                    write!(out, "{name:<9}")?;
                    for q in &qs {
                        let cell = self
                            .selections
                            .iter()
                            .find(|s| s.selector == name && s.q == *q)
                            .and_then(|s| s.model.clone())
                            .unwrap_or_else(|| FAILED.into());
                        write!(out, " {cell:>8}")?;
                    }
                    writeln!(out)?;
                }
                self.failures(out, self.selections.iter().filter_map(|s| s.error.as_ref().map(|e| (&s.selector, s.q, e))))
            }
        }
    }

    pub fn write_bmds(&self, out: &mut impl Write, format: Format) -> anyhow::Result<()> {
        match format {
            Format::Json => self.json(out),
            Format::Csv => {
                let mut w = csv::Writer::from_writer(out);
                w.write_record(["estimator", "q", "bmd", "bmd_original", "source", "error"])?;
                for b in &self.bmds {
                    w.write_record([
                        b.estimator.clone(),
                        b.q.to_string(),
                        b.bmd.map(|x| x.to_string()).unwrap_or_default(),
                        b.bmd_original.map(|x| x.to_string()).unwrap_or_default(),
                        b.provenance.as_ref().map(source).unwrap_or_default(),
                        b.error.clone().unwrap_or_default(),
                    ])?;
                }
                w.flush()?;
                Ok(())
            }
            Format::Table => {
                self.header(out)?;
                writeln!(out, "{:<10} {:>6} {:>10} {:>12}  source", "estimator", "q", "bmd", "original")?;
                for b in &self.bmds {
                    let (d, o) = match (b.bmd, b.bmd_original) {
                        (Some(d), Some(o)) => (format!("{d:.4}"), format!("{o:.4}")),
                        _ => (FAILED.into(), FAILED.into()),
                    };
                    let src = b.provenance.as_ref().map(source).unwrap_or_default();
                    writeln!(out, "{:<10} {:>6} {d:>10} {o:>12}  {src}", b.estimator, b.q)?;
                }
                self.failures(out, self.bmds.iter().filter_map(|b| b.error.as_ref().map(|e| (&b.estimator, b.q, e))))
            }
        }
    }

    pub fn write_risk_matrices(&self, out: &mut impl Write, format: Format) -> anyhow::Result<()> {
        let matrices = self.risk_matrices.as_deref().unwrap_or_default();
        match format {
            Format::Json => self.json(out),
            Format::Csv => {
                let mut w = csv::Writer::from_writer(out);
                w.write_record(["q", "estimator_class", "target", "gamma", "bias_term", "risk", "projected_bmd", "error"])?;
                for m in matrices {
                    for (i, row) in m.cells.iter().enumerate() {
                        for (j, cell) in row.iter().enumerate() {
                            let mut rec = vec![m.q.to_string(), m.rows[i].to_string(), m.columns[j].to_string()];
                            match cell {
                                Ok(c) => rec.extend([
                                    c.gamma.to_string(),
                                    c.bias_term.to_string(),
                                    c.risk.to_string(),
                                    c.projected_bmd.to_string(),
                                    String::new(),
                                ]),
                                Err(e) => {
                                    rec.extend(std::iter::repeat_n(String::new(), 4));
                                    rec.push(e.clone());
                                }
                            }
                            w.write_record(&rec)?;
                        }
                    }
                }
                w.flush()?;
                Ok(())
            }
            Format::Table => {
                self.header(out)?;
                for m in matrices {
                    writeln!(out, "\nq = {}  (rows: estimator class, columns: target)", m.q)?;
                    write!(out, "{:<6}", "")?;
                    for c in &m.columns {
                        write!(out, " {:>12}", c.to_string())?;
                    }
                    writeln!(out)?;
                    for (spec, row) in m.rows.iter().zip(&m.cells) {
                        write!(out, "{:<6}", spec.to_string())?;
                        for cell in row {
                            match cell {
                                Ok(c) => write!(out, " {:>12.6}", c.risk)?,
                                Err(_) => write!(out, " {FAILED:>12}")?,
                            }
                        }
                        writeln!(out)?;
                    }
                    let picks: Vec<String> = FicVariant::ALL
                        .iter()
                        .map(|&v| {
                            let pick = fic_select(m, v).map(|s| s.to_string()).unwrap_or_else(|_| FAILED.into());
                            format!("{} -> {pick}", v.estimator_label())
                        })
                        .collect();
                    writeln!(out, "{}", picks.join(", "))?;
                }
                Ok(())
            }
        }
    }

    fn qs(&self) -> Vec<f64> {
        let mut qs: Vec<f64> = vec![];
        for q in self.selections.iter().map(|s| s.q).chain(self.bmds.iter().map(|b| b.q)) {
            if !qs.contains(&q) {
                qs.push(q);
            }
        }
        qs
    }

    fn header(&self, out: &mut impl Write) -> anyhow::Result<()> {
        let d = &self.dataset;
        writeln!(out, "{}: {} groups, {} subjects, {} events", d.path, d.groups, d.subjects, d.events)?;
        if d.standardized {
            writeln!(out, "doses standardized; original = standardized x {}", d.dose_scale)?;
        }
        Ok(())
    }

    fn failures<'a>(
        &self,
        out: &mut impl Write,
        rows: impl Iterator<Item = (&'a String, f64, &'a String)>,
    ) -> anyhow::Result<()> {
        for (name, q, err) in rows {
            writeln!(out, "{FAILED} {name} q={q}: {err}")?;
        }
        Ok(())
    }
}

fn source(p: &Provenance) -> String {
    match p {
        Provenance::Selected { model } => model.to_string(),
        Provenance::Averaged { weights } => {
            let parts: Vec<String> = weights.iter().map(|(s, w)| format!("{s} {w:.3}")).collect();
            format!("average({})", parts.join(", "))
        }
        Provenance::Nonparametric => "PAVA".into(),
    }
}

/// Long-format `series,x,y` with doses in original units: fitted curves on a
/// grid, the PAVA polyline and the observed proportions.
pub fn write_curves(out: impl Write, data: &QuantalDataset, analysis: &Analysis) -> anyhow::Result<()> {
    let scale = data.dose_scale();
    let max = data.max_dose();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["series", "x", "y"])?;
    for f in analysis.fits.iter().filter(|f| f.converged) {
        let name = f.spec.to_string();
        for i in 0..CURVE_POINTS {
            let d = max * i as f64 / (CURVE_POINTS - 1) as f64;
            w.write_record([name.clone(), (d * scale).to_string(), eval_pi(f.spec, &f.beta_hat, d).to_string()])?;
        }
    }
    for (d, p) in analysis.pava.knots.iter().zip(&analysis.pava.probs) {
        w.write_record(["PAVA".to_string(), (d * scale).to_string(), p.to_string()])?;
    }
    for ((d, &n), &y) in data.doses().iter().zip(data.subjects()).zip(data.events()) {
        w.write_record(["observed".to_string(), (d * scale).to_string(), (y as f64 / n as f64).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary(out: &mut impl Write, s: &ExperimentSummary, format: Format) -> anyhow::Result<()> {
    match format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut *out, s)?;
            writeln!(out)?;
        }
        Format::Csv => s.write_estimators_csv(&mut *out)?,
        Format::Table => {
            writeln!(out, "{}: {} replicates, seed {}", s.config.name, s.config.mreps, s.config.seed)?;
            for (q, t) in &s.true_bmds {
                writeln!(out, "true BMD at q={q}: {t:.4}")?;
            }
            writeln!(
                out,
                "\n{:<10} {:>6} {:>8} {:>9} {:>8} {:>8} {:>6}",
                "estimator", "q", "mean", "bias", "se", "rmse", "fail"
            )?;
            for e in &s.estimators {
                writeln!(
                    out,
                    "{:<10} {:>6} {:>8.4} {:>+9.4} {:>8.4} {:>8.4} {:>6}",
                    e.estimator.to_string(),
                    e.q,
                    e.mean,
                    e.bias,
                    e.se,
                    e.rmse,
                    e.failures
                )?;
            }
            let models: Vec<_> = s.config.models.clone();
            write!(out, "\n{:<9} {:>6}", "selector", "q")?;
            for m in &models {
                write!(out, " {:>7}", m.to_string())?;
            }
            writeln!(out, " {:>7}", "fail")?;
            for sel in &s.selections {
                write!(out, "{:<9} {:>6}", sel.selector.to_string(), sel.q)?;
                for m in &models {
                    write!(out, " {:>7.2}", sel.percentages.get(m).copied().unwrap_or(0.0))?;
                }
                writeln!(out, " {:>7.2}", sel.failure_percentage)?;
            }
        }
    }
    Ok(())
}
