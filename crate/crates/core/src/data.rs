//! Quantal dose-response datasets: per-dose triples of dose, subjects and events.
//!
//! Datasets are read from CSV with a `dose,n,y` header. Lines starting with
//! `#` are comments. Rows are sorted by dose on load.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{BmdError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantalDataset {
    doses: Vec<f64>,
    subjects: Vec<u64>,
    events: Vec<u64>,
    /// Original dose units per stored dose unit. 1.0 unless standardized.
    dose_scale: f64,
}

impl QuantalDataset {
    pub fn new(doses: Vec<f64>, subjects: Vec<u64>, events: Vec<u64>) -> Result<Self> {
        if doses.len() != subjects.len() || doses.len() != events.len() {
            return Err(BmdError::InvalidDataset(format!(
                "column lengths differ: {} doses, {} subject counts, {} event counts",
                doses.len(),
                subjects.len(),
                events.len()
            )));
        }
        if doses.len() < 2 {
            return Err(BmdError::InvalidDataset(
                "at least two dose groups are required".into(),
            ));
        }
        let mut rows: Vec<(f64, u64, u64)> = doses
            .into_iter()
            .zip(subjects)
            .zip(events)
            .map(|((d, n), y)| (d, n, y))
            .collect();
        for &(d, n, y) in &rows {
            if !d.is_finite() || d < 0.0 {
                return Err(BmdError::InvalidDataset(format!(
                    "dose must be finite and non-negative, got {d}"
                )));
            }
            if n == 0 {
                return Err(BmdError::InvalidDataset(format!(
                    "dose {d} has no subjects"
                )));
            }
            if y > n {
                return Err(BmdError::EventsExceedSubjects {
                    dose: d,
                    events: y,
                    subjects: n,
                });
            }
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(BmdError::DuplicateDose(w[0].0));
        }
        Ok(Self {
            doses: rows.iter().map(|r| r.0).collect(),
            subjects: rows.iter().map(|r| r.1).collect(),
            events: rows.iter().map(|r| r.2).collect(),
            dose_scale: 1.0,
        })
    }

    pub fn doses(&self) -> &[f64] {
        &self.doses
    }

    pub fn subjects(&self) -> &[u64] {
        &self.subjects
    }

    pub fn events(&self) -> &[u64] {
        &self.events
    }

    pub fn n_groups(&self) -> usize {
        self.doses.len()
    }

    pub fn n_total(&self) -> u64 {
        self.subjects.iter().sum()
    }

    pub fn max_dose(&self) -> f64 {
        *self.doses.last().expect("dataset has at least two groups")
    }

    /// Multiply a dose on the stored scale by this to get original units.
    pub fn dose_scale(&self) -> f64 {
        self.dose_scale
    }

    /// Whether the design contains a zero-dose control group.
    pub fn has_control(&self) -> bool {
        self.doses[0] == 0.0
    }

    pub fn subjects_f64(&self) -> Vec<f64> {
        self.subjects.iter().map(|&n| n as f64).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["dose", "n", "y"])?;
        for i in 0..self.doses.len() {
            wtr.write_record([
                format!("{}", self.doses[i] * self.dose_scale),
                self.subjects[i].to_string(),
                self.events[i].to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct Row {
    dose: String,
    n: String,
    y: String,
}

/// Parse a `dose,n,y` CSV stream into a validated dataset.
///
/// A design without a zero dose loads fine; callers can check
/// [`QuantalDataset::has_control`] and warn.
pub fn load_dataset<R: Read>(source: R) -> Result<QuantalDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = rdr.headers()?.clone();
    let expected = ["dose", "n", "y"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(BmdError::MalformedRow {
            line: 1,
            reason: format!("expected header `dose,n,y`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let (mut doses, mut subjects, mut events) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rdr.deserialize::<Row>() {
        let row = rec.map_err(|e| BmdError::MalformedRow {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = doses.len() + 2;
        let bad = |what: &str, v: &str| BmdError::MalformedRow {
            line,
            reason: format!("cannot parse {what} `{v}`"),
        };
        doses.push(row.dose.parse::<f64>().map_err(|_| bad("dose", &row.dose))?);
        subjects.push(row.n.parse::<u64>().map_err(|_| bad("n", &row.n))?);
        events.push(row.y.parse::<u64>().map_err(|_| bad("y", &row.y))?);
    }
    QuantalDataset::new(doses, subjects, events)
}

/// Rescale doses so the largest is 1. The scale factor is kept for reporting
/// in original units.
pub fn standardize_doses(data: &QuantalDataset) -> Result<QuantalDataset> {
    let max = data.max_dose();
    if max <= 0.0 {
        return Err(BmdError::AllDosesZero);
    }
    let mut out = data.clone();
    for d in &mut out.doses {
        *d /= max;
    }
    out.dose_scale = data.dose_scale * max;
    Ok(out)
}
