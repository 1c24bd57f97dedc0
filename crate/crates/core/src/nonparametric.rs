//! Isotonic (PAVA) smoothing of observed proportions and the nonparametric
//! BMD read off the piecewise-linear interpolant.

use serde::{Deserialize, Serialize};

use crate::data::QuantalDataset;
use crate::error::{BmdError, Result};
use crate::models::{BmdEstimate, Provenance};

/// Observed proportions `Y_j / N_j`.
pub fn empirical_probs(data: &QuantalDataset) -> Vec<f64> {
    data.events()
        .iter()
        .zip(data.subjects())
        .map(|(&y, &n)| y as f64 / n as f64)
        .collect()
}

/// Weighted isotonic (non-decreasing) regression by pooling adjacent
/// violators.
///
/// # Panics
/// If the lengths differ.
pub fn pava(values: &[f64], weights: &[f64]) -> Vec<f64> {
    assert_eq!(values.len(), weights.len(), "values and weights must have equal length");
    // (mean, weight, count)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let (m2, w2, c2) = blocks[blocks.len() - 1];
            let (m1, w1, c1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            let w = w1 + w2;
            blocks.push(((m1 * w1 + m2 * w2) / w, w, c1 + c2));
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, _, c)| std::iter::repeat_n(m, c))
        .collect()
}

/// Isotonic dose-response estimate with its design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PavaFit {
    pub knots: Vec<f64>,
    pub probs: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PavaFit {
    pub fn from_data(data: &QuantalDataset) -> Self {
        let weights = data.subjects_f64();
        let probs = pava(&empirical_probs(data), &weights);
        Self {
            knots: data.doses().to_vec(),
            probs,
            weights,
        }
    }

    /// Background probability: the isotonic value at the lowest dose.
    pub fn background(&self) -> f64 {
        self.probs[0]
    }
}

/// Linear interpolation of the isotonic probabilities between knots.
pub fn piecewise_pi(fit: &PavaFit, d: f64) -> Result<f64> {
    let (lo, hi) = (fit.knots[0], *fit.knots.last().unwrap());
    if !(d >= lo && d <= hi) {
        return Err(BmdError::OutsideDesignRange { dose: d, lo, hi });
    }
    let j = fit.knots.partition_point(|&k| k <= d);
    if j == 0 {
        return Ok(fit.probs[0]);
    }
    if j == fit.knots.len() || fit.knots[j - 1] == d {
        return Ok(fit.probs[j - 1]);
    }
    let (d0, d1) = (fit.knots[j - 1], fit.knots[j]);
    let (p0, p1) = (fit.probs[j - 1], fit.probs[j]);
    Ok(p0 + (p1 - p0) * (d - d0) / (d1 - d0))
}

/// Smallest dose where the piecewise-linear extra risk reaches `q`.
pub fn nonpar_bmd_dose(fit: &PavaFit, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(BmdError::InvalidBmr(q));
    }
    let p0 = fit.background();
    if p0 >= 1.0 {
        return Err(BmdError::BackgroundCertain);
    }
    let target = p0 + q * (1.0 - p0);
    let j = fit
        .probs
        .iter()
        .position(|&p| p >= target)
        .ok_or(BmdError::BmrUnattainable { q, max_dose: *fit.knots.last().unwrap() })?;
    let (d0, d1) = (fit.knots[j - 1], fit.knots[j]);
    let (a, b) = (fit.probs[j - 1], fit.probs[j]);
    Ok(d0 + (target - a) / (b - a) * (d1 - d0))
}

pub fn nonpar_bmd(fit: &PavaFit, q: f64) -> Result<BmdEstimate> {
    Ok(BmdEstimate {
        estimator: "NONPAR".into(),
        q,
        dose: nonpar_bmd_dose(fit, q)?,
        provenance: Provenance::Nonparametric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bcme_fit() -> PavaFit {
        let data = QuantalDataset::new(
            vec![0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0],
            vec![240, 41, 26, 18, 18, 34, 20],
            vec![0, 1, 3, 4, 4, 15, 12],
        )
        .unwrap();
        PavaFit::from_data(&data)
    }

    #[test]
    fn empirical_probs_printed_table() {
        let data = QuantalDataset::new(
            vec![0.0, 10.0, 20.0, 40.0, 60.0, 80.0, 100.0],
            vec![240, 41, 46, 18, 18, 34, 20],
            vec![0, 1, 3, 4, 4, 15, 12],
        )
        .unwrap();
        let want = [0.0, 0.0244, 0.0652, 0.2222, 0.2222, 0.4412, 0.6000];
        for (p, w) in empirical_probs(&data).iter().zip(want) {
            assert!((p - w).abs() < 5e-5, "{p} vs {w}");
        }
    }

    #[test]
    fn empirical_probs_extremes() {
        let all = QuantalDataset::new(vec![0.0, 1.0], vec![4, 6], vec![4, 6]).unwrap();
        assert_eq!(empirical_probs(&all), vec![1.0, 1.0]);
        let none = QuantalDataset::new(vec![0.0, 1.0], vec![4, 6], vec![0, 0]).unwrap();
        assert_eq!(empirical_probs(&none), vec![0.0, 0.0]);
    }

    #[test]
    fn pava_pools_one_pair() {
        let r = pava(&[0.1, 0.05, 0.2], &[1.0, 1.0, 1.0]);
        assert_relative_eq!(r[0], 0.075, epsilon = 1e-15);
        assert_relative_eq!(r[1], 0.075, epsilon = 1e-15);
        assert_eq!(r[2], 0.2);
    }

    #[test]
    fn pava_weighted_cascade() {
        // pooling the last pair creates a new violation with the first value
        let r = pava(&[0.5, 0.6, 0.1], &[1.0, 1.0, 2.0]);
        let m = (0.5 + 0.6 + 0.2) / 4.0;
        for v in r {
            assert_relative_eq!(v, m, epsilon = 1e-15);
        }
    }

    #[test]
    fn bcme_is_already_monotone() {
        let fit = bcme_fit();
        let data = QuantalDataset::new(
            fit.knots.clone(),
            vec![240, 41, 26, 18, 18, 34, 20],
            vec![0, 1, 3, 4, 4, 15, 12],
        )
        .unwrap();
        assert_eq!(fit.probs, empirical_probs(&data));
    }

    #[test]
    fn piecewise_interpolation() {
        let fit = bcme_fit();
        assert_eq!(piecewise_pi(&fit, 0.4).unwrap(), fit.probs[3]);
        assert_eq!(piecewise_pi(&fit, 1.0).unwrap(), fit.probs[6]);
        assert_relative_eq!(piecewise_pi(&fit, 0.05).unwrap(), 0.5 / 41.0, epsilon = 1e-15);
        assert!((piecewise_pi(&fit, 0.05).unwrap() - 0.01220).abs() < 1e-5);
        assert!(matches!(piecewise_pi(&fit, 1.5), Err(BmdError::OutsideDesignRange { .. })));
        assert!(matches!(piecewise_pi(&fit, -0.1), Err(BmdError::OutsideDesignRange { .. })));
    }

    #[test]
    fn nonpar_bmd_bcme() {
        let fit = bcme_fit();
        assert!((nonpar_bmd_dose(&fit, 0.05).unwrap() - 0.128).abs() < 0.002);
        assert!((nonpar_bmd_dose(&fit, 0.10).unwrap() - 0.183).abs() < 0.002);
        assert!((nonpar_bmd_dose(&fit, 0.01).unwrap() - 0.041).abs() < 0.002);
    }

    #[test]
    fn nonpar_bmd_identity_line() {
        let fit = PavaFit { knots: vec![0.0, 1.0], probs: vec![0.0, 1.0], weights: vec![1.0, 1.0] };
        for q in [0.01, 0.3, 0.77] {
            assert_relative_eq!(nonpar_bmd_dose(&fit, q).unwrap(), q, epsilon = 1e-15);
        }
    }

    #[test]
    fn nonpar_bmd_skips_flat_segment_and_errors_beyond_range() {
        let fit = PavaFit {
            knots: vec![0.0, 0.5, 1.0],
            probs: vec![0.1, 0.1, 0.4],
            weights: vec![1.0; 3],
        };
        // target 0.1 + 0.1 * 0.9 = 0.19 on the second segment
        assert_relative_eq!(nonpar_bmd_dose(&fit, 0.1).unwrap(), 0.5 + 0.09 / 0.3 * 0.5, epsilon = 1e-14);
        assert!(matches!(nonpar_bmd_dose(&fit, 0.5), Err(BmdError::BmrUnattainable { .. })));
        let est = nonpar_bmd(&fit, 0.1).unwrap();
        assert_eq!(est.provenance, Provenance::Nonparametric);
    }
}
