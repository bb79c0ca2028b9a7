//! Variance-based uncertainty measures for FD predictions and the EDL
//! baseline measures used for comparison.

use crate::error::{Error, Result};
use crate::fd::{DirichletParams, FdParams};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub predicted_class: usize,
    pub expected_probs: Vec<f64>,
    pub total: f64,
    /// `total - epistemic`, clamped at zero.
    pub aleatoric: f64,
    /// Unclamped `total - epistemic`; may be a rounding-level negative.
    pub aleatoric_raw: f64,
    pub epistemic: f64,
    /// `E[pi_k] (1 - E[pi_k])` per class.
    pub per_class_total: Vec<f64>,
}

/// Index of the largest component; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &FdParams) -> usize {
    argmax(params.mean().as_slice())
}

pub fn uncertainties(params: &FdParams) -> UncertaintyReport {
    let mean = params.mean().into_vec();
    let per_class_total: Vec<f64> = mean.iter().map(|m| m * (1.0 - m)).collect();
    let total = 1.0 - mean.iter().map(|m| m * m).sum::<f64>();
    let epistemic: f64 = params.variance().iter().sum();
    let aleatoric_raw = total - epistemic;
    UncertaintyReport {
        predicted_class: argmax(&mean),
        expected_probs: mean,
        total,
        aleatoric: aleatoric_raw.max(0.0),
        aleatoric_raw,
        epistemic,
        per_class_total,
    }
}

/// Baseline measures for a plain Dirichlet: `(1 - max mean, K / alpha_0)`.
pub fn edl_uncertainties(d: &DirichletParams) -> (f64, f64) {
    let a0 = d.alpha0();
    let max = d.alpha().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (1.0 - max / a0, d.num_classes() as f64 / a0)
}

/// Min-max scaling to [0, 1], optionally after a natural log.
pub fn normalize_batch(values: &[f64], log_transform: bool) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Domain("cannot normalize an empty batch".into()));
    }
    let xs: Vec<f64> = if log_transform {
        if let Some(v) = values.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!("log transform of non-positive value {v}")));
        }
        values.iter().map(|v| v.ln()).collect()
    } else {
        values.to_vec()
    };
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![0.0; xs.len()]);
    }
    Ok(xs.iter().map(|x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0)).collect())
}
