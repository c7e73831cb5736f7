//! Focal loss over per-frame logits, with a padding mask and the analytic
//! gradient used by the training loop.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{HrtrError, Result};

const PT_FLOOR: f64 = 1e-12;

/// Focal loss parameters: `-alpha * (1 - p_t)^gamma * log(p_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalSpec {
    pub alpha: f64,
    pub gamma: f64,
}

impl FocalSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(HrtrError::Config(format!("focal.alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(HrtrError::Config(format!("focal.gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

fn check_inputs(
    logits: &ArrayView3<f64>,
    labels: &ArrayView2<usize>,
    mask: &ArrayView2<bool>,
) -> Result<usize> {
    let (b, w, c) = logits.dim();
    if labels.dim() != (b, w) || mask.dim() != (b, w) {
        return Err(HrtrError::Config(format!(
            "loss shape mismatch: logits {:?}, labels {:?}, mask {:?}",
            logits.dim(),
            labels.dim(),
            mask.dim()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(HrtrError::Numeric("non-finite logits in loss".into()));
    }
    for ((bi, wi), &m) in mask.indexed_iter() {
        if m && labels[[bi, wi]] >= c {
            return Err(HrtrError::Config(format!(
                "label {} out of range for {c} classes at ({bi},{wi})",
                labels[[bi, wi]]
            )));
        }
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(HrtrError::Config("empty loss: mask excludes every frame".into()));
    }
    Ok(count)
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Mean over masked-in frames of `-alpha * (1 - p_t)^gamma * log(p_t)`,
/// where p_t is the softmax probability of the true class.
pub fn focal_loss(
    logits: ArrayView3<f64>,
    labels: ArrayView2<usize>,
    mask: ArrayView2<bool>,
    spec: &FocalSpec,
) -> Result<f64> {
    spec.validate()?;
    let count = check_inputs(&logits, &labels, &mask)?;
    let (b, w, _) = logits.dim();
    let mut total = 0.0;
    for bi in 0..b {
        for wi in 0..w {
            if !mask[[bi, wi]] {
                continue;
            }
            let row: Vec<f64> = logits.slice(ndarray::s![bi, wi, ..]).to_vec();
            let probs = softmax_row(&row);
            let pt = probs[labels[[bi, wi]]].max(PT_FLOOR);
            total += -spec.alpha * (1.0 - pt).powf(spec.gamma) * pt.ln();
        }
    }
    Ok(total / count as f64)
}

/// Analytic gradient of `focal_loss` w.r.t. the logits; zero at masked-out
/// frames.
pub fn focal_loss_grad(
    logits: ArrayView3<f64>,
    labels: ArrayView2<usize>,
    mask: ArrayView2<bool>,
    spec: &FocalSpec,
) -> Result<Array3<f64>> {
    spec.validate()?;
    let count = check_inputs(&logits, &labels, &mask)? as f64;
    let (b, w, c) = logits.dim();
    let mut grad = Array3::zeros((b, w, c));
    for bi in 0..b {
        for wi in 0..w {
            if !mask[[bi, wi]] {
                continue;
            }
            let row: Vec<f64> = logits.slice(ndarray::s![bi, wi, ..]).to_vec();
            let probs = softmax_row(&row);
            let y = labels[[bi, wi]];
            let pt = probs[y].max(PT_FLOOR);
            // dL/dp_t, then chain through softmax: dp_t/dz_j = p_t (δ_jy − p_j)
            let term1 = if spec.gamma > 0.0 {
                spec.gamma * (1.0 - pt).powf(spec.gamma - 1.0) * pt.ln()
            } else {
                0.0
            };
            let dl_dpt = spec.alpha * (term1 - (1.0 - pt).powf(spec.gamma) / pt);
            for j in 0..c {
                let delta = if j == y { 1.0 } else { 0.0 };
                grad[[bi, wi, j]] = dl_dpt * pt * (delta - probs[j]) / count;
            }
        }
    }
    Ok(grad)
}

/// Masked mean cross-entropy; the gamma=0, alpha=1 reduction of focal loss.
/// Kept as an independent reference path for tests.
pub fn cross_entropy(
    logits: ArrayView3<f64>,
    labels: ArrayView2<usize>,
    mask: ArrayView2<bool>,
) -> Result<f64> {
    let count = check_inputs(&logits, &labels, &mask)?;
    let (b, w, _) = logits.dim();
    let mut total = 0.0;
    for bi in 0..b {
        for wi in 0..w {
            if !mask[[bi, wi]] {
                continue;
            }
            let row: Vec<f64> = logits.slice(ndarray::s![bi, wi, ..]).to_vec();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            total += logsum - row[labels[[bi, wi]]];
        }
    }
    Ok(total / count as f64)
}

/// Builds an all-true mask for unpadded batches.
pub fn full_mask(b: usize, w: usize) -> Array2<bool> {
    Array2::from_elem((b, w), true)
}
