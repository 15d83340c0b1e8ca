//! Loss functions: class-weighted binary cross-entropy, availability-masked
//! mean squared error, and their unit-coefficient sum.
//!
//! The masked MSE normalizes by the number of available entries rather than
//! the batch size, which keeps its scale stable as missingness varies, and
//! its gradient is exactly zero at masked-out positions so missing targets
//! never propagate error.

use crate::dataset::ClassWeights;
use crate::error::{Error, Result};

/// Probabilities are clipped to [EPS, 1 - EPS] before the logs.
pub const BCE_CLIP: f64 = 1e-7;

/// Everything the combined loss needs for one batch.
#[derive(Debug, Clone)]
pub struct LossBatch {
    pub y_true: Vec<u8>,
    pub p_pred: Vec<f64>,
    pub aux_true: Vec<f64>,
    pub aux_pred: Vec<f64>,
    pub aux_mask: Vec<u8>,
    pub class_weights: ClassWeights,
}

impl LossBatch {
    fn validate(&self) -> Result<()> {
        let n = self.y_true.len();
        for (name, len) in [
            ("p_pred", self.p_pred.len()),
            ("aux_true", self.aux_true.len()),
            ("aux_pred", self.aux_pred.len()),
            ("aux_mask", self.aux_mask.len()),
        ] {
            if len != n {
                return Err(Error::shape(format!(
                    "{name} has length {len}, expected {n}"
                )));
            }
        }
        if self.aux_mask.iter().any(|&m| m > 1) {
            return Err(Error::validation("aux_mask entries must be 0 or 1"));
        }
        Ok(())
    }
}

/// Mean over the batch of w(y_i) * [-y_i ln p_i - (1 - y_i) ln(1 - p_i)].
pub fn weighted_bce(y_true: &[u8], p_pred: &[f64], weights: &ClassWeights) -> Result<f64> {
    if y_true.len() != p_pred.len() {
        return Err(Error::shape(format!(
            "y_true has length {}, p_pred has length {}",
            y_true.len(),
            p_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    let n = y_true.len() as f64;
    let mut total = 0.0;
    for (&y, &p) in y_true.iter().zip(p_pred) {
        let p = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
        let term = if y == 1 { -p.ln() } else { -(1.0 - p).ln() };
        total += weights.for_label(y) * term;
    }
    Ok(total / n)
}

/// Gradient of `weighted_bce` with respect to the pre-sigmoid logits:
/// w(y_i) * (p_i - y_i) / n. Exact wherever the clip is inactive.
pub fn weighted_bce_grad_logits(y_true: &[u8], p_pred: &[f64], weights: &ClassWeights) -> Vec<f64> {
    let n = y_true.len() as f64;
    y_true
        .iter()
        .zip(p_pred)
        .map(|(&y, &p)| weights.for_label(y) * (p - y as f64) / n)
        .collect()
}

/// Sum of masked squared errors over the count of available entries
/// (`max(1, sum(mask))`, so an all-masked-out batch contributes 0).
pub fn masked_mse(aux_true: &[f64], aux_pred: &[f64], aux_mask: &[u8]) -> Result<f64> {
    check_masked_lengths(aux_true, aux_pred, aux_mask)?;
    let available: u32 = aux_mask.iter().map(|&m| u32::from(m)).sum();
    let denom = available.max(1) as f64;
    let sum: f64 = aux_true
        .iter()
        .zip(aux_pred)
        .zip(aux_mask)
        .map(|((&t, &p), &m)| {
            if m == 1 {
                let d = p - t;
                d * d
            } else {
                0.0
            }
        })
        .sum();
    Ok(sum / denom)
}

/// Gradient of `masked_mse` with respect to `aux_pred`:
/// 2 * mask_i * (aux_pred_i - aux_true_i) / max(1, sum(mask)).
/// Entries with mask 0 are exactly zero.
pub fn masked_mse_grad(aux_true: &[f64], aux_pred: &[f64], aux_mask: &[u8]) -> Result<Vec<f64>> {
    check_masked_lengths(aux_true, aux_pred, aux_mask)?;
    let available: u32 = aux_mask.iter().map(|&m| u32::from(m)).sum();
    let denom = available.max(1) as f64;
    Ok(aux_true
        .iter()
        .zip(aux_pred)
        .zip(aux_mask)
        .map(|((&t, &p), &m)| {
            if m == 1 {
                2.0 * (p - t) / denom
            } else {
                0.0
            }
        })
        .collect())
}

fn check_masked_lengths(aux_true: &[f64], aux_pred: &[f64], aux_mask: &[u8]) -> Result<()> {
    if aux_true.len() != aux_pred.len() || aux_true.len() != aux_mask.len() {
        return Err(Error::shape(format!(
            "masked mse lengths differ: true={}, pred={}, mask={}",
            aux_true.len(),
            aux_pred.len(),
            aux_mask.len()
        )));
    }
    if aux_mask.iter().any(|&m| m > 1) {
        return Err(Error::validation("aux_mask entries must be 0 or 1"));
    }
    Ok(())
}

/// weighted_bce + masked_mse with unit coefficients.
pub fn combined_loss(batch: &LossBatch) -> Result<f64> {
    batch.validate()?;
    let bce = weighted_bce(&batch.y_true, &batch.p_pred, &batch.class_weights)?;
    let mmse = masked_mse(&batch.aux_true, &batch.aux_pred, &batch.aux_mask)?;
    Ok(bce + mmse)
}
