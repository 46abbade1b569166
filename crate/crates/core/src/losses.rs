//! Training losses and evaluation metrics.
//!
//! Losses operate on one example's probability vector. The network's output
//! activation decides how a loss is read: softmax rows are categorical
//! distributions, sigmoid rows are independent per-entry probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default additive smoothing for the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;
/// Probability floor inside `-ln(p)`.
pub const CE_FLOOR: f64 = 1e-12;
/// Threshold used to binarise predicted masks.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    SoftDice { epsilon: f64 },
    CrossEntropy,
    Mse,
}

impl LossKind {
    pub fn soft_dice() -> Self {
        LossKind::SoftDice { epsilon: DICE_EPS }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LossKind::SoftDice { epsilon } if !(*epsilon > 0.0) => Err(Error::invalid(format!(
                "soft dice epsilon must be positive, got {epsilon}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::SoftDice { .. } => "soft_dice",
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Mse => "mse",
        }
    }
}

/// How a network's output row is normalised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Softmax,
    Sigmoid,
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// `1 − (2·Σ p·g + ε) / (Σ p + Σ g + ε)`.
pub fn soft_dice_loss(pred: &[f64], target: &[f64], epsilon: f64) -> Result<f64> {
    check_same_len(pred, target)?;
    if let Some(p) = pred.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("prediction {p} outside [0, 1]")));
    }
    if let Some(t) = target.iter().find(|t| **t != 0.0 && **t != 1.0) {
        return Err(Error::invalid(format!("target {t} is not binary")));
    }
    Ok(soft_dice_with_grad(pred, target, epsilon, None))
}

/// Soft Dice value; when `grad` is given, also writes `∂L/∂pred` into it.
pub(crate) fn soft_dice_with_grad(pred: &[f64], target: &[f64], eps: f64, grad: Option<&mut [f64]>) -> f64 {
    let mut inter = 0.0;
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(target) {
        inter += p * g;
        sum += p + g;
    }
    let num = 2.0 * inter + eps;
    let den = sum + eps;
    if let Some(grad) = grad {
        let den2 = den * den;
        for (d, g) in grad.iter_mut().zip(target) {
            *d = -(2.0 * g * den - num) / den2;
        }
    }
    1.0 - num / den
}

/// `2|P∩G| / (|P| + |G|)` over binary masks; both empty counts as a perfect 1.
pub fn dice_coefficient(pred_mask: &[f64], target: &[f64]) -> Result<f64> {
    check_same_len(pred_mask, target)?;
    let mut inter = 0.0;
    let mut total = 0.0;
    for (p, g) in pred_mask.iter().zip(target) {
        let p = if *p >= MASK_THRESHOLD { 1.0 } else { 0.0 };
        let g = if *g >= MASK_THRESHOLD { 1.0 } else { 0.0 };
        inter += p * g;
        total += p + g;
    }
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / total)
}

/// Dice averaged over `channels` equally sized mask channels laid out
/// contiguously in the vectors.
pub fn mean_channel_dice(pred_mask: &[f64], target: &[f64], channels: usize) -> Result<f64> {
    check_same_len(pred_mask, target)?;
    if channels == 0 || !pred_mask.len().is_multiple_of(channels) {
        return Err(Error::invalid(format!(
            "{} entries cannot be split into {channels} channels",
            pred_mask.len()
        )));
    }
    let width = pred_mask.len() / channels;
    let mut acc = 0.0;
    for c in 0..channels {
        let r = c * width..(c + 1) * width;
        acc += dice_coefficient(&pred_mask[r.clone()], &target[r])?;
    }
    Ok(acc / channels as f64)
}

/// `−ln(max(pred[target_index], 1e-12))`.
pub fn cross_entropy(pred: &[f64], target_index: usize) -> Result<f64> {
    let p = pred.get(target_index).ok_or_else(|| {
        Error::invalid(format!(
            "target index {target_index} out of range for {} classes",
            pred.len()
        ))
    })?;
    Ok(-p.max(CE_FLOOR).ln())
}

/// First index of the maximum; ties go to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Loss of one example and its gradient with respect to the probabilities.
pub(crate) fn example_loss(
    loss: LossKind,
    act: OutputActivation,
    pred: &[f64],
    target: &[f64],
    grad: &mut [f64],
) -> f64 {
    match loss {
        LossKind::SoftDice { epsilon } => soft_dice_with_grad(pred, target, epsilon, Some(grad)),
        LossKind::Mse => {
            let n = pred.len() as f64;
            let mut acc = 0.0;
            for ((d, p), t) in grad.iter_mut().zip(pred).zip(target) {
                let e = p - t;
                acc += e * e;
                *d = 2.0 * e / n;
            }
            acc / n
        }
        LossKind::CrossEntropy => match act {
            OutputActivation::Softmax => {
                let k = argmax(target);
                grad.iter_mut().for_each(|d| *d = 0.0);
                let p = pred[k];
                if p > CE_FLOOR {
                    grad[k] = -1.0 / p;
                }
                -p.max(CE_FLOOR).ln()
            }
            OutputActivation::Sigmoid => {
                // Binary cross-entropy averaged over entries.
                let n = pred.len() as f64;
                let mut acc = 0.0;
                for ((d, p), t) in grad.iter_mut().zip(pred).zip(target) {
                    let pos = p.max(CE_FLOOR);
                    let neg = (1.0 - p).max(CE_FLOOR);
                    acc -= t * pos.ln() + (1.0 - t) * neg.ln();
                    let mut g = 0.0;
                    if *p > CE_FLOOR {
                        g -= t / p;
                    }
                    if 1.0 - p > CE_FLOOR {
                        g += (1.0 - t) / (1.0 - p);
                    }
                    *d = g / n;
                }
                acc / n
            }
        },
    }
}

/// Task metric for one example: Dice for sigmoid masks, 0/1 accuracy for
/// categorical predictions.
pub fn example_metric(act: OutputActivation, pred: &[f64], target: &[f64]) -> f64 {
    match act {
        OutputActivation::Sigmoid => dice_coefficient(pred, target).unwrap_or(0.0),
        OutputActivation::Softmax => {
            if argmax(pred) == argmax(target) {
                1.0
            } else {
                0.0
            }
        }
    }
}
