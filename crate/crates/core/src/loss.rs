//! Pixel-space reconstruction losses and their gradients.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::{ensure_same_dims, Image};
use crate::model::Restorer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
    L1,
}

/// Mean over all elements of the squared or absolute difference.
pub fn reconstruction_loss(pred: &Image, target: &Image, kind: LossKind) -> Result<f64> {
    ensure_same_dims(pred, target)?;
    Ok(loss_values(pred.data(), target.data(), kind))
}

pub(crate) fn loss_values(pred: &[f64], target: &[f64], kind: LossKind) -> f64 {
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| match kind {
            LossKind::Mse => (p - t) * (p - t),
            LossKind::L1 => (p - t).abs(),
        })
        .sum();
    sum / pred.len() as f64
}

/// Derivative of the loss w.r.t. each predicted value.
/// The L1 subgradient at an exact tie is 0.
pub fn loss_output_grad(pred: &[f64], target: &[f64], kind: LossKind) -> Vec<f64> {
    let n = pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(p, t)| match kind {
            LossKind::Mse => 2.0 * (p - t) / n,
            LossKind::L1 => sign(p - t) / n,
        })
        .collect()
}

#[inline]
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Training loss of `model` on `(input, target)`, taken on the unclamped
/// response, and its gradient w.r.t. the parameters.
pub fn loss_gradient<R: Restorer + ?Sized>(
    model: &R,
    input: &Image,
    target: &Image,
    kind: LossKind,
) -> Result<(f64, Vec<f64>)> {
    ensure_same_dims(input, target)?;
    let raw = model.forward_raw(input)?;
    let loss = loss_values(&raw, target.data(), kind);
    let grad_out = loss_output_grad(&raw, target.data(), kind);
    Ok((loss, model.backward(input, &grad_out)?))
}
