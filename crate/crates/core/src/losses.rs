//! Training objectives: per-view 2D density MSE, 3D density MSE, the
//! projection consistency measure (PCM) with its loss, and the staged
//! weighted total.
//!
//! PCM compares a view's ground-truth mask with the back-projected 3D
//! prediction mask: overlap over ground-truth support. Extra people in the
//! projection (occluded in that view but visible elsewhere) cost nothing;
//! missing a person the view can see lowers the score.

use crate::tape::{NodeId, Tape};
use crate::tensor::{check_same_dims, Tensor, TensorError};
use std::sync::Arc;
use thiserror::Error;

/// 3D prediction mask threshold (density scaled by 1e4).
pub const MASK_THRESHOLD_3D: f64 = 1e-4;
/// Ground-truth 2D density mask threshold (density scaled by 1e3).
pub const MASK_THRESHOLD_2D: f64 = 1e-3;
/// PCM divide-by-zero guard.
pub const PCM_ALPHA: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss weights must be non-negative, got beta={beta} gamma={gamma}")]
    NegativeWeight { beta: f64, gamma: f64 },
    #[error("stage must be 1, 2 or 3, got {0}")]
    BadStage(u8),
    #[error(transparent)]
    Shape(#[from] TensorError),
}

/// Stage-scheduled loss weights: stage 1 trains the per-view branches
/// (beta = 1), stage 2 shifts dominance to the 3D supervision
/// (beta = 0.01), stage 3 keeps beta and enables the PCM term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub stage: u8,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn for_stage(stage: u8, stage3_gamma: f64) -> Result<Self, LossError> {
        let w = match stage {
            1 => LossWeights {
                stage,
                beta: 1.0,
                gamma: 0.0,
            },
            2 => LossWeights {
                stage,
                beta: 0.01,
                gamma: 0.0,
            },
            3 => LossWeights {
                stage,
                beta: 0.01,
                gamma: stage3_gamma,
            },
            other => return Err(LossError::BadStage(other)),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn custom(stage: u8, beta: f64, gamma: f64) -> Result<Self, LossError> {
        let w = LossWeights { stage, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.beta < 0.0 || self.gamma < 0.0 {
            return Err(LossError::NegativeWeight {
                beta: self.beta,
                gamma: self.gamma,
            });
        }
        Ok(())
    }
}

// ---- tape-level losses (differentiable) ------------------------------------

/// Per-view 2D density loss: `sum_i ||V_i - V_i^t||^2 / (w h)`.
pub fn loss_2d(
    tape: &mut Tape,
    preds: &[NodeId],
    targets: &[NodeId],
) -> Result<NodeId, TensorError> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(TensorError::Invalid(format!(
            "loss_2d: {} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut total: Option<NodeId> = None;
    for (&p, &t) in preds.iter().zip(targets.iter()) {
        let m = tape.mse(p, t)?;
        total = Some(match total {
            None => m,
            Some(acc) => tape.add(acc, m)?,
        });
    }
    Ok(total.expect("non-empty view list"))
}

/// 3D density loss: `||G - G^t||^2 / (a b d)`.
pub fn loss_3d(tape: &mut Tape, pred: NodeId, target: NodeId) -> Result<NodeId, TensorError> {
    tape.mse(pred, target)
}

/// PCM against a fixed ground-truth mask, differentiable in the projected
/// mask: `sum(gt * proj) / (sum(gt) + alpha)`.
pub fn pcm(
    tape: &mut Tape,
    gt_mask: &Tensor,
    proj_mask: NodeId,
    alpha: f64,
) -> Result<NodeId, TensorError> {
    check_same_dims(gt_mask.dims(), tape.value(proj_mask).dims(), "pcm")?;
    let m: f64 = gt_mask.sum();
    let overlap = tape.weighted_sum(proj_mask, Arc::new(gt_mask.data().to_vec()))?;
    Ok(tape.scale(overlap, 1.0 / (m + alpha)))
}

/// PCM loss summed over camera views: `sum_i (1 - PCM_i)`.
pub fn loss_pcm(
    tape: &mut Tape,
    gt_masks: &[Tensor],
    proj_masks: &[NodeId],
    alpha: f64,
) -> Result<NodeId, TensorError> {
    if gt_masks.len() != proj_masks.len() || gt_masks.is_empty() {
        return Err(TensorError::Invalid(format!(
            "loss_pcm: {} ground-truth masks vs {} projections",
            gt_masks.len(),
            proj_masks.len()
        )));
    }
    let mut total: Option<NodeId> = None;
    for (gt, &proj) in gt_masks.iter().zip(proj_masks.iter()) {
        let p = pcm(tape, gt, proj, alpha)?;
        let one_minus = tape.affine(p, -1.0, 1.0);
        total = Some(match total {
            None => one_minus,
            Some(acc) => tape.add(acc, one_minus)?,
        });
    }
    Ok(total.expect("non-empty view list"))
}

/// Combined loss `l3d + beta * l2d + gamma * lpcm`.
pub fn loss_total(
    tape: &mut Tape,
    l3d: NodeId,
    l2d: NodeId,
    lpcm: NodeId,
    w: &LossWeights,
) -> Result<NodeId, LossError> {
    w.validate()?;
    let b2d = tape.scale(l2d, w.beta);
    let bpcm = tape.scale(lpcm, w.gamma);
    let partial = tape.add(l3d, b2d)?;
    Ok(tape.add(partial, bpcm)?)
}

// ---- value-level helpers (evaluation, logging) ------------------------------

pub fn mse_value(a: &Tensor, b: &Tensor) -> Result<f64, TensorError> {
    check_same_dims(a.dims(), b.dims(), "mse")?;
    let n = a.len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

pub fn loss_2d_value(preds: &[Tensor], targets: &[Tensor]) -> Result<f64, TensorError> {
    let mut acc = 0.0;
    for (p, t) in preds.iter().zip(targets.iter()) {
        acc += mse_value(p, t)?;
    }
    Ok(acc)
}

/// Binary mask `[t > threshold]`.
pub fn mask_from_density(t: &Tensor, threshold: f64) -> Tensor {
    t.map(|v| if v > threshold { 1.0 } else { 0.0 })
}

pub fn pcm_value(gt_mask: &Tensor, proj_mask: &Tensor, alpha: f64) -> Result<f64, TensorError> {
    check_same_dims(gt_mask.dims(), proj_mask.dims(), "pcm")?;
    let overlap: f64 = gt_mask
        .data()
        .iter()
        .zip(proj_mask.data().iter())
        .map(|(g, p)| g * p)
        .sum();
    Ok(overlap / (gt_mask.sum() + alpha))
}

pub fn loss_pcm_value(
    gt_masks: &[Tensor],
    proj_masks: &[Tensor],
    alpha: f64,
) -> Result<f64, TensorError> {
    let mut acc = 0.0;
    for (g, p) in gt_masks.iter().zip(proj_masks.iter()) {
        acc += 1.0 - pcm_value(g, p, alpha)?;
    }
    Ok(acc)
}

pub fn loss_total_value(l3d: f64, l2d: f64, lpcm: f64, w: &LossWeights) -> f64 {
    l3d + w.beta * l2d + w.gamma * lpcm
}
