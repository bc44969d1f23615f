//! Training objective: binary cross-entropy on logits plus a soft
//! intersection-over-union loss on probabilities, combined as
//! `total = bce + lambda_iou * (1 - soft_iou)`.
//!
//! Targets are real-valued heatmaps in [0, 1]; the soft IoU consumes them
//! directly without binarization. All-zero targets are rejected rather
//! than epsilon-stabilized: such a clip indicates an annotation bug.

use crate::autodiff::{Graph, NodeId, Scalar};
use crate::error::{CoreError, Result};
use ndarray::ArrayD;

/// Per-batch loss terms; `total = bce + lambda_iou * soft_iou_loss`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub bce: f64,
    pub soft_iou_loss: f64,
    pub total: f64,
    pub lambda_iou: f64,
}

fn validate_target<F: Scalar>(target: &ArrayD<F>) -> Result<()> {
    for &t in target.iter() {
        let v = t.into_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(CoreError::validation(format!(
                "target value {v} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Mean stable binary cross-entropy between a logit grid and a target
/// grid in [0, 1].
pub fn bce_with_logits<F: Scalar>(
    g: &mut Graph<F>,
    logits: NodeId,
    target: &ArrayD<F>,
) -> Result<NodeId> {
    if g.shape(logits) != target.shape() {
        return Err(CoreError::validation(format!(
            "bce shape mismatch: logits {:?} vs target {:?}",
            g.shape(logits),
            target.shape()
        )));
    }
    validate_target(target)?;
    Ok(g.bce_with_logits_mean(logits, target))
}

/// Soft IoU `Σ(p·t) / Σ(p + t − p·t)` between probabilities and a target
/// with positive mass.
pub fn soft_iou<F: Scalar>(g: &mut Graph<F>, probs: NodeId, target: &ArrayD<F>) -> Result<NodeId> {
    if g.shape(probs) != target.shape() {
        return Err(CoreError::validation(format!(
            "soft_iou shape mismatch: probs {:?} vs target {:?}",
            g.shape(probs),
            target.shape()
        )));
    }
    validate_target(target)?;
    let mass: f64 = target.iter().map(|t| t.into_f64()).sum();
    if mass <= 0.0 {
        return Err(CoreError::validation(
            "soft_iou: target is all-zero (annotation bug; clip should be rejected upstream)",
        ));
    }
    Ok(g.soft_iou(probs, target))
}

/// Combined objective on a logit grid. Returns the scalar total-loss node
/// and the numeric breakdown.
pub fn total_loss<F: Scalar>(
    g: &mut Graph<F>,
    logits: NodeId,
    target: &ArrayD<F>,
    lambda_iou: f64,
) -> Result<(NodeId, LossBreakdown)> {
    let bce = bce_with_logits(g, logits, target)?;
    let probs = g.sigmoid(logits);
    let iou = soft_iou(g, probs, target)?;
    let neg = g.scale(iou, -F::one());
    let iou_loss = g.add_scalar(neg, F::one());
    let weighted = g.scale(iou_loss, F::from_f64(lambda_iou));
    let total = g.add(bce, weighted);
    let breakdown = LossBreakdown {
        bce: g.scalar_value(bce).into_f64(),
        soft_iou_loss: g.scalar_value(iou_loss).into_f64(),
        total: g.scalar_value(total).into_f64(),
        lambda_iou,
    };
    Ok((total, breakdown))
}
