//! Training objective: unweighted BCE + Dice over pixel probabilities,
//! with an optional smooth-L1 box term behind `lambda_bbox` (default 0,
//! which reproduces the plain two-term loss exactly).

use crate::error::Result;
use crate::tensor::{Tape, TensorId};

/// Probability clamp for the BCE logs; the printed formula is undefined
/// at exactly 0 or 1.
pub const BCE_CLAMP_EPS: f64 = 1e-7;
/// Additive smoothing for the Dice ratio; defines the empty-vs-empty case.
pub const DICE_SMOOTH: f64 = 1e-6;
/// Huber transition point for the optional box loss.
pub const BBOX_HUBER_BETA: f64 = 1.0;

/// Scalar values of each component; `total` is always
/// `(bce + dice) + lambda * bbox` with that association.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub bbox: f64,
    pub total: f64,
}

/// Tape handles for the loss graph of one sample.
pub struct LossNodes {
    pub bce: TensorId,
    pub dice: TensorId,
    pub bbox: Option<TensorId>,
    pub total: TensorId,
}

pub fn bce_loss(tape: &mut Tape, probs: TensorId, target: &[f64]) -> Result<TensorId> {
    tape.bce(probs, target, BCE_CLAMP_EPS)
}

pub fn dice_loss(tape: &mut Tape, probs: TensorId, target: &[f64]) -> Result<TensorId> {
    tape.dice(probs, target, DICE_SMOOTH)
}

/// Assemble the full objective. `bbox_pred` is the `[1, 4]` sigmoid box
/// output; it only joins the graph when `lambda_bbox > 0`, so the default
/// loss is exactly `bce + dice` and independent of the box head.
pub fn total_loss(
    tape: &mut Tape,
    probs: TensorId,
    gt_mask: &[f64],
    bbox_pred: Option<TensorId>,
    gt_bbox: &[f64; 4],
    lambda_bbox: f64,
) -> Result<(LossNodes, LossBreakdown)> {
    let bce = bce_loss(tape, probs, gt_mask)?;
    let dice = dice_loss(tape, probs, gt_mask)?;
    let base = tape.add(bce, dice)?;

    let (bbox_node, total) = match bbox_pred {
        Some(pred) if lambda_bbox > 0.0 => {
            let bb = tape.smooth_l1(pred, gt_bbox, BBOX_HUBER_BETA)?;
            let scaled = tape.scale(bb, lambda_bbox);
            (Some(bb), tape.add(base, scaled)?)
        }
        _ => (None, base),
    };

    let breakdown = LossBreakdown {
        bce: tape.scalar_value(bce),
        dice: tape.scalar_value(dice),
        bbox: bbox_node.map_or(0.0, |b| tape.scalar_value(b)),
        total: tape.scalar_value(total),
    };
    Ok((
        LossNodes {
            bce,
            dice,
            bbox: bbox_node,
            total,
        },
        breakdown,
    ))
}

/// One-shot BCE evaluation on plain slices (same math as the tape op).
pub fn bce_value(probs: &[f64], target: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf_from(vec![probs.len()], probs.to_vec())?;
    let l = bce_loss(&mut tape, p, target)?;
    Ok(tape.scalar_value(l))
}

/// One-shot Dice evaluation on plain slices.
pub fn dice_value(probs: &[f64], target: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf_from(vec![probs.len()], probs.to_vec())?;
    let l = dice_loss(&mut tape, p, target)?;
    Ok(tape.scalar_value(l))
}
