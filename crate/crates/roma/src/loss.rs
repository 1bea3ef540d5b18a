//! Loss functions: task cross-entropy, the manifold alignment term pulling a
//! sample's routing toward its successful neighbors, the combined objective,
//! and the baseline penalties used by the regularizer comparison.

use crate::error::{Result, RomaError};
use crate::linalg::softmax;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub manifold: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Cross-entropy of softmax(class_logits) at `label`, with the logit
/// gradient (softmax minus one-hot).
pub fn task_loss(class_logits: &[f64], label: u32) -> Result<(f64, Vec<f64>)> {
    if label as usize >= class_logits.len() {
        return Err(RomaError::Input(format!(
            "label {label} out of range for {} classes",
            class_logits.len()
        )));
    }
    let p = softmax(class_logits);
    let loss = -p[label as usize].max(1e-300).ln();
    let mut grad = p;
    grad[label as usize] -= 1.0;
    Ok((loss, grad))
}

fn check_lengths(r: &[f64], targets: &[&[f64]], weights: &[f64]) -> Result<()> {
    if targets.len() != weights.len() {
        return Err(RomaError::Shape(format!(
            "{} targets but {} weights",
            targets.len(),
            weights.len()
        )));
    }
    if let Some(bad) = targets.iter().find(|t| t.len() != r.len()) {
        return Err(RomaError::Shape(format!(
            "target length {} != routing length {}",
            bad.len(),
            r.len()
        )));
    }
    Ok(())
}

/// Weighted squared-distance pull toward neighbor routing targets:
/// sum_j W_j * ||r - r_j||^2.
pub fn manifold_loss(r: &[f64], targets: &[&[f64]], weights: &[f64]) -> Result<f64> {
    check_lengths(r, targets, weights)?;
    Ok(targets
        .iter()
        .zip(weights)
        .map(|(t, &w)| w * crate::linalg::squared_distance(r, t))
        .sum())
}

/// Gradient of `manifold_loss` in r with targets held constant:
/// 2 * sum_j W_j (r - r_j).
pub fn manifold_grad(r: &[f64], targets: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    check_lengths(r, targets, weights)?;
    let mut grad = vec![0.0; r.len()];
    for (t, &w) in targets.iter().zip(weights) {
        for ((g, &ri), &ti) in grad.iter_mut().zip(r).zip(*t) {
            *g += 2.0 * w * (ri - ti);
        }
    }
    Ok(grad)
}

/// total = task + lambda * manifold.
pub fn combine(task: f64, manifold: f64, lambda: f64) -> Result<LossBreakdown> {
    if lambda < 0.0 {
        return Err(RomaError::Config(format!("lambda {lambda} must be >= 0")));
    }
    Ok(LossBreakdown {
        task,
        manifold,
        lambda,
        total: task + lambda * manifold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    L1,
    L2,
    Entropy,
}

/// Baseline penalties over a concatenated per-layer vector with blocks of
/// size `block_len`. L1 and L2 ignore the block structure; the entropy
/// penalty sums per-block Shannon entropies (positive sign penalizes high
/// routing entropy; `flip_entropy_sign` rewards it instead).
pub fn baseline_penalty(
    kind: PenaltyKind,
    values: &[f64],
    block_len: usize,
    flip_entropy_sign: bool,
) -> Result<(f64, Vec<f64>)> {
    if block_len == 0 || values.len() % block_len != 0 {
        return Err(RomaError::Shape(format!(
            "vector length {} not a multiple of block length {block_len}",
            values.len()
        )));
    }
    match kind {
        PenaltyKind::L1 => {
            let loss = values.iter().map(|v| v.abs()).sum();
            let grad = values.iter().map(|v| v.signum()).collect();
            Ok((loss, grad))
        }
        PenaltyKind::L2 => {
            let loss = values.iter().map(|v| v * v).sum();
            let grad = values.iter().map(|v| 2.0 * v).collect();
            Ok((loss, grad))
        }
        PenaltyKind::Entropy => {
            let sign = if flip_entropy_sign { -1.0 } else { 1.0 };
            let mut loss = 0.0;
            let mut grad = vec![0.0; values.len()];
            for (block, gblock) in values
                .chunks(block_len)
                .zip(grad.chunks_mut(block_len))
            {
                for (&p, g) in block.iter().zip(gblock.iter_mut()) {
                    let pc = p.max(1e-300);
                    loss += sign * (-pc * pc.ln());
                    *g = sign * (-(pc.ln() + 1.0));
                }
            }
            Ok((loss, grad))
        }
    }
}
