use alloc::vec;
use alloc::vec::Vec;

use super::assign::{AnchorLabel, ClassTargets};
use crate::error::{bail, Result};
use crate::graph::{sigmoid, Graph, Var};
use crate::scalar::Scalar;

pub const P_CLIP: f64 = 1e-7;

/// Weight of each anchor's class terms: positives share `1 / max(1, #pos)`,
/// negatives share `1 / #non-ignored`, ignored anchors get zero.
fn anchor_weights(t: &ClassTargets) -> Vec<f64> {
    let npos = t.num_positive().max(1) as f64;
    let nonign = (t.labels.len() - t.num_ignored()).max(1) as f64;
    t.labels
        .iter()
        .map(|l| match l {
            AnchorLabel::Negative => 1.0 / nonign,
            AnchorLabel::Ignore => 0.0,
            AnchorLabel::Positive { .. } => 1.0 / npos,
        })
        .collect()
}

fn target(l: &AnchorLabel, c: usize) -> f64 {
    match *l {
        AnchorLabel::Positive { class, .. } if class == c => 1.0,
        _ => 0.0,
    }
}

/// Binary cross-entropy of per-class probabilities `p` (`[anchors, classes]`,
/// row-major), clipped to `[1e-7, 1 - 1e-7]`.
pub fn cls_loss(p: &[f64], num_classes: usize, targets: &ClassTargets) -> Result<f64> {
    if p.len() != targets.labels.len() * num_classes {
        bail!(
            Shape,
            "{} probabilities for {} anchors x {num_classes} classes",
            p.len(),
            targets.labels.len()
        );
    }
    let w = anchor_weights(targets);
    let mut total = 0.0;
    for (a, l) in targets.labels.iter().enumerate() {
        if w[a] == 0.0 {
            continue;
        }
        for c in 0..num_classes {
            let pc = p[a * num_classes + c].clamp(P_CLIP, 1.0 - P_CLIP);
            let y = target(l, c);
            total -= w[a] * (y * libm::log(pc) + (1.0 - y) * libm::log(1.0 - pc));
        }
    }
    Ok(total)
}

/// Mean squared difference over the four components of every positive.
pub fn reg_loss(pred: &[[f64; 4]], target: &[[f64; 4]]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)))
        .sum();
    s / (4.0 * pred.len() as f64)
}

/// Classification loss on logits `[anchors, classes]` as a graph node.
///
/// `focal_gamma = 0` gives plain cross-entropy. The gradient is taken with
/// the unclipped sigmoid, so saturated mistakes still receive a signal.
pub fn cls_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &ClassTargets,
    focal_gamma: f64,
) -> Result<Var> {
    let dims = g.shape(logits).to_vec();
    if dims.len() != 2 || dims[0] != targets.labels.len() {
        bail!(
            Shape,
            "logits {} do not match {} anchors",
            g.value(logits).shape(),
            targets.labels.len()
        );
    }
    let k = dims[1];
    let w = anchor_weights(targets);
    let z = g.value(logits).data();
    let mut grad = vec![T::ZERO; z.len()];
    let mut total = 0.0;
    for (a, l) in targets.labels.iter().enumerate() {
        if w[a] == 0.0 {
            continue;
        }
        for c in 0..k {
            let i = a * k + c;
            let p = sigmoid(z[i]).to_f64();
            let pc = p.clamp(P_CLIP, 1.0 - P_CLIP);
            let y = target(l, c);
            let (loss, dz) = if focal_gamma == 0.0 {
                let loss = -(y * libm::log(pc) + (1.0 - y) * libm::log(1.0 - pc));
                (loss, p - y)
            } else if y == 1.0 {
                let m = libm::pow(1.0 - pc, focal_gamma);
                let loss = -m * libm::log(pc);
                (loss, focal_gamma * p * m * libm::log(pc) - m * (1.0 - p))
            } else {
                let m = libm::pow(pc, focal_gamma);
                let loss = -m * libm::log(1.0 - pc);
                (
                    loss,
                    -focal_gamma * m * (1.0 - p) * libm::log(1.0 - pc) + m * p,
                )
            };
            total += w[a] * loss;
            grad[i] = T::from_f64(w[a] * dz);
        }
    }
    g.fused_loss(logits, T::from_f64(total), grad)
}

/// Regression loss on predicted deltas `[anchors, 4]` over the positives.
pub fn reg_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    deltas: Var,
    targets: &ClassTargets,
) -> Result<Var> {
    let dims = g.shape(deltas).to_vec();
    if dims.len() != 2 || dims[1] != 4 || dims[0] != targets.labels.len() {
        bail!(
            Shape,
            "deltas {} do not match {} anchors",
            g.value(deltas).shape(),
            targets.labels.len()
        );
    }
    let d = g.value(deltas).data();
    let mut grad = vec![T::ZERO; d.len()];
    let mut total = 0.0;
    let norm = 4.0 * targets.positives.len().max(1) as f64;
    for (a, t) in &targets.positives {
        for (c, tv) in t.to_array().iter().enumerate() {
            let diff = d[a * 4 + c].to_f64() - tv;
            total += diff * diff / norm;
            grad[a * 4 + c] = T::from_f64(2.0 * diff / norm);
        }
    }
    g.fused_loss(deltas, T::from_f64(total), grad)
}
