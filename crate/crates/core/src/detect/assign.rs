use alloc::vec;
use alloc::vec::Vec;

use super::anchors::AnchorSet;
use super::geometry::{encode, iou_corners, BBox, BoxDelta};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Negative,
    Ignore,
    Positive { gt: usize, class: usize },
}

/// Per-anchor training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTargets {
    pub labels: Vec<AnchorLabel>,
    /// `(anchor index, target delta)` for every positive, in anchor order.
    pub positives: Vec<(usize, BoxDelta)>,
}

impl ClassTargets {
    pub fn num_positive(&self) -> usize {
        self.positives.len()
    }

    pub fn num_ignored(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| **l == AnchorLabel::Ignore)
            .count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssignConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            pos_iou: 0.5,
            neg_iou: 0.4,
        }
    }
}

/// Label anchors against ground truth.
///
/// An anchor is positive when its best IoU is at least `pos_iou` (matched to
/// the GT with the highest IoU, lowest index on ties), negative below
/// `neg_iou`, ignored in between. A GT box that ends up with no positive
/// anchor claims its highest-IoU anchor.
pub fn assign_targets(
    anchors: &AnchorSet,
    gt_boxes: &[BBox],
    gt_classes: &[usize],
    cfg: AssignConfig,
) -> Result<ClassTargets> {
    let n = anchors.len();
    let gt_c: Vec<_> = gt_boxes.iter().map(|b| b.corners()).collect();
    let mut best = vec![(0.0f64, usize::MAX); n];
    let mut gt_best = vec![(-1.0f64, usize::MAX); gt_boxes.len()];
    for (ai, ac) in anchors.corners().iter().enumerate() {
        for (gi, gc) in gt_c.iter().enumerate() {
            // cheap reject before the full IoU
            if ac.2 <= gc.0 || gc.2 <= ac.0 || ac.3 <= gc.1 || gc.3 <= ac.1 {
                continue;
            }
            let v = iou_corners(*ac, *gc);
            if v > best[ai].0 {
                best[ai] = (v, gi);
            }
            if v > gt_best[gi].0 {
                gt_best[gi] = (v, ai);
            }
        }
    }
    let mut labels: Vec<AnchorLabel> = best
        .iter()
        .map(|&(v, gi)| {
            if gi != usize::MAX && v >= cfg.pos_iou {
                AnchorLabel::Positive {
                    gt: gi,
                    class: gt_classes[gi],
                }
            } else if v < cfg.neg_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    let mut has_pos = vec![false; gt_boxes.len()];
    for l in &labels {
        if let AnchorLabel::Positive { gt, .. } = *l {
            has_pos[gt] = true;
        }
    }
    for (gi, &(v, ai)) in gt_best.iter().enumerate() {
        if !has_pos[gi] && ai != usize::MAX && v > 0.0 {
            labels[ai] = AnchorLabel::Positive {
                gt: gi,
                class: gt_classes[gi],
            };
        }
    }
    let mut positives = Vec::new();
    for (ai, l) in labels.iter().enumerate() {
        if let AnchorLabel::Positive { gt, .. } = *l {
            positives.push((ai, encode(&gt_boxes[gt], &anchors.anchors[ai].bbox)?));
        }
    }
    Ok(ClassTargets { labels, positives })
}
