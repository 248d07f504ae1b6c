use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::geometry::{iou_corners, BBox};

/// A scored box produced by the detection heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class: usize,
    pub level: usize,
    /// Index of the anchor that produced the box; breaks score ties.
    pub anchor: usize,
}

/// Descending score, then ascending anchor index.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.anchor.cmp(&b.anchor))
}

/// Greedy class-agnostic suppression: keep the best remaining box, drop every
/// box whose IoU with it exceeds `iou_thresh`, repeat.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted: Vec<&Detection> = dets.iter().collect();
    sorted.sort_by(|a, b| rank_order(a, b));
    let mut keep: Vec<Detection> = Vec::new();
    let mut corners = Vec::new();
    'outer: for d in sorted {
        let c = d.bbox.corners();
        for k in &corners {
            if iou_corners(c, *k) > iou_thresh {
                continue 'outer;
            }
        }
        corners.push(c);
        keep.push(d.clone());
    }
    keep
}
