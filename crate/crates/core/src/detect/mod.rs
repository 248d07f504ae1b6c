//! Anchor-based one-stage word detector: anchor lattice, target assignment,
//! losses, decoding and non-maximum suppression.

mod anchors;
mod assign;
mod geometry;
mod head;
mod loss;
mod nms;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use anchors::{anchor_size, default_scales, Anchor, AnchorSet, DEFAULT_RATIOS};
pub use assign::{assign_targets, AnchorLabel, AssignConfig, ClassTargets};
pub use geometry::{decode, encode, iou, BBox, BoxDelta, DELTA_CLAMP};
pub use head::{detect, DetectHead, HeadOutput};
pub use loss::{cls_loss, cls_loss_node, reg_loss, reg_loss_node, P_CLIP};
pub use nms::{nms, rank_order, Detection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub anchor_base: f64,
    /// Height over width.
    pub ratios: Vec<f64>,
    pub scales: Vec<f64>,
    pub head_convs: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub nms_iou: f64,
    pub score_thresh: f64,
    pub pre_nms_top_k: usize,
    pub max_detections: usize,
    /// Initial foreground probability used to set the classification bias.
    pub prior_prob: f64,
    /// 0 disables the focal modulation.
    pub focal_gamma: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            anchor_base: 32.0,
            ratios: DEFAULT_RATIOS.to_vec(),
            scales: default_scales().to_vec(),
            head_convs: 2,
            pos_iou: 0.5,
            neg_iou: 0.4,
            nms_iou: 0.2,
            score_thresh: 0.5,
            pre_nms_top_k: 1000,
            max_detections: 300,
            prior_prob: 0.01,
            focal_gamma: 0.0,
        }
    }
}

impl DetectConfig {
    pub fn full_scale() -> Self {
        DetectConfig {
            head_convs: 4,
            ..Self::default()
        }
    }

    pub fn assign(&self) -> AssignConfig {
        AssignConfig {
            pos_iou: self.pos_iou,
            neg_iou: self.neg_iou,
        }
    }

    pub fn anchors(&self, h: usize, w: usize) -> crate::Result<AnchorSet> {
        let strides = crate::backbone::PYRAMID_STRIDES;
        let shapes: Vec<_> = strides
            .iter()
            .map(|&s| (h.div_ceil(s), w.div_ceil(s)))
            .collect();
        AnchorSet::generate(
            &shapes,
            &strides,
            self.anchor_base,
            &self.ratios,
            &self.scales,
        )
    }
}
