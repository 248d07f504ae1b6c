use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::anchors::AnchorSet;
use super::geometry::{decode, BoxDelta};
use super::nms::{nms, rank_order, Detection};
use super::DetectConfig;
use crate::backbone::{Conv, PyramidFeatures};
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::scalar::Scalar;

/// Classification and box-regression subnets shared across pyramid levels.
#[derive(Clone, Debug)]
pub struct DetectHead {
    cls_convs: Vec<Conv>,
    cls_out: Conv,
    reg_convs: Vec<Conv>,
    reg_out: Conv,
    num_classes: usize,
    per_location: usize,
}

/// Head outputs flattened in anchor order.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[anchors, classes]` pre-sigmoid scores.
    pub logits: Var,
    /// `[anchors, 4]` predicted deltas.
    pub deltas: Var,
}

impl DetectHead {
    pub fn new<T: Scalar>(
        cfg: &DetectConfig,
        channels: usize,
        num_classes: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_classes == 0 {
            bail!(InvalidArgument, "detection head needs at least one class");
        }
        let a = cfg.ratios.len() * cfg.scales.len();
        let mut cls_convs = Vec::new();
        let mut reg_convs = Vec::new();
        for i in 0..cfg.head_convs {
            cls_convs.push(Conv::new(
                store,
                &format!("detect.cls.conv{}", i + 1),
                channels,
                channels,
                3,
                1,
                rng,
            )?);
        }
        for i in 0..cfg.head_convs {
            reg_convs.push(Conv::new(
                store,
                &format!("detect.reg.conv{}", i + 1),
                channels,
                channels,
                3,
                1,
                rng,
            )?);
        }
        let cls_out = Conv::new(
            store,
            "detect.cls.out",
            channels,
            a * num_classes,
            3,
            1,
            rng,
        )?;
        let reg_out = Conv::new(store, "detect.reg.out", channels, a * 4, 3, 1, rng)?;
        // small output weights, prior-probability bias
        let prior = cfg.prior_prob;
        let bias = -libm::log((1.0 - prior) / prior);
        store
            .get_mut(cls_out.bias_id())
            .value
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = T::from_f64(bias));
        for conv in [&cls_out, &reg_out] {
            let w = &mut store.get_mut(conv.weight_id()).value;
            w.data_mut().iter_mut().for_each(|v| *v *= T::from_f64(0.1));
        }
        Ok(DetectHead {
            cls_convs,
            cls_out,
            reg_convs,
            reg_out,
            num_classes,
            per_location: a,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn branch<T: Scalar>(
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        convs: &[Conv],
        out: &Conv,
        x: Var,
        k: usize,
        a: usize,
    ) -> Result<Var> {
        let mut h = x;
        for c in convs {
            let y = c.apply(g, store, h)?;
            h = g.relu(y);
        }
        let y = out.apply(g, store, h)?;
        let d = g.shape(y).to_vec();
        let p = g.permute(y, &[0, 2, 3, 1])?;
        g.reshape(p, [d[2] * d[3] * a, k])
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        feats: &PyramidFeatures,
    ) -> Result<HeadOutput> {
        let mut cls = Vec::with_capacity(5);
        let mut reg = Vec::with_capacity(5);
        for &lvl in &feats.levels {
            cls.push(Self::branch(
                g,
                store,
                &self.cls_convs,
                &self.cls_out,
                lvl,
                self.num_classes,
                self.per_location,
            )?);
            reg.push(Self::branch(
                g,
                store,
                &self.reg_convs,
                &self.reg_out,
                lvl,
                4,
                self.per_location,
            )?);
        }
        Ok(HeadOutput {
            logits: g.concat0(&cls)?,
            deltas: g.concat0(&reg)?,
        })
    }
}

/// Turn raw head outputs into scored, decoded, suppressed detections.
///
/// Score is the highest class probability of an anchor; anchors below
/// `score_thresh` are dropped, the best `pre_nms_top_k` are decoded and
/// suppressed, and at most `max_detections` survive.
pub fn detect<T: Scalar>(
    logits: &[T],
    deltas: &[T],
    num_classes: usize,
    anchors: &AnchorSet,
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    let n = anchors.len();
    if logits.len() != n * num_classes || deltas.len() != n * 4 {
        bail!(
            Shape,
            "head outputs ({} logits, {} deltas) do not match {n} anchors",
            logits.len(),
            deltas.len()
        );
    }
    let mut cands = Vec::new();
    for (i, a) in anchors.anchors.iter().enumerate() {
        let row = &logits[i * num_classes..(i + 1) * num_classes];
        let mut best = 0;
        for c in 1..num_classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        let score = crate::graph::sigmoid(row[best]).to_f64();
        if score >= cfg.score_thresh {
            cands.push(Detection {
                bbox: a.bbox,
                score,
                class: best,
                level: a.level,
                anchor: i,
            });
        }
    }
    cands.sort_by(rank_order);
    cands.truncate(cfg.pre_nms_top_k);
    for d in &mut cands {
        let i = d.anchor;
        let dv: Vec<f64> = deltas[i * 4..i * 4 + 4]
            .iter()
            .map(|v| v.to_f64())
            .collect();
        d.bbox = decode(&BoxDelta::from_slice(&dv), &anchors.anchors[i].bbox);
    }
    let mut kept = nms(&cands, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    Ok(kept)
}
