//! Average precision for localisation, entity F1 and character error rate.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::detect::{iou, BBox};
use crate::error::{bail, Result};

/// Outcome of matching one page (or a merged set of pages).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Matched GT index for each considered detection, in input order.
    #[serde(skip)]
    pub matches: Vec<Option<usize>>,
}

impl MetricCounts {
    pub fn merge(&mut self, other: &MetricCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.matches.extend_from_slice(&other.matches);
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }
}

/// Greedy matching of score-sorted detections to ground truth: each
/// detection takes the unmatched GT with the highest IoU at or above
/// `iou_thresh` (lowest index on ties), if any.
pub fn match_detections(dets: &[BBox], gts: &[BBox], iou_thresh: f64) -> MetricCounts {
    match_with(dets, gts, iou_thresh, |_, _| true)
}

/// Entity matching: like [`match_detections`] but tags must agree. Detections
/// tagged `other` are not predictions of an entity and are skipped; GT words
/// tagged `other` cannot be matched and are not counted as misses.
pub fn match_entities(
    dets: &[(BBox, usize)],
    gts: &[(BBox, usize)],
    other: usize,
    iou_thresh: f64,
) -> MetricCounts {
    let d: Vec<(BBox, usize)> = dets.iter().filter(|d| d.1 != other).copied().collect();
    let g: Vec<(BBox, usize)> = gts.iter().filter(|g| g.1 != other).copied().collect();
    let db: Vec<BBox> = d.iter().map(|x| x.0).collect();
    let gb: Vec<BBox> = g.iter().map(|x| x.0).collect();
    match_with(&db, &gb, iou_thresh, |di, gi| d[di].1 == g[gi].1)
}

fn match_with(
    dets: &[BBox],
    gts: &[BBox],
    thresh: f64,
    ok: impl Fn(usize, usize) -> bool,
) -> MetricCounts {
    let mut taken = vec![false; gts.len()];
    let mut matches = Vec::with_capacity(dets.len());
    for (di, d) in dets.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || !ok(di, gi) {
                continue;
            }
            let v = iou(d, g);
            if v >= thresh && best.is_none_or(|(b, _)| v > b) {
                best = Some((v, gi));
            }
        }
        if let Some((_, gi)) = best {
            taken[gi] = true;
        }
        matches.push(best.map(|b| b.1));
    }
    let tp = matches.iter().filter(|m| m.is_some()).count();
    MetricCounts {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
        matches,
    }
}

/// Area under the precision-recall curve of `(score, is_true_positive)`
/// records pooled over a dataset, with `p_interp(r) = max_{r' >= r} p(r')`.
pub fn average_precision(records: &[(f64, bool)], num_gt: usize) -> Result<f64> {
    if num_gt == 0 {
        bail!(
            InvalidArgument,
            "average precision is undefined without ground truth"
        );
    }
    let mut r: Vec<(f64, bool)> = records.to_vec();
    r.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(core::cmp::Ordering::Equal));
    let mut tp = 0usize;
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(r.len());
    for (i, &(_, ok)) in r.iter().enumerate() {
        if ok {
            tp += 1;
        }
        pts.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    let mut best = 0.0f64;
    let mut interp = vec![0.0; pts.len()];
    for i in (0..pts.len()).rev() {
        best = best.max(pts[i].1);
        interp[i] = best;
    }
    let mut prev_r = 0.0;
    for (i, &(rec, _)) in pts.iter().enumerate() {
        ap += (rec - prev_r) * interp[i];
        prev_r = rec;
    }
    Ok(ap.clamp(0.0, 1.0))
}

/// Harmonic mean of precision and recall; 1 when there is nothing to find
/// and nothing was found.
pub fn f1(c: &MetricCounts) -> f64 {
    if c.tp + c.fp + c.fn_ == 0 {
        return 1.0;
    }
    let (p, r) = (c.precision(), c.recall());
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Insertions, substitutions and deletions turning a hypothesis into the reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOps {
    pub i: usize,
    pub s: usize,
    pub d: usize,
}

impl EditOps {
    pub fn total(&self) -> usize {
        self.i + self.s + self.d
    }
}

/// Levenshtein alignment of `hyp` against `reference` over characters.
///
/// `d` counts reference characters missing from the hypothesis, `i` extra
/// hypothesis characters.
pub fn edit_ops(hyp: &str, reference: &str) -> EditOps {
    let h: Vec<char> = hyp.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    let (n, m) = (h.len(), r.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for (j, v) in dp[..w].iter_mut().enumerate() {
        *v = j;
    }
    for i in 1..=n {
        dp[i * w] = i;
        for j in 1..=m {
            let sub = dp[(i - 1) * w + j - 1] + usize::from(h[i - 1] != r[j - 1]);
            dp[i * w + j] = sub.min(dp[(i - 1) * w + j] + 1).min(dp[i * w + j - 1] + 1);
        }
    }
    let mut ops = EditOps::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = dp[i * w + j];
        if i > 0 && j > 0 && dp[(i - 1) * w + j - 1] + usize::from(h[i - 1] != r[j - 1]) == cur {
            if h[i - 1] != r[j - 1] {
                ops.s += 1;
            }
            i -= 1;
            j -= 1;
        } else if j > 0 && dp[i * w + j - 1] + 1 == cur {
            ops.d += 1;
            j -= 1;
        } else {
            ops.i += 1;
            i -= 1;
        }
    }
    ops
}

/// Edit operations divided by the reference length.
pub fn cer(hyp: &str, reference: &str) -> Result<f64> {
    let m = reference.chars().count();
    if m == 0 {
        bail!(
            InvalidArgument,
            "character error rate needs a non-empty reference"
        );
    }
    Ok(edit_ops(hyp, reference).total() as f64 / m as f64)
}

/// Micro-averaged CER: total edit operations over total reference length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CerAccumulator {
    pub edits: usize,
    pub ref_chars: usize,
}

impl CerAccumulator {
    pub fn add(&mut self, hyp: &str, reference: &str) {
        self.edits += edit_ops(hyp, reference).total();
        self.ref_chars += reference.chars().count();
    }

    pub fn merge(&mut self, o: &CerAccumulator) {
        self.edits += o.edits;
        self.ref_chars += o.ref_chars;
    }

    pub fn value(&self) -> Option<f64> {
        (self.ref_chars > 0).then(|| self.edits as f64 / self.ref_chars as f64)
    }
}
