//! Entity tagging: reading order, the sequential tagger over pooled box
//! features, per-detection tags from a multi-class detector, and the
//! context-free word-crop classifier used as a baseline.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Conv;
use crate::detect::{BBox, Detection};
use crate::error::{bail, Error, Result};
use crate::graph::{Conv2dSpec, Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;

pub const OTHER: &str = "other";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TagSet {
    tags: Vec<String>,
    other: usize,
}

impl TagSet {
    pub fn new(tags: &[&str]) -> Result<Self> {
        Self::try_from(tags.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn other(&self) -> usize {
        self.other
    }

    pub fn index(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.tags[i]
    }
}

impl Default for TagSet {
    fn default() -> Self {
        TagSet::new(&["name", "location", "date", "occupation", OTHER]).expect("valid")
    }
}

impl TryFrom<Vec<String>> for TagSet {
    type Error = Error;

    fn try_from(tags: Vec<String>) -> Result<Self> {
        let others: Vec<usize> = tags
            .iter()
            .enumerate()
            .filter(|(_, t)| *t == OTHER)
            .map(|(i, _)| i)
            .collect();
        if others.len() != 1 {
            bail!(
                InvalidArgument,
                "tag set must contain \"{OTHER}\" exactly once"
            );
        }
        for (i, t) in tags.iter().enumerate() {
            if tags[..i].contains(t) {
                bail!(InvalidArgument, "duplicate tag {t:?}");
            }
        }
        Ok(TagSet {
            tags,
            other: others[0],
        })
    }
}

impl From<TagSet> for Vec<String> {
    fn from(t: TagSet) -> Self {
        t.tags
    }
}

/// Boxes in reading order, with the line each box was assigned to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReadingOrder {
    pub order: Vec<usize>,
    /// Line number (in reading order) of each input box.
    pub line_of: Vec<usize>,
}

fn within_span(b: &BBox, y: f64) -> bool {
    y >= b.y - b.h / 2.0 && y <= b.y + b.h / 2.0
}

/// Left-to-right, top-to-bottom ordering.
///
/// Lines are grown greedily from the topmost (then leftmost) unassigned box:
/// first leftwards, then rightwards, a box continues the line when its
/// vertical center falls inside the vertical span of the line's current end
/// box. Lines are then sorted by mean center y, ties by x then y of their
/// first box.
pub fn reading_order(boxes: &[BBox]) -> ReadingOrder {
    let n = boxes.len();
    let mut used = vec![false; n];
    let mut lines: Vec<Vec<usize>> = Vec::new();
    let key = |i: usize| (boxes[i].y, boxes[i].x, i);
    while let Some(seed) = (0..n).filter(|&i| !used[i]).min_by(|&a, &b| {
        key(a)
            .partial_cmp(&key(b))
            .unwrap_or(core::cmp::Ordering::Equal)
    }) {
        used[seed] = true;
        let mut left = Vec::new();
        let mut cur = seed;
        // walk left: nearest box to the left whose center lies in the current span
        loop {
            let next = (0..n)
                .filter(|&i| {
                    !used[i] && boxes[i].x < boxes[cur].x && within_span(&boxes[cur], boxes[i].y)
                })
                .max_by(|&a, &b| {
                    boxes[a]
                        .x
                        .partial_cmp(&boxes[b].x)
                        .unwrap_or(core::cmp::Ordering::Equal)
                        .then(b.cmp(&a))
                });
            match next {
                Some(i) => {
                    used[i] = true;
                    left.push(i);
                    cur = i;
                }
                None => break,
            }
        }
        left.reverse();
        left.push(seed);
        let mut cur = seed;
        loop {
            let next = (0..n)
                .filter(|&i| {
                    !used[i] && boxes[i].x > boxes[cur].x && within_span(&boxes[cur], boxes[i].y)
                })
                .min_by(|&a, &b| {
                    boxes[a]
                        .x
                        .partial_cmp(&boxes[b].x)
                        .unwrap_or(core::cmp::Ordering::Equal)
                        .then(a.cmp(&b))
                });
            match next {
                Some(i) => {
                    used[i] = true;
                    left.push(i);
                    cur = i;
                }
                None => break,
            }
        }
        lines.push(left);
    }
    let mean_y = |l: &Vec<usize>| l.iter().map(|&i| boxes[i].y).sum::<f64>() / l.len() as f64;
    lines.sort_by(|a, b| {
        let ka = (mean_y(a), boxes[a[0]].x, boxes[a[0]].y);
        let kb = (mean_y(b), boxes[b[0]].x, boxes[b[0]].y);
        ka.partial_cmp(&kb).unwrap_or(core::cmp::Ordering::Equal)
    });
    let mut line_of = vec![0; n];
    let mut order = Vec::with_capacity(n);
    for (li, l) in lines.iter().enumerate() {
        for &i in l {
            line_of[i] = li;
            order.push(i);
        }
    }
    ReadingOrder { order, line_of }
}

/// Tag of each detection from a detector trained with one class per tag.
pub fn tag_from_classification(dets: &[Detection]) -> Vec<usize> {
    dets.iter().map(|d| d.class).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NerConfig {
    pub max_len: usize,
    pub hidden: usize,
    /// Kernel width of the two sequence convolutions.
    pub kernel: usize,
}

impl Default for NerConfig {
    fn default() -> Self {
        NerConfig {
            max_len: 64,
            hidden: 64,
            kernel: 3,
        }
    }
}

/// Sequence tagger: pooled features of each box (mean over height, then
/// flattened) are stacked in reading order, zero-padded to `max_len`, passed
/// through two 1-D convolutions and a per-position fully connected layer.
#[derive(Clone, Debug)]
pub struct SeqTagger {
    convs: [(ParamId, ParamId); 2],
    fc_w: ParamId,
    fc_b: ParamId,
    cfg: NerConfig,
    in_dim: usize,
}

/// Logits of the sequential tagger.
#[derive(Clone, Copy, Debug)]
pub struct SeqLogits {
    /// `[n, tags]` in reading order, `n = min(boxes, max_len)`.
    pub logits: Var,
    /// Boxes dropped because the page had more than `max_len`.
    pub truncated: usize,
}

impl SeqTagger {
    pub fn new<T: Scalar>(
        cfg: &NerConfig,
        in_dim: usize,
        num_tags: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.kernel.is_multiple_of(2) || cfg.max_len == 0 {
            bail!(
                InvalidArgument,
                "sequence kernel must be odd and max_len positive"
            );
        }
        let k = cfg.kernel;
        let h = cfg.hidden;
        let c1 = (
            store.add_he("ner.conv1.weight", [h, in_dim, 1, k], in_dim * k, rng)?,
            store.add_const("ner.conv1.bias", [h], 0.0)?,
        );
        let c2 = (
            store.add_he("ner.conv2.weight", [h, h, 1, k], h * k, rng)?,
            store.add_const("ner.conv2.bias", [h], 0.0)?,
        );
        let fc_w = store.add_he("ner.fc.weight", [h, num_tags], h, rng)?;
        let fc_b = store.add_const("ner.fc.bias", [num_tags], 0.0)?;
        Ok(SeqTagger {
            convs: [c1, c2],
            fc_w,
            fc_b,
            cfg: cfg.clone(),
            in_dim,
        })
    }

    /// `pooled` is `[B, C, pH, pW]` in input box order; `order` lists box
    /// indices in reading order.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pooled: Var,
        order: &[usize],
    ) -> Result<SeqLogits> {
        let d = g.shape(pooled).to_vec();
        if d.len() != 4 || d[1] * d[3] != self.in_dim {
            bail!(
                Shape,
                "pooled features {} do not give {} per box",
                g.value(pooled).shape(),
                self.in_dim
            );
        }
        if order.is_empty() {
            bail!(InvalidArgument, "sequential tagging needs at least one box");
        }
        let l = self.cfg.max_len;
        let n = order.len().min(l);
        let m = g.mean_axis(pooled, 2)?;
        let flat = g.reshape(m, [d[0], self.in_dim])?;
        let rows: Vec<Option<usize>> = (0..l)
            .map(|i| order.get(i).copied().filter(|_| i < n))
            .collect();
        let seq = g.gather_rows(flat, &rows)?;
        let t = g.permute(seq, &[1, 0])?;
        let mut h = g.reshape(t, [1, self.in_dim, 1, l])?;
        let spec = Conv2dSpec {
            stride: 1,
            pad_h: 0,
            pad_w: self.cfg.kernel / 2,
        };
        for &(w, b) in &self.convs {
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            let y = g.conv2d(h, wv, Some(bv), spec)?;
            h = g.relu(y);
        }
        let hd = self.cfg.hidden;
        let flat = g.reshape(h, [hd, l])?;
        let steps = g.permute(flat, &[1, 0])?;
        let w = g.param(store, self.fc_w);
        let b = g.param(store, self.fc_b);
        let all = g.linear(steps, w, Some(b))?;
        let keep: Vec<Option<usize>> = (0..n).map(Some).collect();
        let logits = g.gather_rows(all, &keep)?;
        Ok(SeqLogits {
            logits,
            truncated: order.len() - n,
        })
    }
}

/// Mean softmax cross-entropy of `[n, K]` logits; `None` targets are masked.
pub fn tag_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[Option<usize>],
) -> Result<Var> {
    let lp = g.log_softmax(logits, 1)?;
    g.nll_loss(lp, targets)
}

/// Index of the largest entry in each row of a `[n, K]` buffer.
pub fn argmax_rows<T: Scalar>(v: &[T], k: usize) -> Vec<usize> {
    v.chunks(k)
        .map(|r| {
            let mut best = 0;
            for (i, x) in r.iter().enumerate() {
                if *x > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WordClassifierConfig {
    pub crop_h: usize,
    pub crop_w: usize,
    pub channels: [usize; 3],
}

impl Default for WordClassifierConfig {
    fn default() -> Self {
        WordClassifierConfig {
            crop_h: 24,
            crop_w: 72,
            channels: [16, 32, 48],
        }
    }
}

/// Resample the region of `image` (`h x w`, row-major) under `b` to
/// `out_h x out_w` by nearest-neighbour sampling.
pub fn crop_resize(
    image: &[f32],
    h: usize,
    w: usize,
    b: &BBox,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f32>> {
    let (x0, y0, x1, y1) = b.corners();
    let (x0c, y0c) = (x0.max(0.0), y0.max(0.0));
    let (x1c, y1c) = (x1.min(w as f64), y1.min(h as f64));
    if !(x1c > x0c && y1c > y0c) {
        bail!(InvalidArgument, "empty word crop");
    }
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let sy = y0 + (i as f64 + 0.5) * (y1 - y0) / out_h as f64;
        for j in 0..out_w {
            let sx = x0 + (j as f64 + 0.5) * (x1 - x0) / out_w as f64;
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                out.push(0.0);
            } else {
                out.push(image[sy as usize * w + sx as usize]);
            }
        }
    }
    Ok(out)
}

/// Context-free word classifier: three strided conv blocks over a single
/// word crop and a fully connected layer. Sees nothing but the crop.
#[derive(Clone, Debug)]
pub struct WordClassifier {
    convs: Vec<Conv>,
    fc_w: ParamId,
    fc_b: ParamId,
    cfg: WordClassifierConfig,
    flat: usize,
}

impl WordClassifier {
    pub fn new<T: Scalar>(
        cfg: &WordClassifierConfig,
        num_tags: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut convs = Vec::new();
        let mut cin = 1;
        let (mut h, mut w) = (cfg.crop_h, cfg.crop_w);
        for (i, &c) in cfg.channels.iter().enumerate() {
            convs.push(Conv::new(
                store,
                &format!("wordcls.conv{}", i + 1),
                cin,
                c,
                3,
                2,
                rng,
            )?);
            cin = c;
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        let flat = cin * h * w;
        let fc_w = store.add_he("wordcls.fc.weight", [flat, num_tags], flat, rng)?;
        let fc_b = store.add_const("wordcls.fc.bias", [num_tags], 0.0)?;
        Ok(WordClassifier {
            convs,
            fc_w,
            fc_b,
            cfg: cfg.clone(),
            flat,
        })
    }

    pub fn config(&self) -> &WordClassifierConfig {
        &self.cfg
    }

    /// `crops` is `[N, 1, crop_h, crop_w]`; returns `[N, tags]` logits.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        crops: Var,
    ) -> Result<Var> {
        let n = g.shape(crops)[0];
        let mut h = crops;
        for c in &self.convs {
            let y = c.apply(g, store, h)?;
            h = g.relu(y);
        }
        let flat = g.reshape(h, [n, self.flat])?;
        let w = g.param(store, self.fc_w);
        let b = g.param(store, self.fc_b);
        g.linear(flat, w, Some(b))
    }
}

/// Build `[N, 1, crop_h, crop_w]` crops for `boxes` from a page image.
pub fn word_crops(
    image: &[f32],
    h: usize,
    w: usize,
    boxes: &[BBox],
    cfg: &WordClassifierConfig,
) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(boxes.len() * cfg.crop_h * cfg.crop_w);
    for b in boxes {
        out.extend(crop_resize(image, h, w, b, cfg.crop_h, cfg.crop_w)?);
    }
    Ok(out)
}
