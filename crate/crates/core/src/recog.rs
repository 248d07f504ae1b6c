//! Word transcription branch: convolutional column classifier over pooled
//! box features, CTC loss and greedy decoding.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Conv;
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::scalar::{log_add, Scalar};

/// Loss reported for a target that no alignment can produce.
pub const CTC_INFEASIBLE_LOSS: f64 = 1e4;

/// Character `'-'` stands for the blank in printed paths.
pub const BLANK_CHAR: char = '-';

/// Ordered symbols; class 0 is the blank, symbol `i` is class `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Alphabet {
    pub fn new(symbols: &str) -> Result<Self> {
        let mut v: Vec<char> = Vec::new();
        for c in symbols.chars() {
            if c == BLANK_CHAR {
                bail!(InvalidArgument, "'{BLANK_CHAR}' is reserved for the blank");
            }
            if v.contains(&c) {
                bail!(InvalidArgument, "duplicate symbol {c:?}");
            }
            v.push(c);
        }
        if v.is_empty() {
            bail!(InvalidArgument, "empty alphabet");
        }
        Ok(Alphabet { symbols: v })
    }

    /// Lowercase letters and digits.
    pub fn default_latin() -> Self {
        Self::new("abcdefghijklmnopqrstuvwxyz0123456789").expect("valid")
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Number of classes including the blank.
    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| match self.symbols.iter().position(|&s| s == c) {
                Some(i) => Ok(i + 1),
                None => Err(crate::Error::InvalidArgument(format!(
                    "symbol {c:?} not in alphabet"
                ))),
            })
            .collect()
    }

    /// Class indices to text; the blank and unknown classes are skipped.
    pub fn decode(&self, classes: &[usize]) -> String {
        classes
            .iter()
            .filter_map(|&c| c.checked_sub(1).and_then(|i| self.symbols.get(i)))
            .collect()
    }

    pub fn as_string(&self) -> String {
        self.symbols.iter().collect()
    }
}

/// Merge runs of equal classes, then drop blanks (class 0).
pub fn collapse_classes(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != 0 {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// Collapse a printed path where `'-'` is the blank: `"hheeel-llo"` gives `"hello"`.
pub fn collapse(path: &str) -> String {
    let mut out = String::new();
    let mut prev = None;
    for c in path.chars() {
        if Some(c) != prev && c != BLANK_CHAR {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// Per-step argmax classes of a `[T, K]` log-probability lattice, collapsed.
pub fn greedy_decode<T: Scalar>(lattice: &[T], k: usize) -> Vec<usize> {
    let path: Vec<usize> = lattice
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    collapse_classes(&path)
}

/// Frames needed to emit `target`: one per symbol plus a blank between repeats.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Result of the CTC recursion on one lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcResult {
    pub loss: f64,
    /// d loss / d log-probability, `[T, K]`.
    pub grad: Vec<f64>,
    pub feasible: bool,
}

/// `-ln p(target | lattice)` for a `[T, K]` log-probability lattice via the
/// forward-backward recursion over the blank-extended target, in log space.
///
/// Infeasible targets (too few frames) return [`CTC_INFEASIBLE_LOSS`] with a
/// zero gradient.
pub fn ctc_loss(lattice: &[f64], k: usize, target: &[usize]) -> Result<CtcResult> {
    if k == 0 || !lattice.len().is_multiple_of(k) {
        bail!(
            Shape,
            "lattice of {} values is not a multiple of {k} classes",
            lattice.len()
        );
    }
    if let Some(&c) = target.iter().find(|&&c| c == 0 || c >= k) {
        bail!(
            InvalidArgument,
            "target class {c} is the blank or out of range {k}"
        );
    }
    let t_len = lattice.len() / k;
    if t_len == 0 || min_frames(target) > t_len {
        return Ok(CtcResult {
            loss: CTC_INFEASIBLE_LOSS,
            grad: vec![0.0; lattice.len()],
            feasible: false,
        });
    }
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(0);
    for &c in target {
        ext.push(c);
        ext.push(0);
    }
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let lp = |t: usize, s: usize| lattice[t * k + ext[s]];
    let skip_ok = |s: usize| s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                a = log_add(a, alpha[(t - 1) * s_len + s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = a + lp(t, s);
        }
    }
    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                b = log_add(b, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && ext[s + 2] != 0 && ext[s + 2] != ext[s] {
                b = log_add(b, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = b + lp(t, s);
        }
    }
    let end = (t_len - 1) * s_len;
    let log_p = if s_len > 1 {
        log_add(alpha[end + s_len - 1], alpha[end + s_len - 2])
    } else {
        alpha[end]
    };
    if !log_p.is_finite() {
        bail!(NonFinite, "CTC path probability underflowed");
    }
    // alpha * beta double-counts the emission at (t, s)
    let mut grad = vec![0.0; lattice.len()];
    for t in 0..t_len {
        let mut occ = vec![ninf; k];
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s] - lp(t, s);
            occ[ext[s]] = log_add(occ[ext[s]], ab);
        }
        for c in 0..k {
            if occ[c] > ninf {
                grad[t * k + c] = -libm::exp(occ[c] - log_p);
            }
        }
    }
    Ok(CtcResult {
        loss: -log_p,
        grad,
        feasible: true,
    })
}

/// Counters kept across CTC evaluations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CtcStats {
    pub evaluated: usize,
    pub infeasible: usize,
}

/// Mean CTC loss over a `[B, T, K]` batch of lattices as a graph node.
pub fn ctc_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    lattices: Var,
    targets: &[Vec<usize>],
    stats: &mut CtcStats,
) -> Result<Var> {
    let d = g.shape(lattices).to_vec();
    if d.len() != 3 || d[0] != targets.len() {
        bail!(
            Shape,
            "{} lattices for {} targets",
            g.value(lattices).shape(),
            targets.len()
        );
    }
    let (b, t, k) = (d[0], d[1], d[2]);
    let data: Vec<f64> = g
        .value(lattices)
        .data()
        .iter()
        .map(|v| v.to_f64())
        .collect();
    let mut grad = vec![T::ZERO; data.len()];
    let mut total = 0.0;
    let inv = 1.0 / b.max(1) as f64;
    for (i, tgt) in targets.iter().enumerate() {
        let r = ctc_loss(&data[i * t * k..(i + 1) * t * k], k, tgt)?;
        stats.evaluated += 1;
        if !r.feasible {
            stats.infeasible += 1;
        }
        total += r.loss * inv;
        for (gv, rv) in grad[i * t * k..(i + 1) * t * k].iter_mut().zip(&r.grad) {
            *gv = T::from_f64(rv * inv);
        }
    }
    g.fused_loss(lattices, T::from_f64(total), grad)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecogConfig {
    pub channels: usize,
    pub conv_blocks: usize,
}

impl Default for RecogConfig {
    fn default() -> Self {
        RecogConfig {
            channels: 64,
            conv_blocks: 2,
        }
    }
}

impl RecogConfig {
    pub fn full_scale() -> Self {
        RecogConfig {
            channels: 256,
            conv_blocks: 2,
        }
    }
}

/// Conv blocks over the pooled crop, mean over its height, then a per-column
/// fully connected layer to character log-probabilities.
#[derive(Clone, Debug)]
pub struct RecogHead {
    convs: Vec<Conv>,
    fc_w: ParamId,
    fc_b: ParamId,
    num_classes: usize,
}

impl RecogHead {
    pub fn new<T: Scalar>(
        cfg: &RecogConfig,
        in_channels: usize,
        num_classes: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut convs = Vec::new();
        let mut cin = in_channels;
        for i in 0..cfg.conv_blocks {
            convs.push(Conv::new(
                store,
                &format!("recog.conv{}", i + 1),
                cin,
                cfg.channels,
                3,
                1,
                rng,
            )?);
            cin = cfg.channels;
        }
        let fc_w = store.add_he("recog.fc.weight", [cin, num_classes], cin, rng)?;
        let fc_b = store.add_const("recog.fc.bias", [num_classes], 0.0)?;
        Ok(RecogHead {
            convs,
            fc_w,
            fc_b,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `[B, C, pH, pW]` pooled crops to `[B, pW, K]` log-probabilities.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pooled: Var,
    ) -> Result<Var> {
        let mut h = pooled;
        for c in &self.convs {
            let y = c.apply(g, store, h)?;
            h = g.relu(y);
        }
        let m = g.mean_axis(h, 2)?;
        let cols = g.permute(m, &[0, 2, 1])?;
        let w = g.param(store, self.fc_w);
        let b = g.param(store, self.fc_b);
        let logits = g.linear(cols, w, Some(b))?;
        g.log_softmax(logits, 2)
    }
}
