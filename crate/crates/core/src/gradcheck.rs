//! Central finite-difference verification of reverse-mode gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::ResBlock;
use crate::detect::BBox;
use crate::error::{Error, Result};
use crate::graph::{Conv2dSpec, Graph, Var};
use crate::ner::{tag_loss, NerConfig, SeqTagger};
use crate::param::ParamStore;
use crate::recog::{ctc_loss_node, CtcStats};
use crate::roi::{pool, PoolConfig};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1e-3, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Parameter and flat index where the largest error occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = f(&mut g, store)?;
    let v = g.value(l).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(alloc::format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compare reverse-mode gradients of the scalar built by `f` against
/// `(f(p + eps) - f(p - eps)) / 2 eps` for every trainable scalar in `store`.
///
/// `max_per_param` limits how many entries of each parameter are probed
/// (evenly strided); `None` probes all of them.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    f: F,
    eps: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let l = f(&mut g, store)?;
    if !g.value(l).item().is_finite() {
        return Err(Error::NonFinite("loss at the base point".into()));
    }
    let grads = g.backward(l)?;
    g.accumulate_param_grads(&grads, store);
    drop(g);

    let analytic: Vec<Option<Vec<f64>>> = store.iter().map(|p| p.grad.clone()).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let id = crate::param::ParamId(pi);
        if store.get(id).frozen {
            continue;
        }
        let n = store.get(id).value.len();
        let stride = match max_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for k in (0..n).step_by(stride) {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + eps;
            let fp = eval(store, &f)?;
            store.get_mut(id).value.data_mut()[k] = orig - eps;
            let fm = eval(store, &f)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = grad.as_ref().map_or(0.0, |g| g[k]);
            let denom = 1e-3f64.max(a.abs()).max(numeric.abs());
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((store.get(id).name.clone(), k));
                }
            }
        }
    }
    store.zero_grads();
    Ok(report)
}

/// One entry of [`standard_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], r: f64) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.random_range(-r..r))
}

/// Dot product of `y` with fixed random weights, so every element of `y`
/// reaches the loss with a different coefficient.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let n = g.value(y).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = g.constant(uniform(&mut rng, &[n, 1], 1.0));
    let flat = g.reshape(y, [1, n])?;
    let out = g.linear(flat, c, None)?;
    Ok(g.sum(out))
}

/// Gradient checks of the network building blocks in 64-bit: convolution,
/// linear layer, residual block, RoI pooling, CTC and the sequential tagger.
pub fn standard_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    const EPS: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut s = ParamStore::<f64>::new();
    s.add("x", uniform(&mut rng, &[1, 2, 7, 6], 1.0))?;
    s.add("w", uniform(&mut rng, &[3, 2, 3, 3], 0.5))?;
    s.add("b", uniform(&mut rng, &[3], 0.5))?;
    let rep = grad_check(
        &mut s,
        |g, s| {
            let x = g.param(s, s.id("x").unwrap());
            let w = g.param(s, s.id("w").unwrap());
            let b = g.param(s, s.id("b").unwrap());
            let y1 = g.conv2d(x, w, Some(b), Conv2dSpec::same(3, 1))?;
            let y2 = g.conv2d(x, w, None, Conv2dSpec::same(3, 2))?;
            let a1 = g.sigmoid(y1);
            let p1 = probe(g, a1, seed)?;
            let p2 = probe(g, y2, seed + 1)?;
            g.weighted_sum(&[(p1, 1.0), (p2, 1.0)])
        },
        EPS,
        None,
    )?;
    out.push(SuiteCase {
        name: "conv",
        tolerance: 1e-4,
        report: rep,
    });

    let mut s = ParamStore::<f64>::new();
    s.add("x", uniform(&mut rng, &[5, 4], 1.0))?;
    s.add("w", uniform(&mut rng, &[4, 3], 1.0))?;
    s.add("b", uniform(&mut rng, &[3], 1.0))?;
    let rep = grad_check(
        &mut s,
        |g, s| {
            let x = g.param(s, s.id("x").unwrap());
            let w = g.param(s, s.id("w").unwrap());
            let b = g.param(s, s.id("b").unwrap());
            let y = g.linear(x, w, Some(b))?;
            let l = g.log_softmax(y, 1)?;
            probe(g, l, seed + 2)
        },
        EPS,
        None,
    )?;
    out.push(SuiteCase {
        name: "linear",
        tolerance: 1e-4,
        report: rep,
    });

    let mut s = ParamStore::<f64>::new();
    let blk = ResBlock::new(&mut s, "block", 2, 3, 2, &mut rng)?;
    s.add("x", uniform(&mut rng, &[1, 2, 8, 8], 1.0))?;
    let rep = grad_check(
        &mut s,
        |g, s| {
            let x = g.param(s, s.id("x").unwrap());
            let y = blk.apply(g, s, x)?;
            probe(g, y, seed + 3)
        },
        EPS,
        None,
    )?;
    out.push(SuiteCase {
        name: "residual-block",
        tolerance: 1e-4,
        report: rep,
    });

    let mut s = ParamStore::<f64>::new();
    // distinct values keep every max away from ties
    let mut vals: Vec<f64> = (0..2 * 6 * 9).map(|i| i as f64 * 0.01).collect();
    vals.shuffle(&mut rng);
    s.add("f", Tensor::new([1, 2, 6, 9], vals)?)?;
    let boxes = [
        BBox::new(30.0, 20.0, 40.0, 30.0),
        BBox::new(36.0, 24.0, 30.0, 20.0),
        BBox::new(60.0, 40.0, 5.0, 3.0),
    ];
    let pc = PoolConfig {
        pool_h: 3,
        pool_w: 5,
        stride: 8,
    };
    let rep = grad_check(
        &mut s,
        |g, s| {
            let f = g.param(s, s.id("f").unwrap());
            let p = pool(g, f, &boxes, &pc)?;
            probe(g, p.var, seed + 4)
        },
        1e-4,
        None,
    )?;
    out.push(SuiteCase {
        name: "roi-pool",
        tolerance: 1e-4,
        report: rep,
    });

    let mut s = ParamStore::<f64>::new();
    s.add("x", uniform(&mut rng, &[2, 6, 3], 1.0))?;
    s.add("w", uniform(&mut rng, &[3, 4], 1.0))?;
    s.add("b", uniform(&mut rng, &[4], 0.5))?;
    let targets = vec![vec![1, 2], vec![3, 3]];
    let rep = grad_check(
        &mut s,
        |g, s| {
            let x = g.param(s, s.id("x").unwrap());
            let w = g.param(s, s.id("w").unwrap());
            let b = g.param(s, s.id("b").unwrap());
            let z = g.linear(x, w, Some(b))?;
            let lp = g.log_softmax(z, 2)?;
            ctc_loss_node(g, lp, &targets, &mut CtcStats::default())
        },
        EPS,
        None,
    )?;
    out.push(SuiteCase {
        name: "ctc",
        tolerance: 1e-3,
        report: rep,
    });

    let mut s = ParamStore::<f64>::new();
    let cfg = NerConfig {
        max_len: 6,
        hidden: 6,
        kernel: 3,
    };
    let tagger = SeqTagger::new(&cfg, 2 * 3, 5, &mut s, &mut rng)?;
    s.add("pooled", uniform(&mut rng, &[4, 2, 2, 3], 1.0))?;
    let tags = [Some(1), Some(4), None, Some(0)];
    let rep = grad_check(
        &mut s,
        |g, s| {
            let p = g.param(s, s.id("pooled").unwrap());
            let o = tagger.forward(g, s, p, &[3, 1, 0, 2])?;
            tag_loss(g, o.logits, &tags)
        },
        EPS,
        None,
    )?;
    out.push(SuiteCase {
        name: "ner-head",
        tolerance: 1e-4,
        report: rep,
    });

    Ok(out)
}
