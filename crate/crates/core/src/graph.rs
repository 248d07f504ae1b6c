//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during a forward pass. Nodes are
//! appended in evaluation order, so walking them backwards is a valid
//! topological order and [`Graph::backward`] visits each node exactly once.
//! Losses with a closed-form gradient (CTC, the detection losses) are recorded
//! as single fused nodes that carry their gradient from the forward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Conv2dSpec {
    pub fn same(k: usize, stride: usize) -> Self {
        Conv2dSpec {
            stride,
            pad_h: (k - 1) / 2,
            pad_w: (k - 1) / 2,
        }
    }
}

enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, T),
    Upsample2x(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat0(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<Option<usize>>,
    },
    Sum(Var),
    WeightedSum(Vec<(Var, T)>),
    /// Sparse routing: `out[i] = x[src[i]]`, gradient scattered back.
    Route {
        x: Var,
        src: Vec<usize>,
    },
    /// Fused loss: gradient w.r.t. `x` already known from the forward pass.
    FusedLoss {
        x: Var,
        grad: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Tape of operations for one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &Shape, b: &Shape) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a} and {b}"))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Constant input; no gradient is propagated into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// Free leaf that receives a gradient (used by gradient checks).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf { param: None }, true)
    }

    /// Leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let trainable = !p.frozen;
        self.push(p.value.clone(), Op::Leaf { param: Some(id) }, trainable)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(shape_err(
                "conv2d",
                self.value(x).shape(),
                self.value(w).shape(),
            ));
        }
        if spec.stride == 0 {
            bail!(InvalidArgument, "conv2d: stride must be positive");
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, kh, kw) = (ws[0], ws[2], ws[3]);
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(shape_err(
                    "conv2d bias",
                    self.value(b).shape(),
                    self.value(w).shape(),
                ));
            }
        }
        if h + 2 * spec.pad_h < kh || wd + 2 * spec.pad_w < kw {
            return Err(shape_err(
                "conv2d (kernel larger than padded input)",
                self.value(x).shape(),
                self.value(w).shape(),
            ));
        }
        let ho = (h + 2 * spec.pad_h - kh) / spec.stride + 1;
        let wo = (wd + 2 * spec.pad_w - kw) / spec.stride + 1;
        let geo = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            ho,
            wo,
            spec,
        };
        let ckk = c * kh * kw;
        let plane = ho * wo;
        let mut out = vec![T::ZERO; n * k * plane];
        let mut cols = vec![T::ZERO; if geo.is_identity() { 0 } else { ckk * plane }];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            let xin = &xv[s * c * h * wd..(s + 1) * c * h * wd];
            let colref: &[T] = if geo.is_identity() {
                xin
            } else {
                geo.im2col(xin, &mut cols);
                &cols
            };
            let o = &mut out[s * k * plane..(s + 1) * k * plane];
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (ki, row) in o.chunks_mut(plane).enumerate() {
                    row.fill(bv[ki]);
                }
            }
            T::gemm(
                k,
                ckk,
                plane,
                T::ONE,
                wv,
                ckk as isize,
                1,
                colref,
                plane as isize,
                1,
                if b.is_some() { T::ONE } else { T::ZERO },
                o,
                plane as isize,
                1,
            );
        }
        let t = Tensor::new([n, k, ho, wo], out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, spec }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(
            v.shape().clone(),
            v.data()
                .iter()
                .map(|&a| if a > T::ZERO { a } else { T::ZERO })
                .collect(),
        )
        .expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(
            v.shape().clone(),
            v.data().iter().map(|&a| sigmoid(a)).collect(),
        )
        .expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    /// Elementwise sum of two equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let t = Tensor::new(va.shape().clone(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().clone(), v.data().iter().map(|&a| a * c).collect())
            .expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    /// Nearest-neighbour 2x upsampling of an `[N, C, H, W]` map.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            bail!(
                Shape,
                "upsample_nearest2x expects [N,C,H,W], got {}",
                self.value(x).shape()
            );
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; nc * 4 * h * w];
        for p in 0..nc {
            let sp = &src[p * h * w..(p + 1) * h * w];
            let op = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                let srow = &sp[(y / 2) * w..(y / 2 + 1) * w];
                let orow = &mut op[y * 2 * w..(y + 1) * 2 * w];
                for (xx, o) in orow.iter_mut().enumerate() {
                    *o = srow[xx / 2];
                }
            }
        }
        let t = Tensor::new([s[0], s[1], 2 * h, 2 * w], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Upsample2x(x), ng))
    }

    /// `x @ w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.is_empty() || ws.len() != 2 || *xs.last().unwrap() != ws[0] {
            return Err(shape_err(
                "linear",
                self.value(x).shape(),
                self.value(w).shape(),
            ));
        }
        let (d, e) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [e] {
                return Err(shape_err(
                    "linear bias",
                    self.value(b).shape(),
                    self.value(w).shape(),
                ));
            }
        }
        let m = self.value(x).len() / d;
        let mut out = vec![T::ZERO; m * e];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(e) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            m,
            d,
            e,
            T::ONE,
            self.value(x).data(),
            d as isize,
            1,
            self.value(w).data(),
            e as isize,
            1,
            if b.is_some() { T::ONE } else { T::ZERO },
            &mut out,
            e as isize,
            1,
        );
        let mut os = xs.clone();
        *os.last_mut().unwrap() = e;
        let t = Tensor::new(os, out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(t, Op::Linear { x, w, b }, ng))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dims = self.shape(x).to_vec();
        if axis >= dims.len() {
            bail!(
                InvalidArgument,
                "log_softmax: axis {axis} out of range for rank {}",
                dims.len()
            );
        }
        let (outer, n, inner) = split_axis(&dims, axis);
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let it = (0..n).map(|j| src[base + j * inner]);
                let lse = crate::scalar::log_sum_exp(it);
                for j in 0..n {
                    out[base + j * inner] = src[base + j * inner] - lse;
                }
            }
        }
        let t = Tensor::new(dims, out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::LogSoftmax { x, axis }, ng))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dims = self.shape(x).to_vec();
        if axis >= dims.len() {
            bail!(
                InvalidArgument,
                "mean_axis: axis {axis} out of range for rank {}",
                dims.len()
            );
        }
        let (outer, n, inner) = split_axis(&dims, axis);
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; outer * inner];
        let inv = T::ONE / T::from_f64(n as f64);
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut od = dims.clone();
        od.remove(axis);
        if od.is_empty() {
            od.push(1);
        }
        let t = Tensor::new(od, out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::MeanAxis { x, axis }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Shape>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let dims = self.shape(x).to_vec();
        let mut seen = vec![false; dims.len()];
        if perm.len() != dims.len()
            || perm
                .iter()
                .any(|&p| p >= dims.len() || core::mem::replace(&mut seen[p], true))
        {
            bail!(
                InvalidArgument,
                "permute: {perm:?} is not a permutation of rank {}",
                dims.len()
            );
        }
        let src_strides = strides(&dims);
        let od: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
        let st: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for_each_index(&od, |idx| {
            let off: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
            out.push(src[off]);
        });
        let t = Tensor::new(od, out)?;
        let ng = self.ng(x);
        Ok(self.push(
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            ng,
        ))
    }

    /// Concatenate along axis 0; trailing dimensions must agree.
    pub fn concat0(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            bail!(InvalidArgument, "concat0 of an empty list");
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in xs {
            let s = self.shape(v);
            if s[1..] != tail[..] {
                return Err(shape_err(
                    "concat0",
                    self.value(first).shape(),
                    self.value(v).shape(),
                ));
            }
            rows += s[0];
            data.extend_from_slice(self.value(v).data());
        }
        let mut od = vec![rows];
        od.extend_from_slice(&tail);
        let t = Tensor::new(od, data)?;
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(t, Op::Concat0(xs.to_vec()), ng))
    }

    /// Select rows of a `[N, D]` tensor; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, rows: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            bail!(
                Shape,
                "gather_rows expects [N,D], got {}",
                self.value(x).shape()
            );
        }
        let d = s[1];
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; rows.len() * d];
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = *r {
                if r >= s[0] {
                    bail!(
                        InvalidArgument,
                        "gather_rows: row {r} out of range {}",
                        s[0]
                    );
                }
                out[i * d..(i + 1) * d].copy_from_slice(&src[r * d..(r + 1) * d]);
            }
        }
        let t = Tensor::new([rows.len(), d], out)?;
        let ng = self.ng(x);
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// `sum_i w_i * x_i` for scalar inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut s = T::ZERO;
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                bail!(
                    Shape,
                    "weighted_sum expects scalars, got {}",
                    self.value(v).shape()
                );
            }
            s += self.value(v).item() * w;
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), ng))
    }

    /// Record `out[i] = x.data[src[i]]` with the given output shape.
    pub(crate) fn route(&mut self, x: Var, src: Vec<usize>, shape: Shape) -> Result<Var> {
        let xv = self.value(x).data();
        let data: Vec<T> = src.iter().map(|&i| xv[i]).collect();
        let t = Tensor::new(shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Route { x, src }, ng))
    }

    /// Record a scalar loss whose gradient w.r.t. `x` is already known.
    pub(crate) fn fused_loss(&mut self, x: Var, value: T, grad: Vec<T>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            bail!(
                Shape,
                "fused loss gradient has {} entries for {}",
                grad.len(),
                self.value(x).shape()
            );
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(value), Op::FusedLoss { x, grad }, ng))
    }

    /// Mean negative log-likelihood of `[N, K]` log-probabilities at the
    /// given targets; rows with `None` are masked out. Zero when every row is masked.
    pub fn nll_loss(&mut self, logp: Var, targets: &[Option<usize>]) -> Result<Var> {
        let d = self.shape(logp).to_vec();
        if d.len() != 2 || d[0] != targets.len() {
            bail!(
                Shape,
                "nll_loss: {} log-probabilities for {} targets",
                self.value(logp).shape(),
                targets.len()
            );
        }
        let k = d[1];
        let count = targets.iter().filter(|t| t.is_some()).count();
        let mut grad = vec![T::ZERO; d[0] * k];
        let mut total = T::ZERO;
        if count > 0 {
            let inv = T::ONE / T::from_f64(count as f64);
            let v = self.value(logp).data();
            for (i, t) in targets.iter().enumerate() {
                if let Some(c) = *t {
                    if c >= k {
                        bail!(InvalidArgument, "nll_loss: target {c} out of range {k}");
                    }
                    total -= v[i * k + c] * inv;
                    grad[i * k + c] = -inv;
                }
            }
        }
        self.fused_loss(logp, total, grad)
    }

    /// Propagate d(loss)/d(node) for every node reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            bail!(
                Shape,
                "backward needs a scalar loss, got {}",
                self.value(loss).shape()
            );
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop_node(node, &gout, &mut grads)?;
            }
            grads[idx] = Some(gout);
        }
        Ok(Grads { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.ng(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::ZERO; n]))
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv2d { x, w, b, spec } => self.conv2d_backward(*x, *w, *b, *spec, gout, grads),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(g) = self.acc(grads, *x) {
                    for ((gi, &go), &xi) in g.iter_mut().zip(gout).zip(xv) {
                        if xi > T::ZERO {
                            *gi += go;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                if let Some(g) = self.acc(grads, *x) {
                    for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(yv) {
                        *gi += go * y * (T::ONE - y);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.acc(grads, v) {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(g) = self.acc(grads, *x) {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go * *c;
                    }
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x).to_vec();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                if let Some(g) = self.acc(grads, *x) {
                    for p in 0..nc {
                        let gp = &gout[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut g[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(y / 2) * w + xx / 2] += gp[y * 2 * w + xx];
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w).to_vec();
                let (d, e) = (ws[0], ws[1]);
                let m = self.value(*x).len() / d;
                if let Some(b) = b {
                    if let Some(g) = self.acc(grads, *b) {
                        for row in gout.chunks(e) {
                            for (gi, &go) in g.iter_mut().zip(row) {
                                *gi += go;
                            }
                        }
                    }
                }
                let wv = self.value(*w).data();
                if let Some(g) = self.acc(grads, *x) {
                    // dx[m,d] += dy[m,e] * w^T[e,d]
                    T::gemm(
                        m,
                        e,
                        d,
                        T::ONE,
                        gout,
                        e as isize,
                        1,
                        wv,
                        1,
                        e as isize,
                        T::ONE,
                        g,
                        d as isize,
                        1,
                    );
                }
                let xv = self.value(*x).data();
                if let Some(g) = self.acc(grads, *w) {
                    // dw[d,e] += x^T[d,m] * dy[m,e]
                    T::gemm(
                        d,
                        m,
                        e,
                        T::ONE,
                        xv,
                        1,
                        d as isize,
                        gout,
                        e as isize,
                        1,
                        T::ONE,
                        g,
                        e as isize,
                        1,
                    );
                }
            }
            Op::LogSoftmax { x, axis } => {
                let dims = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&dims, *axis);
                let yv = node.value.data();
                if let Some(g) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let s: T = (0..n).map(|j| gout[base + j * inner]).sum();
                            for j in 0..n {
                                let k = base + j * inner;
                                g[k] += gout[k] - yv[k].exp() * s;
                            }
                        }
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let dims = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&dims, *axis);
                let inv = T::ONE / T::from_f64(n as f64);
                if let Some(g) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for j in 0..n {
                            let dst = &mut g[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (d, &go) in dst.iter_mut().zip(&gout[o * inner..(o + 1) * inner]) {
                                *d += go * inv;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
            }
            Op::Permute { x, perm } => {
                let dims = self.shape(*x).to_vec();
                let src_strides = strides(&dims);
                let od: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
                let st: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
                if let Some(g) = self.acc(grads, *x) {
                    let mut k = 0;
                    for_each_index(&od, |idx| {
                        let off: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
                        g[off] += gout[k];
                        k += 1;
                    });
                }
            }
            Op::Concat0(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).len();
                    if let Some(g) = self.acc(grads, v) {
                        for (gi, &go) in g.iter_mut().zip(&gout[off..off + n]) {
                            *gi += go;
                        }
                    }
                    off += n;
                }
            }
            Op::GatherRows { x, rows } => {
                let d = self.shape(*x)[1];
                if let Some(g) = self.acc(grads, *x) {
                    for (i, r) in rows.iter().enumerate() {
                        if let Some(r) = *r {
                            for (gi, &go) in g[r * d..(r + 1) * d]
                                .iter_mut()
                                .zip(&gout[i * d..(i + 1) * d])
                            {
                                *gi += go;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().for_each(|gi| *gi += gout[0]);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if let Some(g) = self.acc(grads, v) {
                        g[0] += gout[0] * w;
                    }
                }
            }
            Op::Route { x, src } => {
                if let Some(g) = self.acc(grads, *x) {
                    for (&s, &go) in src.iter().zip(gout) {
                        g[s] += go;
                    }
                }
            }
            Op::FusedLoss { x, grad } => {
                if let Some(g) = self.acc(grads, *x) {
                    for (gi, &gl) in g.iter_mut().zip(grad) {
                        *gi += gl * gout[0];
                    }
                }
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = (h + 2 * spec.pad_h - kh) / spec.stride + 1;
        let wo = (wd + 2 * spec.pad_w - kw) / spec.stride + 1;
        let geo = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            ho,
            wo,
            spec,
        };
        let plane = ho * wo;
        let ckk = c * kh * kw;
        if let Some(b) = b {
            if let Some(g) = self.acc(grads, b) {
                for s in 0..n {
                    for (ki, gi) in g.iter_mut().enumerate() {
                        let row = &gout[(s * k + ki) * plane..(s * k + ki + 1) * plane];
                        *gi += row.iter().copied().sum::<T>();
                    }
                }
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let need_w = self.ng(w);
        let need_x = self.ng(x);
        let mut cols = vec![T::ZERO; if geo.is_identity() { 0 } else { ckk * plane }];
        let mut dcols = vec![T::ZERO; if need_x { ckk * plane } else { 0 }];
        for s in 0..n {
            let go = &gout[s * k * plane..(s + 1) * k * plane];
            if need_w {
                let xin = &xv[s * c * h * wd..(s + 1) * c * h * wd];
                let colref: &[T] = if geo.is_identity() {
                    xin
                } else {
                    geo.im2col(xin, &mut cols);
                    &cols
                };
                let g = self.acc(grads, w).expect("weight needs grad");
                // dW[k, ckk] += dy[k, plane] * cols^T[plane, ckk]
                T::gemm(
                    k,
                    plane,
                    ckk,
                    T::ONE,
                    go,
                    plane as isize,
                    1,
                    colref,
                    1,
                    plane as isize,
                    T::ONE,
                    g,
                    ckk as isize,
                    1,
                );
            }
            if need_x {
                // dcols[ckk, plane] = W^T[ckk, k] * dy[k, plane]
                T::gemm(
                    ckk,
                    k,
                    plane,
                    T::ONE,
                    wv,
                    1,
                    ckk as isize,
                    go,
                    plane as isize,
                    1,
                    T::ZERO,
                    &mut dcols,
                    plane as isize,
                    1,
                );
                let g = self.acc(grads, x).expect("input needs grad");
                let gx = &mut g[s * c * h * wd..(s + 1) * c * h * wd];
                if geo.is_identity() {
                    for (a, &d) in gx.iter_mut().zip(&dcols) {
                        *a += d;
                    }
                } else {
                    geo.col2im(&dcols, gx);
                }
            }
        }
    }

    /// Move accumulated parameter gradients into the store (adding to any
    /// gradient already present there).
    pub fn accumulate_param_grads(&self, grads: &Grads<T>, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if !node.needs_grad {
                    continue;
                }
                let p = store.get_mut(id);
                let slot = p.grad.get_or_insert_with(|| vec![T::ZERO; p.value.len()]);
                if let Some(g) = grads.grads[i].as_deref() {
                    for (s, &v) in slot.iter_mut().zip(g) {
                        *s += v;
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(a: T) -> T {
    if a >= T::ZERO {
        T::ONE / (T::ONE + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::ONE + e)
    }
}

fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

fn for_each_index(dims: &[usize], mut f: impl FnMut(&[usize])) {
    if dims.contains(&0) {
        return;
    }
    let mut idx = vec![0; dims.len()];
    loop {
        f(&idx);
        let mut a = dims.len();
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < dims[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl ConvGeom {
    fn is_identity(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.spec.stride == 1
            && self.spec.pad_h == 0
            && self.spec.pad_w == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kj - pad_w` is in range.
    fn valid_ox(&self, kj: usize) -> (usize, usize) {
        let s = self.spec.stride;
        let pw = self.spec.pad_w;
        let lo = if kj >= pw { 0 } else { (pw - kj).div_ceil(s) };
        // need ox*s + kj - pw <= w-1  =>  ox <= (w - 1 + pw - kj) / s
        let hi = if self.w + pw > kj {
            ((self.w - 1 + pw - kj) / s + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let plane = self.ho * self.wo;
        let s = self.spec.stride;
        for ci in 0..self.c {
            let xc = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_ox(kj);
                    for oy in 0..self.ho {
                        let d = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let iy = (oy * s + ki) as isize - self.spec.pad_h as isize;
                        if iy < 0 || iy >= self.h as isize {
                            d.fill(T::ZERO);
                            continue;
                        }
                        let xr = &xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        d[..lo].fill(T::ZERO);
                        d[hi..].fill(T::ZERO);
                        let base = kj as isize - self.spec.pad_w as isize;
                        if s == 1 {
                            let start = (lo as isize + base) as usize;
                            d[lo..hi].copy_from_slice(&xr[start..start + (hi - lo)]);
                        } else {
                            for ox in lo..hi {
                                d[ox] = xr[(ox as isize * s as isize + base) as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], gx: &mut [T]) {
        let plane = self.ho * self.wo;
        let s = self.spec.stride;
        for ci in 0..self.c {
            let gc = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_ox(kj);
                    let base = kj as isize - self.spec.pad_w as isize;
                    for oy in 0..self.ho {
                        let iy = (oy * s + ki) as isize - self.spec.pad_h as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let gr = &mut gc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let sr = &src[oy * self.wo..(oy + 1) * self.wo];
                        for ox in lo..hi {
                            gr[(ox as isize * s as isize + base) as usize] += sr[ox];
                        }
                    }
                }
            }
        }
    }
}
