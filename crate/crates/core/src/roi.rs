//! Max pooling of box regions from the stride-8 feature map.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::detect::BBox;
use crate::error::{bail, Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Shape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub pool_h: usize,
    pub pool_w: usize,
    /// Stride of the pooled map relative to the image.
    pub stride: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            pool_h: 8,
            pool_w: 32,
            stride: 8,
        }
    }
}

/// Pooled crops of several boxes, `[boxes, C, pool_h, pool_w]`.
#[derive(Clone, Debug)]
pub struct PooledBatch {
    pub var: Var,
    pub boxes: Vec<BBox>,
    /// Flat source index in the feature map for every pooled cell.
    pub argmax: Vec<usize>,
}

/// Feature-cell range `[lo, hi)` covered by bin `i` of `n` over `[a, b)`,
/// clipped to `[0, limit)` and never empty.
fn bin_range(a: f64, b: f64, i: usize, n: usize, limit: usize) -> (usize, usize) {
    let step = (b - a) / n as f64;
    let s = a + step * i as f64;
    let e = a + step * (i + 1) as f64;
    let lo = libm::floor(s).max(0.0) as usize;
    let hi = (libm::ceil(e).max(0.0) as usize).min(limit);
    let lo = lo.min(limit - 1);
    (lo, hi.max(lo + 1))
}

/// Max-pool every box of `boxes` (image coordinates) from `features`
/// (`[1, C, H, W]`) into a fixed `pool_h x pool_w` grid.
///
/// Bins partition the box in feature coordinates; each bin takes the max
/// over the cells it touches, and bins narrower than a cell reuse the
/// nearest cell. The backward pass routes each pooled gradient to its
/// argmax cell.
pub fn pool<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    boxes: &[BBox],
    cfg: &PoolConfig,
) -> Result<PooledBatch> {
    let d = g.shape(features).to_vec();
    if d.len() != 4 || d[0] != 1 {
        bail!(
            Shape,
            "pooling expects a [1,C,H,W] map, got {}",
            g.value(features).shape()
        );
    }
    if cfg.pool_h == 0 || cfg.pool_w == 0 || cfg.stride == 0 {
        bail!(InvalidArgument, "pool size and stride must be positive");
    }
    let (c, h, w) = (d[1], d[2], d[3]);
    let s = cfg.stride as f64;
    let src = g.value(features).data();
    let mut argmax = Vec::with_capacity(boxes.len() * c * cfg.pool_h * cfg.pool_w);
    for (bi, b) in boxes.iter().enumerate() {
        let (x0, y0, x1, y1) = b.corners();
        let (fx0, fy0, fx1, fy1) = (x0 / s, y0 / s, x1 / s, y1 / s);
        if !(fx1 > 0.0 && fy1 > 0.0 && fx0 < w as f64 && fy0 < h as f64) || !b.is_valid() {
            return Err(Error::BoxOutside { index: bi });
        }
        let rows: Vec<_> = (0..cfg.pool_h)
            .map(|i| bin_range(fy0, fy1, i, cfg.pool_h, h))
            .collect();
        let cols: Vec<_> = (0..cfg.pool_w)
            .map(|j| bin_range(fx0, fx1, j, cfg.pool_w, w))
            .collect();
        for ch in 0..c {
            let base = ch * h * w;
            for &(r0, r1) in &rows {
                for &(c0, c1) in &cols {
                    let mut best = base + r0 * w + c0;
                    for y in r0..r1 {
                        for x in c0..c1 {
                            let i = base + y * w + x;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    argmax.push(best);
                }
            }
        }
    }
    let shape = Shape(alloc::vec![boxes.len(), c, cfg.pool_h, cfg.pool_w]);
    let var = g.route(features, argmax.clone(), shape)?;
    Ok(PooledBatch {
        var,
        boxes: boxes.to_vec(),
        argmax,
    })
}
