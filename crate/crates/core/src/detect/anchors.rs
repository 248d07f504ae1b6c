use alloc::vec::Vec;

use super::geometry::BBox;
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    pub level: usize,
}

/// Anchor lattice over all pyramid levels.
///
/// Order: level, then row, then column, then ratio (outer) and scale (inner),
/// which matches the channel layout of the head outputs after
/// `[1, A*K, H, W] -> [H, W, A, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
    /// `(rows, cols)` per level.
    pub level_shapes: Vec<(usize, usize)>,
    pub strides: Vec<usize>,
    pub per_location: usize,
    corners: Vec<(f64, f64, f64, f64)>,
}

/// Ratios `h / w`.
pub const DEFAULT_RATIOS: [f64; 3] = [0.5, 1.0, 2.0];

pub fn default_scales() -> [f64; 3] {
    [1.0, libm::pow(2.0, 1.0 / 3.0), libm::pow(2.0, 2.0 / 3.0)]
}

/// Anchor size for one ratio and scale: area `(base * scale)^2` is kept,
/// `W = base * scale * sqrt(1 / r)`, `H = base * scale * sqrt(r)`.
pub fn anchor_size(base: f64, ratio: f64, scale: f64) -> (f64, f64) {
    let s = base * scale;
    (s * libm::sqrt(1.0 / ratio), s * libm::sqrt(ratio))
}

impl AnchorSet {
    /// `base` is the anchor size on the stride-8 level; level `l` uses
    /// `base * stride_l / 8`.
    pub fn generate(
        level_shapes: &[(usize, usize)],
        strides: &[usize],
        base: f64,
        ratios: &[f64],
        scales: &[f64],
    ) -> Result<Self> {
        if level_shapes.len() != strides.len() {
            bail!(
                InvalidArgument,
                "{} level shapes for {} strides",
                level_shapes.len(),
                strides.len()
            );
        }
        if ratios.is_empty() || scales.is_empty() {
            bail!(
                InvalidArgument,
                "anchor ratios and scales must be non-empty"
            );
        }
        let mut sizes = Vec::with_capacity(ratios.len() * scales.len());
        for &r in ratios {
            for &s in scales {
                sizes.push(anchor_size(1.0, r, s));
            }
        }
        let mut anchors = Vec::new();
        for (level, (&(rows, cols), &stride)) in level_shapes.iter().zip(strides).enumerate() {
            if rows == 0 || cols == 0 {
                bail!(
                    InvalidArgument,
                    "pyramid level {level} is empty ({rows}x{cols})"
                );
            }
            let lb = base * stride as f64 / 8.0;
            for y in 0..rows {
                for x in 0..cols {
                    let cx = (x as f64 + 0.5) * stride as f64;
                    let cy = (y as f64 + 0.5) * stride as f64;
                    for &(w, h) in &sizes {
                        anchors.push(Anchor {
                            bbox: BBox::new(cx, cy, w * lb, h * lb),
                            level,
                        });
                    }
                }
            }
        }
        let corners = anchors.iter().map(|a| a.bbox.corners()).collect();
        Ok(AnchorSet {
            anchors,
            level_shapes: level_shapes.to_vec(),
            strides: strides.to_vec(),
            per_location: sizes.len(),
            corners,
        })
    }

    /// Standard defaults (base 32, three ratios, three octave scales) for an
    /// `h x w` input and the five pyramid strides.
    pub fn for_image(h: usize, w: usize, strides: &[usize], base: f64) -> Result<Self> {
        let shapes: Vec<_> = strides
            .iter()
            .map(|&s| (h.div_ceil(s), w.div_ceil(s)))
            .collect();
        Self::generate(&shapes, strides, base, &DEFAULT_RATIOS, &default_scales())
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn level_len(&self, level: usize) -> usize {
        let (r, c) = self.level_shapes[level];
        r * c * self.per_location
    }

    pub(crate) fn corners(&self) -> &[(f64, f64, f64, f64)] {
        &self.corners
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_and_ratio_sizes() {
        assert_eq!(anchor_size(32.0, 1.0, 1.0), (32.0, 32.0));
        let (w, h) = anchor_size(32.0, 2.0, 1.0);
        assert!((w - 22.627).abs() < 1e-3 && (h - 45.255).abs() < 1e-3);
        assert!((w * h - 1024.0).abs() < 1e-9);
    }

    #[test]
    fn lattice_count() {
        let set = AnchorSet::for_image(256, 256, &[8, 16, 32, 64, 128], 32.0).unwrap();
        assert_eq!(set.level_len(0), 32 * 32 * 9);
        assert_eq!(set.anchors.iter().filter(|a| a.level == 0).count(), 9216);
    }

    #[test]
    fn empty_level_rejected() {
        assert!(
            AnchorSet::generate(&[(0, 4)], &[8], 32.0, &DEFAULT_RATIOS, &default_scales()).is_err()
        );
    }
}
