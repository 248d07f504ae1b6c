use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Largest magnitude accepted for `dw`/`dh` when decoding; keeps `exp` finite
/// for untrained heads.
pub const DELTA_CLAMP: f64 = 4.135; // ln(1000 / 16)

/// Axis-aligned box in center form, pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    /// From top-left corner plus size.
    pub fn from_xywh_corner(x0: f64, y0: f64, w: f64, h: f64) -> Self {
        BBox::new(x0 + w / 2.0, y0 + h / 2.0, w, h)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_corners(a.corners(), b.corners())
}

pub(crate) fn iou_corners(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let iw = a.2.min(b.2) - a.0.max(b.0);
    let ih = a.3.min(b.3) - a.1.max(b.1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = (a.2 - a.0) * (a.3 - a.1) + (b.2 - b.0) * (b.3 - b.1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Offsets of a box relative to an anchor.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BoxDelta {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }
}

/// Inverse of [`decode`]: `dx = (x - X) / W`, `dw = ln(w / W)`.
pub fn encode(gt: &BBox, anchor: &BBox) -> Result<BoxDelta> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        bail!(
            InvalidArgument,
            "box has non-positive size {}x{}",
            gt.w,
            gt.h
        );
    }
    if !(anchor.w > 0.0 && anchor.h > 0.0) {
        bail!(
            InvalidArgument,
            "anchor has non-positive size {}x{}",
            anchor.w,
            anchor.h
        );
    }
    Ok(BoxDelta {
        dx: (gt.x - anchor.x) / anchor.w,
        dy: (gt.y - anchor.y) / anchor.h,
        dw: libm::log(gt.w / anchor.w),
        dh: libm::log(gt.h / anchor.h),
    })
}

/// `x = X + dx W`, `y = Y + dy H`, `w = e^dw W`, `h = e^dh H`.
/// `dw` and `dh` are clamped to `±DELTA_CLAMP`.
pub fn decode(d: &BoxDelta, anchor: &BBox) -> BBox {
    let dw = d.dw.clamp(-DELTA_CLAMP, DELTA_CLAMP);
    let dh = d.dh.clamp(-DELTA_CLAMP, DELTA_CLAMP);
    BBox {
        x: anchor.x + d.dx * anchor.w,
        y: anchor.y + d.dy * anchor.h,
        w: libm::exp(dw) * anchor.w,
        h: libm::exp(dh) * anchor.h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = BBox::from_xywh_corner(0.0, 0.0, 10.0, 10.0);
        let b = BBox::from_xywh_corner(5.0, 0.0, 10.0, 10.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&a, &a), 1.0);
        let c = BBox::from_xywh_corner(20.0, 20.0, 5.0, 5.0);
        assert_eq!(iou(&a, &c), 0.0);
    }

    #[test]
    fn decode_examples() {
        let anchor = BBox::new(10.0, 20.0, 30.0, 40.0);
        assert_eq!(decode(&BoxDelta::default(), &anchor), anchor);
        let d = BoxDelta {
            dx: 0.1,
            dy: 0.2,
            dw: core::f64::consts::LN_2,
            dh: 0.0,
        };
        let b = decode(&d, &anchor);
        for (u, v) in b.to_array().iter().zip([13.0, 28.0, 60.0, 40.0]) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_rejects_degenerate() {
        let anchor = BBox::new(0.0, 0.0, 8.0, 8.0);
        assert!(encode(&BBox::new(0.0, 0.0, 0.0, 3.0), &anchor).is_err());
    }
}
