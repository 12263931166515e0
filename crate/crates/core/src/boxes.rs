//! Axis-aligned boxes in normalized `[0, 1]` image coordinates, plus the
//! IoU and delta-encoding helpers shared by proposals, ground truth and
//! detections.

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl NormBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&x0)
            || !(0.0..=1.0).contains(&y0)
            || !(0.0..=1.0).contains(&x1)
            || !(0.0..=1.0).contains(&y1)
            || x0 >= x1
            || y0 >= y1
        {
            return Err(Error::Invalid(format!("invalid box ({x0}, {y0}, {x1}, {y1})")));
        }
        Ok(NormBox { x0, y0, x1, y1 })
    }

    pub fn whole_image() -> Self {
        NormBox { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) * 0.5, (self.y0 + self.y1) * 0.5)
    }

    pub fn iou(&self, other: &NormBox) -> f64 {
        let ix0 = self.x0.max(other.x0);
        let iy0 = self.y0.max(other.y0);
        let ix1 = self.x1.min(other.x1);
        let iy1 = self.y1.min(other.y1);
        let iw = (ix1 - ix0).max(0.0);
        let ih = (iy1 - iy0).max(0.0);
        let inter = iw * ih;
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    /// Clamp into the unit square, keeping a tiny minimum extent so the
    /// result stays a valid box.
    pub fn clamped(&self) -> NormBox {
        const MIN_EXTENT: f64 = 1e-4;
        let x0 = self.x0.clamp(0.0, 1.0 - MIN_EXTENT);
        let y0 = self.y0.clamp(0.0, 1.0 - MIN_EXTENT);
        let x1 = self.x1.clamp(x0 + MIN_EXTENT, 1.0);
        let y1 = self.y1.clamp(y0 + MIN_EXTENT, 1.0);
        NormBox { x0, y0, x1, y1 }
    }

    pub fn as_tuple(&self) -> (f64, f64, f64, f64) {
        (self.x0, self.y0, self.x1, self.y1)
    }
}

/// Faster-R-CNN-style box deltas `(dx, dy, dw, dh)` of a target relative to
/// an anchor: center offsets scaled by anchor size and log size ratios.
pub fn encode_deltas(target: &NormBox, anchor: &NormBox) -> [f64; 4] {
    let (tx, ty) = target.center();
    let (ax, ay) = anchor.center();
    [
        (tx - ax) / anchor.width(),
        (ty - ay) / anchor.height(),
        (target.width() / anchor.width()).ln(),
        (target.height() / anchor.height()).ln(),
    ]
}

pub fn decode_deltas(deltas: &[f64; 4], anchor: &NormBox) -> NormBox {
    // Clamp the log-size terms so exploded regression outputs cannot produce
    // astronomically large boxes.
    const MAX_LOG: f64 = 4.0;
    let (ax, ay) = anchor.center();
    let cx = ax + deltas[0] * anchor.width();
    let cy = ay + deltas[1] * anchor.height();
    let w = anchor.width() * deltas[2].clamp(-MAX_LOG, MAX_LOG).exp();
    let h = anchor.height() * deltas[3].clamp(-MAX_LOG, MAX_LOG).exp();
    NormBox { x0: cx - w * 0.5, y0: cy - h * 0.5, x1: cx + w * 0.5, y1: cy + h * 0.5 }.clamped()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(NormBox::new(0.5, 0.1, 0.5, 0.9).is_err());
        assert!(NormBox::new(0.2, 0.3, 0.1, 0.9).is_err());
        assert!(NormBox::new(-0.1, 0.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = NormBox::new(0.1, 0.1, 0.4, 0.4).unwrap();
        let b = NormBox::new(0.6, 0.6, 0.9, 0.9).unwrap();
        assert!((a.iou(&a) - 1.0).abs() < 1e-12);
        assert_eq!(a.iou(&b), 0.0);
        assert_eq!(b.iou(&a), 0.0);
    }

    #[test]
    fn delta_roundtrip_recovers_target() {
        let anchor = NormBox::new(0.2, 0.3, 0.6, 0.7).unwrap();
        let target = NormBox::new(0.25, 0.2, 0.8, 0.65).unwrap();
        let decoded = decode_deltas(&encode_deltas(&target, &anchor), &anchor);
        assert!((decoded.x0 - target.x0).abs() < 1e-6);
        assert!((decoded.y0 - target.y0).abs() < 1e-6);
        assert!((decoded.x1 - target.x1).abs() < 1e-6);
        assert!((decoded.y1 - target.y1).abs() < 1e-6);
    }
}
