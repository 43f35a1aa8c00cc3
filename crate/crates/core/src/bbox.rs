//! Axis-aligned boxes in pixel coordinates.
//!
//! Boxes are corner-form and half-open: a box `(x1, y1, x2, y2)` covers the
//! pixels `x1 <= x < x2`, `y1 <= y < y2`, so its area is simply
//! `(x2 - x1) * (y2 - y1)`.

use alloc::format;

use crate::error::{CoreError, CoreResult};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> CoreResult<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(CoreError::InvalidBox(format!("non-finite corner in ({x1}, {y1}, {x2}, {y2})")));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(CoreError::InvalidBox(format!("empty box ({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Box from top-left corner plus width and height.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> CoreResult<Self> {
        Self::new(x, y, x + w, y + h)
    }

    /// Box covering a whole `width x height` image.
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x1: 0.0,
            y1: 0.0,
            x2: width as f64,
            y2: height as f64,
        }
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            return 0.0;
        }
        inter / union
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    /// Clip to `[0, width) x [0, height)`; `None` when nothing remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::new(
            self.x1.max(0.0),
            self.y1.max(0.0),
            self.x2.min(width),
            self.y2.min(height),
        )
        .ok()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn scale(&self, sx: f64, sy: f64) -> BBox {
        BBox {
            x1: self.x1 * sx,
            y1: self.y1 * sy,
            x2: self.x2 * sx,
            y2: self.y2 * sy,
        }
    }

    /// Mirror across the vertical center line of an image of the given width.
    pub fn flip_horizontal(&self, width: f64) -> BBox {
        BBox {
            x1: width - self.x2,
            y1: self.y1,
            x2: width - self.x1,
            y2: self.y2,
        }
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn identical_and_disjoint() {
        let a = b(3.0, 4.0, 20.0, 9.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 4.0, 30.0, 9.0)), 0.0);
    }

    #[test]
    fn overlapping_squares() {
        let v = iou(&b(0.0, 0.0, 10.0, 10.0), &b(5.0, 5.0, 15.0, 15.0));
        assert_eq!(v, 25.0 / 175.0);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(BBox::new(1.0, 1.0, 1.0, 5.0).is_err());
        assert!(BBox::from_xywh(60.0, 27.0, 0.0, 304.0).is_err());
        assert!(BBox::new(0.0, f64::NAN, 1.0, 1.0).is_err());
    }

    #[test]
    fn cub_style_xywh() {
        assert_eq!(BBox::from_xywh(60.0, 27.0, 325.0, 304.0).unwrap(), b(60.0, 27.0, 385.0, 331.0));
    }

    #[test]
    fn flip_in_224() {
        assert_eq!(b(10.0, 10.0, 50.0, 50.0).flip_horizontal(224.0), b(174.0, 10.0, 214.0, 50.0));
    }

    #[test]
    fn clip_drops_outside() {
        assert!(b(-10.0, 0.0, -1.0, 5.0).clip(10.0, 10.0).is_none());
        assert_eq!(b(-2.0, 3.0, 4.0, 30.0).clip(10.0, 10.0), Some(b(0.0, 3.0, 4.0, 10.0)));
    }
}
