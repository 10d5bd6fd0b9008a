//! Center-based bounding boxes and window geometry.
//!
//! A [`BBox`] is `(x, y, w, h)` with `(x, y)` the *center*. The same
//! struct serves two coordinate systems: absolute frame pixels (dataset
//! ground truth, tracker output) and normalized `[0, 1]` search-window
//! coordinates (head predictions); [`Window`] converts between them.

use serde::{Deserialize, Serialize};

/// Axis-aligned box, center-based.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    /// Center x.
    pub x: f64,
    /// Center y.
    pub y: f64,
    /// Width.
    pub w: f64,
    /// Height.
    pub h: f64,
}

impl BBox {
    /// Builds a box from center and size.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    /// Corner coordinates `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        )
    }

    /// Area (`w * h`, zero-floored).
    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// The geometric scale `sqrt(w * h)` used to size crops.
    pub fn scale(&self) -> f64 {
        (self.w * self.h).max(0.0).sqrt()
    }

    /// Intersection-over-union with another box. Every term derives
    /// from corner differences so self-overlap is exactly 1 even when
    /// `x ± w/2` rounds — mixing corner-based intersection with `w * h`
    /// areas would leave identical boxes a few ulps short.
    pub fn iou(&self, other: &BBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        let a = ((ax1 - ax0) * (ay1 - ay0)).max(0.0);
        let b = ((bx1 - bx0) * (by1 - by0)).max(0.0);
        let union = a + b - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Generalized IoU: `IoU - (C - union) / C` with `C` the area of the
    /// smallest enclosing box. Falls in `[-1, 1]`. Corner-consistent
    /// like [`BBox::iou`].
    pub fn giou(&self, other: &BBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        let a = ((ax1 - ax0) * (ay1 - ay0)).max(0.0);
        let b = ((bx1 - bx0) * (by1 - by0)).max(0.0);
        let union = a + b - inter;
        let cw = ax1.max(bx1) - ax0.min(bx0);
        let ch = ay1.max(by1) - ay0.min(by0);
        let enclosing = cw * ch;
        if union <= 0.0 || enclosing <= 0.0 {
            return 0.0;
        }
        inter / union - (enclosing - union) / enclosing
    }

    /// Distance between centers.
    pub fn center_distance(&self, other: &BBox) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    /// Clamps the center into `[0, w] x [0, h]` bounds.
    pub fn clamp_center(&self, max_x: f64, max_y: f64) -> BBox {
        BBox { x: self.x.clamp(0.0, max_x), y: self.y.clamp(0.0, max_y), ..*self }
    }
}

/// A square crop window in frame coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    /// Center x in frame pixels.
    pub cx: f64,
    /// Center y in frame pixels.
    pub cy: f64,
    /// Side length in frame pixels.
    pub side: f64,
}

impl Window {
    /// The window of side `scale * box.scale()` centered on a box.
    pub fn around(b: &BBox, scale: f64) -> Self {
        Window { cx: b.x, cy: b.y, side: (scale * b.scale()).max(1.0) }
    }

    /// Converts a frame-coordinate box to window-normalized `[0, 1]`
    /// coordinates.
    pub fn normalize(&self, b: &BBox) -> BBox {
        BBox {
            x: (b.x - (self.cx - self.side / 2.0)) / self.side,
            y: (b.y - (self.cy - self.side / 2.0)) / self.side,
            w: b.w / self.side,
            h: b.h / self.side,
        }
    }

    /// Converts a window-normalized box back to frame coordinates.
    pub fn denormalize(&self, b: &BBox) -> BBox {
        BBox {
            x: self.cx - self.side / 2.0 + b.x * self.side,
            y: self.cy - self.side / 2.0 + b.y * self.side,
            w: b.w * self.side,
            h: b.h * self.side,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_identical_boxes_is_one() {
        let b = BBox::new(3.0, 4.0, 2.0, 5.0);
        assert!((b.iou(&b) - 1.0).abs() < 1e-12);
        assert!((b.giou(&b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_of_disjoint_boxes_is_zero_and_giou_negative() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(10.0, 0.0, 2.0, 2.0);
        assert_eq!(a.iou(&b), 0.0);
        assert!(a.giou(&b) < 0.0);
    }

    #[test]
    fn half_overlap_hand_case() {
        // Two 2x2 boxes offset by 1 in x: intersection 1x2=2, union 6.
        let a = BBox::new(1.0, 1.0, 2.0, 2.0);
        let b = BBox::new(2.0, 1.0, 2.0, 2.0);
        assert!((a.iou(&b) - 2.0 / 6.0).abs() < 1e-12);
        // Enclosing box is 3x2=6 == union, so GIoU == IoU here.
        assert!((a.giou(&b) - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn window_round_trip() {
        let b = BBox::new(40.0, 30.0, 10.0, 8.0);
        let win = Window::around(&b, 4.0);
        assert!((win.side - 4.0 * (80.0f64).sqrt()).abs() < 1e-12);
        let norm = win.normalize(&b);
        // Centered box normalizes to the window center.
        assert!((norm.x - 0.5).abs() < 1e-12);
        assert!((norm.y - 0.5).abs() < 1e-12);
        let back = win.denormalize(&norm);
        assert!((back.x - b.x).abs() < 1e-9);
        assert!((back.w - b.w).abs() < 1e-9);
    }

    #[test]
    fn giou_is_symmetric_and_bounded() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let mut random_box = || {
                BBox::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(0.1..4.0),
                    rng.gen_range(0.1..4.0),
                )
            };
            let a = random_box();
            let b = random_box();
            assert!((a.giou(&b) - b.giou(&a)).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&a.giou(&b)));
            assert!(a.giou(&b) <= a.iou(&b) + 1e-12);
        }
    }
}
