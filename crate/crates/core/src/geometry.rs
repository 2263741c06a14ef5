//! Axis-aligned boxes in continuous pixel coordinates (pixel `k` spans `[k, k+1)`).

use serde::{Deserialize, Serialize};

/// Box given by its top-left corner and size, the OTB convention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Rect { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Rect {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    /// From corners `(x1, y1)`–`(x2, y2)`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Rect {
            x: x1,
            y: y1,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn cx(&self) -> f64 {
        self.x + self.w / 2.0
    }

    pub fn cy(&self) -> f64 {
        self.y + self.h / 2.0
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn intersection(&self, other: &Rect) -> f64 {
        let iw = (self.x2().min(other.x2()) - self.x.max(other.x)).max(0.0);
        let ih = (self.y2().min(other.y2()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    pub fn center_distance(&self, other: &Rect) -> f64 {
        (self.cx() - other.cx()).hypot(self.cy() - other.cy())
    }

    /// Clips the box to `[0, width] × [0, height]`.
    pub fn clamp_to(&self, width: f64, height: f64) -> Rect {
        let x1 = self.x.clamp(0.0, width);
        let y1 = self.y.clamp(0.0, height);
        let x2 = self.x2().clamp(0.0, width);
        let y2 = self.y2().clamp(0.0, height);
        Rect::from_corners(x1, y1, x2, y2)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn compute_iou(a: &Rect, b: &Rect) -> f64 {
    if a == b {
        return if a.area() > 0.0 { 1.0 } else { 0.0 };
    }
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_examples() {
        let a = Rect::new(3.0, 4.0, 5.0, 6.0);
        assert_eq!(compute_iou(&a, &a), 1.0);
        assert_eq!(compute_iou(&a, &Rect::new(20.0, 20.0, 2.0, 2.0)), 0.0);
        let p = Rect::from_corners(0.0, 0.0, 2.0, 2.0);
        let q = Rect::from_corners(1.0, 1.0, 3.0, 3.0);
        assert!((compute_iou(&p, &q) - 1.0 / 7.0).abs() < 1e-15);
        let z = Rect::new(1.0, 1.0, 0.0, 0.0);
        assert_eq!(compute_iou(&z, &z), 0.0);
    }

    /// Counts pixel-grid cells at resolution `1/n` covered by each box.
    fn grid_iou(a: &Rect, b: &Rect, n: usize) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        let lo = a.x.min(b.x).min(a.y).min(b.y);
        let hi = a.x2().max(b.x2()).max(a.y2()).max(b.y2());
        let steps = ((hi - lo) * n as f64).ceil() as usize;
        for i in 0..steps {
            for j in 0..steps {
                let px = lo + (j as f64 + 0.5) / n as f64;
                let py = lo + (i as f64 + 0.5) / n as f64;
                let ina = px >= a.x && px < a.x2() && py >= a.y && py < a.y2();
                let inb = px >= b.x && px < b.x2() && py >= b.y && py < b.y2();
                inter += (ina && inb) as usize;
                union += (ina || inb) as usize;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_matches_pixel_counting() {
        let p = Rect::from_corners(0.0, 0.0, 2.0, 2.0);
        let q = Rect::from_corners(1.0, 1.0, 3.0, 3.0);
        assert!((grid_iou(&p, &q, 200) - compute_iou(&p, &q)).abs() < 1e-9);
        let r = Rect::new(0.25, 0.5, 1.5, 2.0);
        assert!((grid_iou(&p, &r, 400) - compute_iou(&p, &r)).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(
            ax in -50.0f64..50.0, ay in -50.0f64..50.0, aw in 0.0f64..40.0, ah in 0.0f64..40.0,
            bx in -50.0f64..50.0, by in -50.0f64..50.0, bw in 0.0f64..40.0, bh in 0.0f64..40.0,
        ) {
            let a = Rect::new(ax, ay, aw, ah);
            let b = Rect::new(bx, by, bw, bh);
            let ab = compute_iou(&a, &b);
            prop_assert_eq!(ab, compute_iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            if aw > 0.0 && ah > 0.0 {
                prop_assert_eq!(compute_iou(&a, &a), 1.0);
            }
            if ab == 1.0 {
                prop_assert!((a.x - b.x).abs() < 1e-9 && (a.w - b.w).abs() < 1e-9);
            }
        }
    }
}
