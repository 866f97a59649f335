//! Normalized bounding boxes and the IoU / GIoU overlap kernels.
//!
//! Boxes are stored in center format (cx, cy, w, h) because that is what the
//! regression heads emit; all area math converts to corner form in one place.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in center format, image-normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

const MIN_SIDE: f64 = 1e-12;

impl NormBox {
    /// Builds a box, clamping the center into [0,1] and sides into (0,1].
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        NormBox {
            cx: cx.clamp(0.0, 1.0),
            cy: cy.clamp(0.0, 1.0),
            w: w.clamp(MIN_SIDE, 1.0),
            h: h.clamp(MIN_SIDE, 1.0),
        }
    }

    /// (x1, y1, x2, y2) corner form; x1 <= x2 and y1 <= y2 by construction.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        NormBox::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Intersection over union in [0,1]. Degenerate zero-area inputs yield 0, not NaN.
pub fn iou(a: &NormBox, b: &NormBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Generalized IoU in [-1,1]: IoU minus the normalized empty slack of the
/// smallest enclosing box.
pub fn giou(a: &NormBox, b: &NormBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let enclose = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    if enclose <= 0.0 {
        return inter / union;
    }
    inter / union - (enclose - union) / enclose
}

/// Smallest axis-aligned box covering both inputs. Built without clamping so
/// the cover is exact even when an input's corners poke past the image edge.
pub fn union_box(a: &NormBox, b: &NormBox) -> NormBox {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let (x1, y1) = (ax1.min(bx1), ay1.min(by1));
    let (x2, y2) = (ax2.max(bx2), ay2.max(by2));
    NormBox {
        cx: (x1 + x2) / 2.0,
        cy: (y1 + y2) / 2.0,
        w: x2 - x1,
        h: y2 - y1,
    }
}

fn intersection_area(a: &NormBox, b: &NormBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih
}
