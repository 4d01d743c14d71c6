/// Axis-aligned box in centre form, normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `[x1, y1, x2, y2]`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    /// Corner form clipped to the unit square.
    pub fn clipped_corners(&self) -> [f64; 4] {
        self.corners().map(|v| v.clamp(0.0, 1.0))
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Mirror about the vertical centre line.
    pub fn hflip(&self) -> Self {
        BBox {
            cx: 1.0 - self.cx,
            ..*self
        }
    }

    pub fn l1(&self, other: &BBox) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    // areas from the same corners as the overlap so identical boxes give exactly 1
    let area_a = (ax2 - ax1).max(0.0) * (ay2 - ay1).max(0.0);
    let area_b = (bx2 - bx1).max(0.0) * (by2 - by1).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// IoU and its gradient with respect to `(cx, cy, w, h)` of `a`.
pub fn iou_with_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    let area_a = a.w * a.h;
    let area_b = b.w * b.h;
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    let value = inter / union;
    // ∂IoU/∂inter and ∂IoU/∂area_a
    let d_inter = (union + inter) / (union * union);
    let d_area = -inter / (union * union);

    // derivatives of the overlap extents w.r.t. a's corners
    let d_iw_dx2 = if ax2 < bx2 { 1.0 } else { 0.0 };
    let d_iw_dx1 = if ax1 > bx1 { -1.0 } else { 0.0 };
    let d_ih_dy2 = if ay2 < by2 { 1.0 } else { 0.0 };
    let d_ih_dy1 = if ay1 > by1 { -1.0 } else { 0.0 };

    let g_x1 = d_inter * ih * d_iw_dx1;
    let g_x2 = d_inter * ih * d_iw_dx2;
    let g_y1 = d_inter * iw * d_ih_dy1;
    let g_y2 = d_inter * iw * d_ih_dy2;

    // x1 = cx − w/2, x2 = cx + w/2
    let g_cx = g_x1 + g_x2;
    let g_cy = g_y1 + g_y2;
    let g_w = (g_x2 - g_x1) / 2.0 + d_area * a.h;
    let g_h = (g_y2 - g_y1) / 2.0 + d_area * a.w;
    (value, [g_cx, g_cy, g_w, g_h])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.4);
        assert_eq!(iou(&a, &a), 1.0);
        let p = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
        let q = BBox::from_corners(1.0, 1.0, 3.0, 3.0);
        assert_eq!(iou(&p, &q), 1.0 / 7.0);
        let far = BBox::from_corners(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&p, &far), 0.0);
    }

    #[test]
    fn iou_gradient_matches_differences() {
        let a = BBox::new(0.45, 0.52, 0.3, 0.25);
        let b = BBox::new(0.5, 0.5, 0.28, 0.3);
        let (v, g) = iou_with_grad(&a, &b);
        assert!((v - iou(&a, &b)).abs() < 1e-15);
        let eps = 1e-6;
        for k in 0..4 {
            let mut p = a.to_array();
            let mut m = a.to_array();
            p[k] += eps;
            m[k] -= eps;
            let fd = (iou(&BBox::new(p[0], p[1], p[2], p[3]), &b)
                - iou(&BBox::new(m[0], m[1], m[2], m[3]), &b))
                / (2.0 * eps);
            assert!((fd - g[k]).abs() < 1e-6, "component {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn flip_and_clip() {
        let a = BBox::new(0.1, 0.5, 0.4, 0.2);
        assert_eq!(a.hflip().cx, 0.9);
        assert_eq!(a.clipped_corners()[0], 0.0);
        assert!(a.is_valid());
        assert!(!BBox::new(0.5, 0.5, 0.0, 0.1).is_valid());
    }
}
