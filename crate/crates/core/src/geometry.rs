//! Axis-aligned boxes and localization measurements.
//!
//! Gradients are taken with respect to the second box and use right-sided
//! derivatives wherever a `min`/`max` is not differentiable (coincident edges,
//! exactly touching boxes).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Box in corner form `(x1, y1, x2, y2)` with `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.to_array();
        if c.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite box coordinates {c:?}")));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(invalid(format!("degenerate box {c:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    Ok(overlap_with_grad(a, b, false)?.0)
}

/// Generalized IoU, in `[-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    Ok(overlap_with_grad(a, b, true)?.0)
}

/// Gradient of [`giou`] with respect to the coordinates of `b`, `a` held fixed.
pub fn giou_grad(a: &BBox, b: &BBox) -> Result<[f64; 4]> {
    Ok(overlap_with_grad(a, b, true)?.1)
}

/// Gradient of [`iou`] with respect to `b`; same routine as [`giou_grad`]
/// without the enclosing-box term.
pub fn iou_grad(a: &BBox, b: &BBox) -> Result<[f64; 4]> {
    Ok(overlap_with_grad(a, b, false)?.1)
}

/// Similarity derived from the L1 coordinate distance:
/// `max(0, 1 - sum|a_c - b_c| / 4)`.
pub fn l1_score(a: &BBox, b: &BBox) -> Result<f64> {
    Ok(l1_with_grad(a, b)?.0)
}

pub fn l1_score_grad(a: &BBox, b: &BBox) -> Result<[f64; 4]> {
    Ok(l1_with_grad(a, b)?.1)
}

pub(crate) fn l1_with_grad(a: &BBox, b: &BBox) -> Result<(f64, [f64; 4])> {
    a.validate()?;
    b.validate()?;
    let (ac, bc) = (a.to_array(), b.to_array());
    let dist: f64 = ac.iter().zip(&bc).map(|(p, q)| (p - q).abs()).sum();
    let score = 1.0 - dist / 4.0;
    if score <= 0.0 {
        return Ok((0.0, [0.0; 4]));
    }
    let mut grad = [0.0; 4];
    for c in 0..4 {
        // right-sided: moving b_c up from a_c increases the distance
        grad[c] = if bc[c] >= ac[c] { -0.25 } else { 0.25 };
    }
    Ok((score, grad))
}

/// Length of the overlap of `[alo, ahi]` and `[blo, bhi]` and its right-sided
/// derivatives with respect to `blo` and `bhi`.
fn overlap_1d(alo: f64, ahi: f64, blo: f64, bhi: f64) -> (f64, f64, f64) {
    let raw = ahi.min(bhi) - alo.max(blo);
    let d_lo = if blo >= alo { -1.0 } else { 0.0 };
    let d_hi = if bhi < ahi { 1.0 } else { 0.0 };
    if raw > 0.0 {
        (raw, d_lo, d_hi)
    } else if raw == 0.0 {
        (0.0, 0.0, d_hi)
    } else {
        (0.0, 0.0, 0.0)
    }
}

/// Length of the hull of both intervals and its right-sided derivatives.
fn hull_1d(alo: f64, ahi: f64, blo: f64, bhi: f64) -> (f64, f64, f64) {
    let len = ahi.max(bhi) - alo.min(blo);
    let d_lo = if blo < alo { -1.0 } else { 0.0 };
    let d_hi = if bhi >= ahi { 1.0 } else { 0.0 };
    (len, d_lo, d_hi)
}

pub(crate) fn overlap_with_grad(a: &BBox, b: &BBox, enclosing: bool) -> Result<(f64, [f64; 4])> {
    a.validate()?;
    b.validate()?;

    let (iw, diw_lo, diw_hi) = overlap_1d(a.x1, a.x2, b.x1, b.x2);
    let (ih, dih_lo, dih_hi) = overlap_1d(a.y1, a.y2, b.y1, b.y2);
    let inter = iw * ih;
    let d_inter = [diw_lo * ih, dih_lo * iw, diw_hi * ih, dih_hi * iw];

    let (bw, bh) = (b.width(), b.height());
    let d_area_b = [-bh, -bw, bh, bw];
    let union = a.area() + b.area() - inter;

    let mut d_union = [0.0; 4];
    let mut grad = [0.0; 4];
    for c in 0..4 {
        d_union[c] = d_area_b[c] - d_inter[c];
        grad[c] = (d_inter[c] * union - inter * d_union[c]) / (union * union);
    }
    let iou = inter / union;
    if !enclosing {
        return Ok((iou, grad));
    }

    let (cw, dcw_lo, dcw_hi) = hull_1d(a.x1, a.x2, b.x1, b.x2);
    let (ch, dch_lo, dch_hi) = hull_1d(a.y1, a.y2, b.y1, b.y2);
    let hull = cw * ch;
    let d_hull = [dcw_lo * ch, dch_lo * cw, dcw_hi * ch, dch_hi * cw];

    // giou = iou - (hull - union) / hull = iou - 1 + union / hull
    let value = iou - (hull - union) / hull;
    for c in 0..4 {
        grad[c] += (d_union[c] * hull - union * d_hull[c]) / (hull * hull);
    }
    Ok((value, grad))
}
