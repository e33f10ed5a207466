//! Box geometry. Boxes are `[cx, cy, w, h]` everywhere; corner form only
//! appears inside the overlap computations.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

pub type BoxCxCyWh = [f64; 4];

/// `[x0, y0, x1, y1]`.
pub fn to_corners(b: BoxCxCyWh) -> [f64; 4] {
    [b[0] - 0.5 * b[2], b[1] - 0.5 * b[3], b[0] + 0.5 * b[2], b[1] + 0.5 * b[3]]
}

pub fn from_corners(c: [f64; 4]) -> BoxCxCyWh {
    [0.5 * (c[0] + c[2]), 0.5 * (c[1] + c[3]), c[2] - c[0], c[3] - c[1]]
}

fn check(b: &BoxCxCyWh) -> Result<()> {
    if !(b[2] > 0.0 && b[3] > 0.0) || b.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateBox(*b));
    }
    Ok(())
}

fn corner_terms(a: [f64; 4], b: [f64; 4]) -> (f64, f64, f64) {
    let area = |c: [f64; 4]| (c[2] - c[0]) * (c[3] - c[1]);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let enclose = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    (inter, union, enclose)
}

/// Intersection over union of two corner boxes.
pub fn iou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (inter, union, _) = corner_terms(a, b);
    inter / union
}

/// Generalized IoU of two corner-form boxes.
pub fn giou_corners(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    check(&from_corners(a))?;
    check(&from_corners(b))?;
    let (inter, union, enclose) = corner_terms(a, b);
    Ok(inter / union - (enclose - union) / enclose)
}

/// Generalized IoU: `IoU - |C \ (A ∪ B)| / |C|` with `C` the smallest
/// enclosing box. Lies in `[-1, 1]`.
pub fn giou(a: BoxCxCyWh, b: BoxCxCyWh) -> Result<f64> {
    check(&a)?;
    check(&b)?;
    let (inter, union, enclose) = corner_terms(to_corners(a), to_corners(b));
    Ok(inter / union - (enclose - union) / enclose)
}

pub fn iou(a: BoxCxCyWh, b: BoxCxCyWh) -> f64 {
    iou_corners(to_corners(a), to_corners(b))
}

/// Differentiable row-wise GIoU of two `[k, 4]` cxcywh tensors; returns `[k, 1]`.
pub fn giou_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let corners = |g: &mut Graph, x: Var| -> Result<[Var; 4]> {
        let c = g.slice(x, 1, 0, 2)?;
        let s = g.slice(x, 1, 2, 4)?;
        let half = g.scale(s, 0.5)?;
        let lo = g.sub(c, half)?;
        let hi = g.add(c, half)?;
        Ok([
            g.slice(lo, 1, 0, 1)?,
            g.slice(lo, 1, 1, 2)?,
            g.slice(hi, 1, 0, 1)?,
            g.slice(hi, 1, 1, 2)?,
        ])
    };
    let area = |g: &mut Graph, c: &[Var; 4]| -> Result<Var> {
        let w = g.sub(c[2], c[0])?;
        let h = g.sub(c[3], c[1])?;
        g.mul(w, h)
    };
    let ca = corners(g, a)?;
    let cb = corners(g, b)?;

    let ix0 = g.maximum(ca[0], cb[0])?;
    let iy0 = g.maximum(ca[1], cb[1])?;
    let ix1 = g.minimum(ca[2], cb[2])?;
    let iy1 = g.minimum(ca[3], cb[3])?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw)?;
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih)?;
    let inter = g.mul(iw, ih)?;

    let area_a = area(g, &ca)?;
    let area_b = area(g, &cb)?;
    let sum = g.add(area_a, area_b)?;
    let union = g.sub(sum, inter)?;
    let iou = g.div(inter, union)?;

    let ex0 = g.minimum(ca[0], cb[0])?;
    let ey0 = g.minimum(ca[1], cb[1])?;
    let ex1 = g.maximum(ca[2], cb[2])?;
    let ey1 = g.maximum(ca[3], cb[3])?;
    let enclose = area(g, &[ex0, ey0, ex1, ey1])?;
    let gap = g.sub(enclose, union)?;
    let penalty = g.div(gap, enclose)?;
    g.sub(iou, penalty)
}
