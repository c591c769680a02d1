//! Normalized axis-aligned boxes, IoU / CIoU, circle conversion and NMS.
//!
//! Boxes are stored in center format `(cx, cy, w, h)` with every field a
//! fraction of the image side. Corner format `(x1, y1, x2, y2)` is available
//! through [`BBox::corners`] and [`BBox::from_corners`].

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::losses::Embedding;

/// Tolerance allowed on box corners outside `[0, 1]`.
pub const CLIP_EPS: f64 = 1e-9;
/// Smallest accepted box side after clipping.
pub const MIN_SIDE: f64 = 1e-6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid annotation: radius {0} must be positive")]
    InvalidRadius(f64),
    #[error("invalid annotation: center ({0}, {1}) outside [0, 1]")]
    InvalidCenter(f64, f64),
    #[error("degenerate box: side {0} below minimum {MIN_SIDE}")]
    Degenerate(f64),
    #[error("box ({cx}, {cy}, {w}, {h}) outside the unit square")]
    OutOfBounds { cx: f64, cy: f64, w: f64, h: f64 },
    #[error("non-finite box coordinate")]
    NonFinite,
}

/// Normalized bounding box in center format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite values, sides below [`MIN_SIDE`]
    /// and corners further than [`CLIP_EPS`] outside the unit square.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if w < MIN_SIDE || h < MIN_SIDE {
            return Err(GeometryError::Degenerate(w.min(h)));
        }
        let inside = cx - w / 2.0 >= -CLIP_EPS
            && cx + w / 2.0 <= 1.0 + CLIP_EPS
            && cy - h / 2.0 >= -CLIP_EPS
            && cy + h / 2.0 <= 1.0 + CLIP_EPS;
        if !inside {
            return Err(GeometryError::OutOfBounds { cx, cy, w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// Clips arbitrary corners to the unit square and builds the box.
    pub fn clipped_from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let (x1, x2) = (x1.clamp(0.0, 1.0), x2.clamp(0.0, 1.0));
        let (y1, y2) = (y1.clamp(0.0, 1.0), y2.clamp(0.0, 1.0));
        Self::from_corners(x1, y1, x2, y2)
    }

    /// Clips a possibly out-of-image center-format box.
    pub fn clipped(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::clipped_from_corners(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn cxcywh(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `[x1, y1, x2, y2]`.
    pub fn corners(&self) -> [f64; 4] {
        corners_of(&self.cxcywh())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;
    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.cxcywh()
    }
}

fn corners_of(b: &[f64; 4]) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

/// A detection: box, optional class embedding and its similarity score.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub bbox: BBox,
    pub embedding: Option<Embedding>,
    pub score: f64,
}

impl Prediction {
    pub fn new(bbox: BBox, score: f64) -> Self {
        Self { bbox, embedding: None, score }
    }
}

/// Square box enclosing a normalized circle, clipped to the image.
pub fn circle_to_box(cx: f64, cy: f64, r: f64) -> Result<BBox, GeometryError> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(GeometryError::InvalidRadius(r));
    }
    if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
        return Err(GeometryError::InvalidCenter(cx, cy));
    }
    BBox::clipped_from_corners(cx - r, cy - r, cx + r, cy + r)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_raw(&a.cxcywh(), &b.cxcywh())
}

fn iou_raw(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let (ca, cb) = (corners_of(a), corners_of(b));
    let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (ca[2] - ca[0]) * (ca[3] - ca[1]);
    let area_b = (cb[2] - cb[0]) * (cb[3] - cb[1]);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// CIoU decomposition of one (prediction, ground truth) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CIoUValue {
    pub iou: f64,
    pub ciou: f64,
    /// Squared distance between the box centers.
    pub center_dist_sq: f64,
    /// Squared diagonal of the smallest enclosing box.
    pub enclosing_diag_sq: f64,
    /// Aspect-ratio consistency term.
    pub v: f64,
    /// Trade-off weight on `v`, held constant when differentiating.
    pub alpha: f64,
}

pub fn ciou(pred: &BBox, gt: &BBox) -> CIoUValue {
    ciou_raw(&pred.cxcywh(), &gt.cxcywh(), None).0
}

/// CIoU on raw `(cx, cy, w, h)` arrays, optionally with a fixed `alpha`.
///
/// Raw arrays may leave the unit square (unsquashed predictions); sides must
/// be positive. The returned gradient is `d ciou / d pred` with `alpha`
/// treated as a constant.
pub fn ciou_raw(pred: &[f64; 4], gt: &[f64; 4], alpha: Option<f64>) -> (CIoUValue, [f64; 4]) {
    let [px, py, pw, ph] = *pred;
    let [gx, gy, gw, gh] = *gt;
    let (p1x, p1y, p2x, p2y) = (px - pw / 2.0, py - ph / 2.0, px + pw / 2.0, py + ph / 2.0);
    let (g1x, g1y, g2x, g2y) = (gx - gw / 2.0, gy - gh / 2.0, gx + gw / 2.0, gy + gh / 2.0);

    // Intersection. d/d(pred corner) is 1 where the pred corner is the binding one.
    let ix_hi = p2x.min(g2x);
    let ix_lo = p1x.max(g1x);
    let iy_hi = p2y.min(g2y);
    let iy_lo = p1y.max(g1y);
    let iw = (ix_hi - ix_lo).max(0.0);
    let ih = (iy_hi - iy_lo).max(0.0);
    let inter = iw * ih;
    // Areas from corners so identical boxes give inter == union exactly.
    let (pw_c, ph_c) = (p2x - p1x, p2y - p1y);
    let union = pw_c * ph_c + (g2x - g1x) * (g2y - g1y) - inter;
    let iou = inter / union;

    // Gradient of inter w.r.t. pred corners (p1x, p1y, p2x, p2y).
    let mut d_inter = [0.0; 4];
    if iw > 0.0 && ih > 0.0 {
        if p1x > g1x {
            d_inter[0] = -ih;
        }
        if p2x < g2x {
            d_inter[2] = ih;
        }
        if p1y > g1y {
            d_inter[1] = -iw;
        }
        if p2y < g2y {
            d_inter[3] = iw;
        }
    }
    let d_inter_c = corner_grad_to_center(&d_inter);
    // d union / d pred = d(pw*ph) - d inter.
    let d_area = [0.0, 0.0, ph_c, pw_c];
    let mut d_iou = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter_c[k];
        d_iou[k] = (d_inter_c[k] * union - inter * d_union) / (union * union);
    }

    // Center distance over enclosing diagonal.
    let rho2 = (px - gx).powi(2) + (py - gy).powi(2);
    let cw = p2x.max(g2x) - p1x.min(g1x);
    let ch = p2y.max(g2y) - p1y.min(g1y);
    let c2 = cw * cw + ch * ch;
    let d_rho2 = [2.0 * (px - gx), 2.0 * (py - gy), 0.0, 0.0];
    // d cw / d pred corners: +1 on p2x if it is the max, -1 on p1x if it is the min.
    let mut d_cw = [0.0; 4];
    if p2x >= g2x {
        d_cw[2] = 1.0;
    }
    if p1x <= g1x {
        d_cw[0] = -1.0;
    }
    let mut d_ch = [0.0; 4];
    if p2y >= g2y {
        d_ch[3] = 1.0;
    }
    if p1y <= g1y {
        d_ch[1] = -1.0;
    }
    let d_cw_c = corner_grad_to_center(&d_cw);
    let d_ch_c = corner_grad_to_center(&d_ch);
    let mut d_dist = [0.0; 4];
    for k in 0..4 {
        let d_c2 = 2.0 * cw * d_cw_c[k] + 2.0 * ch * d_ch_c[k];
        d_dist[k] = (d_rho2[k] * c2 - rho2 * d_c2) / (c2 * c2);
    }

    // Aspect term.
    let k4 = 4.0 / (PI * PI);
    let diff = (gw / gh).atan() - (pw / ph).atan();
    let v = k4 * diff * diff;
    let alpha = alpha.unwrap_or_else(|| {
        if v == 0.0 {
            0.0
        } else {
            v / ((1.0 - iou) + v)
        }
    });
    // d atan(w/h)/dw = h/(w²+h²), d/dh = -w/(w²+h²)
    let denom = pw * pw + ph * ph;
    let d_v = [
        0.0,
        0.0,
        k4 * 2.0 * diff * -(ph / denom),
        k4 * 2.0 * diff * (pw / denom),
    ];

    let dist_term = rho2 / c2;
    let value = iou - dist_term - alpha * v;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = d_iou[k] - d_dist[k] - alpha * d_v[k];
    }
    (
        CIoUValue {
            iou,
            ciou: value,
            center_dist_sq: rho2,
            enclosing_diag_sq: c2,
            v,
            alpha,
        },
        grad,
    )
}

/// Maps a gradient w.r.t. `(x1, y1, x2, y2)` to one w.r.t. `(cx, cy, w, h)`.
fn corner_grad_to_center(g: &[f64; 4]) -> [f64; 4] {
    [
        g[0] + g[2],
        g[1] + g[3],
        (g[2] - g[0]) / 2.0,
        (g[3] - g[1]) / 2.0,
    ]
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited by descending score (equal scores: lower index
/// first). A candidate is dropped when its IoU with any kept box is strictly
/// greater than `iou_threshold`.
pub fn nms(preds: &[Prediction], iou_threshold: f64) -> Vec<Prediction> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| score_order(preds[a].score, preds[b].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| iou(&preds[k].bbox, &preds[i].bbox) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| preds[i].clone()).collect()
}

/// Descending by score.
pub(crate) fn score_order(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}
