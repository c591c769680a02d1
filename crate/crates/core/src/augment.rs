//! Two-operation augmentation sub-policies applied jointly to a raster and
//! its boxes.
//!
//! Geometric operations resample the raster with bilinear interpolation and
//! zero fill. Boxes are mapped by transforming their corners, taking the
//! axis-aligned hull and clipping to the image; a box keeps less than
//! [`SURVIVAL_AREA_FRACTION`] of its hull area after clipping is dropped.

use std::collections::BTreeMap;
use std::fmt;

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::pixel_span;
use crate::geometry::BBox;

pub const SURVIVAL_AREA_FRACTION: f64 = 0.25;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AugmentError {
    #[error("policy table line {line}: {message}")]
    Registry { line: usize, message: String },
    #[error("policy table is invalid: {0}")]
    Policy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    TranslateX,
    Equalize,
    BBoxOnlyRotate,
    Scale,
    ShearY,
    Rotate,
    ColorJitter,
    NoOp,
}

impl OpKind {
    const ALL: [OpKind; 8] = [
        OpKind::TranslateX,
        OpKind::Equalize,
        OpKind::BBoxOnlyRotate,
        OpKind::Scale,
        OpKind::ShearY,
        OpKind::Rotate,
        OpKind::ColorJitter,
        OpKind::NoOp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::TranslateX => "TranslateX",
            Self::Equalize => "Equalize",
            Self::BBoxOnlyRotate => "BBox_Only_Rotate",
            Self::Scale => "Scale",
            Self::ShearY => "ShearY",
            Self::Rotate => "Rotate",
            Self::ColorJitter => "ColorJitter",
            Self::NoOp => "NoOp",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Magnitude range of an operation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Magnitude {
    None,
    /// Uniform draw from `[lo, hi]`.
    Range(f64, f64),
    /// Color jitter strengths; factors are drawn from `[1 - s, 1 + s]`.
    Jitter { brightness: f64, contrast: f64, saturation: f64, hue: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpSpec {
    pub kind: OpKind,
    /// Activation probability; `None` for operations that never run.
    pub probability: Option<f64>,
    pub magnitude: Magnitude,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubPolicy {
    pub ops: [OpSpec; 2],
}

impl SubPolicy {
    pub fn is_identity(&self) -> bool {
        self.ops.iter().all(|o| o.kind == OpKind::NoOp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRegistry {
    pub sub_policies: Vec<SubPolicy>,
}

const DEFAULT_TABLE: &str = "\
# sub_policy | op | probability | range
1 | TranslateX | 0.6 | -0.4,0.4
1 | Equalize | 0.8 | -
2 | BBox_Only_Rotate | 0.2 | -180,180
2 | Scale | 1.0 | -0.3,0.3
3 | ShearY | 0.6 | -10,10
3 | BBox_Only_Rotate | 0.6 | -180,180
4 | Rotate | 0.6 | -30,30
4 | ColorJitter | 1.0 | br=0.6,co=0.5,sa=0.5,hu=0.1
5 | NoOp | - | -
5 | NoOp | - | -
";

impl Default for PolicyRegistry {
    fn default() -> Self {
        Self::parse(DEFAULT_TABLE).expect("built-in policy table is valid")
    }
}

fn parse_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_magnitude(kind: OpKind, s: &str) -> Result<Magnitude, String> {
    let s = s.trim();
    match kind {
        OpKind::Equalize | OpKind::NoOp => {
            if s == "-" {
                Ok(Magnitude::None)
            } else {
                Err(format!("{kind} takes no range, got {s:?}"))
            }
        }
        OpKind::ColorJitter => {
            let mut vals = BTreeMap::new();
            for part in s.split(',') {
                let (k, v) = part.split_once('=').ok_or_else(|| format!("expected key=value, got {part:?}"))?;
                let v = parse_number(v).filter(|v| *v >= 0.0).ok_or_else(|| format!("bad value in {part:?}"))?;
                vals.insert(k.trim().to_string(), v);
            }
            let mut get = |k: &str| vals.remove(k).ok_or_else(|| format!("ColorJitter needs {k}="));
            let m = Magnitude::Jitter { brightness: get("br")?, contrast: get("co")?, saturation: get("sa")?, hue: get("hu")? };
            if let Some(k) = vals.keys().next() {
                return Err(format!("unknown ColorJitter key {k:?}"));
            }
            Ok(m)
        }
        _ => {
            let (lo, hi) = s.split_once(',').ok_or_else(|| format!("{kind} needs a range lo,hi"))?;
            let (lo, hi) = parse_number(lo).zip(parse_number(hi)).ok_or_else(|| format!("bad range {s:?}"))?;
            if lo > hi {
                return Err(format!("empty range {s:?}"));
            }
            Ok(Magnitude::Range(lo, hi))
        }
    }
}

fn format_number(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

impl PolicyRegistry {
    /// Parses a `sub_policy | op | probability | range` table. Blank lines
    /// and `#` comments are ignored; sub-policies must be numbered 1, 2, …
    /// with exactly two operations each.
    pub fn parse(text: &str) -> Result<Self, AugmentError> {
        let mut grouped: BTreeMap<usize, Vec<OpSpec>> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| AugmentError::Registry { line, message };
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = content.split('|').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(err(format!("expected 4 '|'-separated fields, got {}", fields.len())));
            }
            let index: usize = fields[0].parse().map_err(|_| err(format!("bad sub-policy number {:?}", fields[0])))?;
            let kind = OpKind::from_name(fields[1]).ok_or_else(|| err(format!("unknown operation {:?}", fields[1])))?;
            let probability = match fields[2] {
                "-" => None,
                p => Some(parse_number(p).filter(|p| (0.0..=1.0).contains(p)).ok_or_else(|| err(format!("bad probability {p:?}")))?),
            };
            if probability.is_none() && kind != OpKind::NoOp {
                return Err(err(format!("{kind} needs a probability")));
            }
            let magnitude = parse_magnitude(kind, fields[3]).map_err(err)?;
            grouped.entry(index).or_default().push(OpSpec { kind, probability, magnitude });
        }
        let mut sub_policies = Vec::with_capacity(grouped.len());
        for (expected, (index, ops)) in (1..).zip(grouped) {
            if index != expected {
                return Err(AugmentError::Policy(format!("sub-policy {expected} is missing")));
            }
            let ops: [OpSpec; 2] = ops
                .try_into()
                .map_err(|v: Vec<OpSpec>| AugmentError::Policy(format!("sub-policy {index} has {} operations, expected 2", v.len())))?;
            sub_policies.push(SubPolicy { ops });
        }
        if sub_policies.is_empty() {
            return Err(AugmentError::Policy("no sub-policies".into()));
        }
        Ok(Self { sub_policies })
    }

    /// The registry as a table accepted by [`Self::parse`].
    pub fn to_table(&self) -> String {
        let mut out = String::from("# sub_policy | op | probability | range\n");
        for (i, sp) in self.sub_policies.iter().enumerate() {
            for op in &sp.ops {
                let p = op.probability.map_or("-".to_string(), format_number);
                let range = match op.magnitude {
                    Magnitude::None => "-".to_string(),
                    Magnitude::Range(lo, hi) => format!("{},{}", format_number(lo), format_number(hi)),
                    Magnitude::Jitter { brightness, contrast, saturation, hue } => {
                        format!("br={brightness},co={contrast},sa={saturation},hu={hue}")
                    }
                };
                out.push_str(&format!("{} | {} | {} | {}\n", i + 1, op.kind, p, range));
            }
        }
        out
    }
}

/// `x' = a·x + b·y + c`, `y' = d·x + e·y + f` in continuous pixel
/// coordinates (pixel `i` covers `[i, i + 1)`).
#[derive(Debug, Clone, Copy, PartialEq)]
struct Affine {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    e: f64,
    f: f64,
}

impl Affine {
    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a * x + self.b * y + self.c, self.d * x + self.e * y + self.f)
    }

    fn inverse(&self) -> Affine {
        let det = self.a * self.e - self.b * self.d;
        let (a, b, d, e) = (self.e / det, -self.b / det, -self.d / det, self.a / det);
        Affine { a, b, c: -(a * self.c + b * self.f), d, e, f: -(d * self.c + e * self.f) }
    }

    /// Linear map `[[a, b], [d, e]]` about the point `(px, py)`.
    fn about(a: f64, b: f64, d: f64, e: f64, px: f64, py: f64) -> Affine {
        Affine { a, b, c: px - a * px - b * py, d, e, f: py - d * px - e * py }
    }

    /// Counter-clockwise rotation as displayed (y axis pointing down).
    fn rotation(degrees: f64, px: f64, py: f64) -> Affine {
        let (s, c) = degrees.to_radians().sin_cos();
        Self::about(c, s, -s, c, px, py)
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear sample at continuous coordinates; neighbors outside the raster read 0.
fn sample_zero_fill(img: &GrayImage, sx: f64, sy: f64) -> f64 {
    let (u, v) = (sx - 0.5, sy - 0.5);
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = (u - x0, v - y0);
    let (w, h) = (img.width() as i64, img.height() as i64);
    let px = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= w || y >= h {
            0.0
        } else {
            img.get_pixel(x as u32, y as u32)[0] as f64
        }
    };
    let (x0, y0) = (x0 as i64, y0 as i64);
    let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1, y0) * fx;
    let bottom = px(x0, y0 + 1) * (1.0 - fx) + px(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn warp(img: &GrayImage, forward: &Affine) -> GrayImage {
    let inv = forward.inverse();
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        let (sx, sy) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
        Luma([to_u8(sample_zero_fill(img, sx, sy))])
    })
}

/// Hull of the transformed corners, clipped; `None` when the clipped box
/// keeps less than [`SURVIVAL_AREA_FRACTION`] of the hull area.
fn transform_box(b: &BBox, forward: &Affine, width: u32, height: u32) -> Option<BBox> {
    let (w, h) = (width as f64, height as f64);
    let [x1, y1, x2, y2] = b.corners();
    let corners = [(x1, y1), (x2, y1), (x1, y2), (x2, y2)].map(|(x, y)| {
        let (tx, ty) = forward.apply(x * w, y * h);
        (tx / w, ty / h)
    });
    let min_x = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let max_x = corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let max_y = corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let hull_area = (max_x - min_x) * (max_y - min_y);
    let (cx1, cx2) = (min_x.clamp(0.0, 1.0), max_x.clamp(0.0, 1.0));
    let (cy1, cy2) = (min_y.clamp(0.0, 1.0), max_y.clamp(0.0, 1.0));
    let clipped_area = (cx2 - cx1) * (cy2 - cy1);
    if !(clipped_area >= SURVIVAL_AREA_FRACTION * hull_area) {
        return None;
    }
    BBox::from_corners(cx1, cy1, cx2, cy2).ok()
}

fn geometric(pixels: &GrayImage, boxes: &[BBox], forward: &Affine) -> (GrayImage, Vec<Option<BBox>>) {
    let out = warp(pixels, forward);
    let boxes = boxes.iter().map(|b| transform_box(b, forward, pixels.width(), pixels.height())).collect();
    (out, boxes)
}

fn unchanged(pixels: &GrayImage, boxes: &[BBox]) -> (GrayImage, Vec<Option<BBox>>) {
    (pixels.clone(), boxes.iter().copied().map(Some).collect())
}

/// Shifts content left by `magnitude · width` (negative values shift right).
/// Returned boxes are aligned with the input; `None` marks a dropped box.
pub fn translate_x(pixels: &GrayImage, boxes: &[BBox], magnitude: f64) -> (GrayImage, Vec<Option<BBox>>) {
    if magnitude == 0.0 {
        return unchanged(pixels, boxes);
    }
    let shift = -magnitude * pixels.width() as f64;
    geometric(pixels, boxes, &Affine { a: 1.0, b: 0.0, c: shift, d: 0.0, e: 1.0, f: 0.0 })
}

/// Rotation about the image center, counter-clockwise for positive angles.
pub fn rotate(pixels: &GrayImage, boxes: &[BBox], degrees: f64) -> (GrayImage, Vec<Option<BBox>>) {
    if degrees == 0.0 {
        return unchanged(pixels, boxes);
    }
    let (cx, cy) = (pixels.width() as f64 / 2.0, pixels.height() as f64 / 2.0);
    geometric(pixels, boxes, &Affine::rotation(degrees, cx, cy))
}

/// Vertical shear about the image center: `y' = y - tan(θ)·(x - cx)`.
pub fn shear_y(pixels: &GrayImage, boxes: &[BBox], degrees: f64) -> (GrayImage, Vec<Option<BBox>>) {
    if degrees == 0.0 {
        return unchanged(pixels, boxes);
    }
    let (cx, cy) = (pixels.width() as f64 / 2.0, pixels.height() as f64 / 2.0);
    let t = degrees.to_radians().tan();
    geometric(pixels, boxes, &Affine::about(1.0, 0.0, -t, 1.0, cx, cy))
}

/// Zoom about the image center by `1 + offset`.
pub fn scale(pixels: &GrayImage, boxes: &[BBox], offset: f64) -> (GrayImage, Vec<Option<BBox>>) {
    if offset == 0.0 {
        return unchanged(pixels, boxes);
    }
    let s = 1.0 + offset;
    let (cx, cy) = (pixels.width() as f64 / 2.0, pixels.height() as f64 / 2.0);
    geometric(pixels, boxes, &Affine::about(s, 0.0, 0.0, s, cx, cy))
}

/// Rotates the content of each box about the box center, leaving box
/// coordinates and all pixels outside the boxes untouched. Samples falling
/// outside a box are clamped to its border. Boxes are processed in order.
pub fn bbox_only_rotate(pixels: &GrayImage, boxes: &[BBox], degrees: f64) -> GrayImage {
    let mut out = pixels.clone();
    if degrees == 0.0 {
        return out;
    }
    let (w, h) = (pixels.width() as f64, pixels.height() as f64);
    for b in boxes {
        let (xs, ys) = pixel_span(b, pixels.width(), pixels.height());
        let inv = Affine::rotation(degrees, b.cx() * w, b.cy() * h).inverse();
        let snapshot = out.clone();
        let (lo_x, hi_x) = (xs.start as f64, (xs.end - 1) as f64);
        let (lo_y, hi_y) = (ys.start as f64, (ys.end - 1) as f64);
        for y in ys.clone() {
            for x in xs.clone() {
                let (sx, sy) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
                let u = (sx - 0.5).clamp(lo_x, hi_x);
                let v = (sy - 0.5).clamp(lo_y, hi_y);
                let (x0, y0) = (u.floor(), v.floor());
                let (fx, fy) = (u - x0, v - y0);
                let (x0, y0) = (x0 as u32, y0 as u32);
                let (x1, y1) = ((x0 + 1).min(xs.end - 1), (y0 + 1).min(ys.end - 1));
                let p = |xx: u32, yy: u32| snapshot.get_pixel(xx, yy)[0] as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                out.put_pixel(x, y, Luma([to_u8(top * (1.0 - fy) + bottom * fy)]));
            }
        }
    }
    out
}

/// Histogram equalization: `v ↦ round((cdf(v) - cdf_min) / (N - cdf_min) · 255)`.
/// A single-level raster is returned unchanged.
pub fn equalize(pixels: &GrayImage) -> GrayImage {
    let mut hist = [0u64; 256];
    for p in pixels.pixels() {
        hist[p[0] as usize] += 1;
    }
    let total: u64 = hist.iter().sum();
    let cdf_min = hist.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if total == cdf_min {
        return pixels.clone();
    }
    let mut lut = [0u8; 256];
    let mut cdf = 0u64;
    for (v, &count) in hist.iter().enumerate() {
        cdf += count;
        let scaled = (cdf.saturating_sub(cdf_min)) as f64 / (total - cdf_min) as f64 * 255.0;
        lut[v] = to_u8(scaled);
    }
    let mut out = pixels.clone();
    for p in out.pixels_mut() {
        p[0] = lut[p[0] as usize];
    }
    out
}

/// Contrast about the mean intensity, then brightness, each clamped to `[0, 255]`.
pub fn color_jitter(pixels: &GrayImage, brightness: f64, contrast: f64) -> GrayImage {
    let n = (pixels.width() as u64 * pixels.height() as u64).max(1) as f64;
    let mean = pixels.pixels().map(|p| p[0] as f64).sum::<f64>() / n;
    let mut out = pixels.clone();
    for p in out.pixels_mut() {
        let c = (contrast * (p[0] as f64 - mean) + mean).clamp(0.0, 255.0);
        p[0] = to_u8(brightness * c);
    }
    out
}

/// Log entry for one operation of a sub-policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedOp {
    pub name: String,
    pub applied: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    /// Parameters that have no effect on grayscale rasters.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noop: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub pixels: GrayImage,
    pub boxes: Vec<BBox>,
    /// 1-based sub-policy number.
    pub sub_policy: usize,
    pub applied_ops: Vec<AppliedOp>,
    /// Input indices of dropped boxes.
    pub dropped: Vec<usize>,
}

/// Per-sample generator: one ChaCha stream per sample index.
pub fn sample_rng(base_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index);
    rng
}

fn run_op<R: Rng + ?Sized>(
    spec: &OpSpec,
    pixels: &GrayImage,
    boxes: &[BBox],
    rng: &mut R,
) -> (GrayImage, Vec<Option<BBox>>, AppliedOp) {
    let mut log = AppliedOp { name: spec.kind.name().to_string(), applied: false, params: BTreeMap::new(), noop: vec![] };
    let active = match spec.probability {
        Some(p) => rng.random::<f64>() < p,
        None => false,
    };
    if !active || spec.kind == OpKind::NoOp {
        let (p, b) = unchanged(pixels, boxes);
        return (p, b, log);
    }
    log.applied = true;
    let (out, out_boxes) = match (spec.kind, spec.magnitude) {
        (OpKind::Equalize, _) => (equalize(pixels), boxes.iter().copied().map(Some).collect()),
        (OpKind::ColorJitter, Magnitude::Jitter { brightness, contrast, .. }) => {
            let b = rng.random_range(1.0 - brightness..=1.0 + brightness).max(0.0);
            let c = rng.random_range(1.0 - contrast..=1.0 + contrast).max(0.0);
            log.params.insert("brightness".into(), b);
            log.params.insert("contrast".into(), c);
            log.noop = vec!["saturation".into(), "hue".into()];
            (color_jitter(pixels, b, c), boxes.iter().copied().map(Some).collect())
        }
        (kind, Magnitude::Range(lo, hi)) => {
            let m = rng.random_range(lo..=hi);
            log.params.insert("magnitude".into(), m);
            match kind {
                OpKind::TranslateX => translate_x(pixels, boxes, m),
                OpKind::Rotate => rotate(pixels, boxes, m),
                OpKind::ShearY => shear_y(pixels, boxes, m),
                OpKind::Scale => scale(pixels, boxes, m),
                OpKind::BBoxOnlyRotate => (bbox_only_rotate(pixels, boxes, m), boxes.iter().copied().map(Some).collect()),
                _ => unreachable!("validated by the registry parser"),
            }
        }
        _ => unreachable!("validated by the registry parser"),
    };
    (out, out_boxes, log)
}

/// Applies sub-policy `index` (0-based) of `registry`: op 1, then op 2.
pub fn apply_sub_policy<R: Rng + ?Sized>(
    pixels: &GrayImage,
    boxes: &[BBox],
    registry: &PolicyRegistry,
    index: usize,
    rng: &mut R,
) -> AugmentedSample {
    let sp = &registry.sub_policies[index];
    let mut current = pixels.clone();
    let mut alive: Vec<(usize, BBox)> = boxes.iter().copied().enumerate().collect();
    let mut dropped = Vec::new();
    let mut applied_ops = Vec::with_capacity(2);
    for spec in &sp.ops {
        let input: Vec<BBox> = alive.iter().map(|(_, b)| *b).collect();
        let (out, slots, log) = run_op(spec, &current, &input, rng);
        let mut next = Vec::with_capacity(alive.len());
        for ((src, _), slot) in alive.into_iter().zip(slots) {
            match slot {
                Some(b) => next.push((src, b)),
                None => dropped.push(src),
            }
        }
        alive = next;
        current = out;
        applied_ops.push(log);
    }
    dropped.sort_unstable();
    AugmentedSample {
        pixels: current,
        boxes: alive.into_iter().map(|(_, b)| b).collect(),
        sub_policy: index + 1,
        applied_ops,
        dropped,
    }
}

/// Picks a sub-policy uniformly at random and applies it.
pub fn sample_and_apply<R: Rng + ?Sized>(
    pixels: &GrayImage,
    boxes: &[BBox],
    registry: &PolicyRegistry,
    rng: &mut R,
) -> AugmentedSample {
    let index = rng.random_range(0..registry.sub_policies.len());
    apply_sub_policy(pixels, boxes, registry, index, rng)
}

/// One line of the applied-operations log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentLog {
    pub tile: String,
    pub sub_policy: usize,
    pub ops: Vec<AppliedOp>,
    pub dropped_boxes: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngCore;

    fn gradient_raster(w: u32, h: u32) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| Luma([((x * 7 + y * 13) % 251) as u8]))
    }

    fn some(boxes: &[BBox]) -> Vec<Option<BBox>> {
        boxes.iter().copied().map(Some).collect()
    }

    fn close(a: &BBox, b: &BBox, tol: f64) -> bool {
        a.corners().iter().zip(b.corners()).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn default_registry_matches_table() {
        let r = PolicyRegistry::default();
        assert_eq!(r.sub_policies.len(), 5);
        let sp1 = &r.sub_policies[0].ops;
        assert_eq!((sp1[0].kind, sp1[0].probability, sp1[0].magnitude), (OpKind::TranslateX, Some(0.6), Magnitude::Range(-0.4, 0.4)));
        assert_eq!((sp1[1].kind, sp1[1].probability, sp1[1].magnitude), (OpKind::Equalize, Some(0.8), Magnitude::None));
        let sp2 = &r.sub_policies[1].ops;
        assert_eq!((sp2[0].kind, sp2[0].probability, sp2[0].magnitude), (OpKind::BBoxOnlyRotate, Some(0.2), Magnitude::Range(-180.0, 180.0)));
        assert_eq!((sp2[1].kind, sp2[1].probability, sp2[1].magnitude), (OpKind::Scale, Some(1.0), Magnitude::Range(-0.3, 0.3)));
        let sp3 = &r.sub_policies[2].ops;
        assert_eq!((sp3[0].kind, sp3[0].probability, sp3[0].magnitude), (OpKind::ShearY, Some(0.6), Magnitude::Range(-10.0, 10.0)));
        assert_eq!((sp3[1].kind, sp3[1].probability, sp3[1].magnitude), (OpKind::BBoxOnlyRotate, Some(0.6), Magnitude::Range(-180.0, 180.0)));
        let sp4 = &r.sub_policies[3].ops;
        assert_eq!((sp4[0].kind, sp4[0].probability, sp4[0].magnitude), (OpKind::Rotate, Some(0.6), Magnitude::Range(-30.0, 30.0)));
        assert_eq!(
            (sp4[1].kind, sp4[1].probability, sp4[1].magnitude),
            (OpKind::ColorJitter, Some(1.0), Magnitude::Jitter { brightness: 0.6, contrast: 0.5, saturation: 0.5, hue: 0.1 })
        );
        assert!(r.sub_policies[4].is_identity());
        assert!(r.sub_policies[..4].iter().all(|s| !s.is_identity()));
    }

    #[test]
    fn registry_table_round_trip_and_errors() {
        let r = PolicyRegistry::default();
        assert_eq!(PolicyRegistry::parse(&r.to_table()).unwrap(), r);
        let bad = [
            "1 | TranslateX | 0.6\n",
            "1 | Warp | 0.6 | -1,1\n1 | NoOp | - | -\n",
            "1 | TranslateX | 1.5 | -1,1\n1 | NoOp | - | -\n",
            "1 | TranslateX | 0.5 | 1,-1\n1 | NoOp | - | -\n",
            "1 | Equalize | 0.5 | 0,1\n1 | NoOp | - | -\n",
            "1 | Rotate | - | -1,1\n1 | NoOp | - | -\n",
            "1 | ColorJitter | 1.0 | br=0.6,co=0.5\n1 | NoOp | - | -\n",
        ];
        for text in bad {
            assert!(matches!(PolicyRegistry::parse(text), Err(AugmentError::Registry { line: 1, .. })), "{text}");
        }
        assert!(matches!(PolicyRegistry::parse("1 | NoOp | - | -\n"), Err(AugmentError::Policy(_))));
        assert!(matches!(PolicyRegistry::parse("2 | NoOp | - | -\n2 | NoOp | - | -\n"), Err(AugmentError::Policy(_))));
        assert!(matches!(PolicyRegistry::parse("# nothing\n"), Err(AugmentError::Policy(_))));
    }

    #[test]
    fn zero_magnitudes_are_identity() {
        let img = gradient_raster(64, 48);
        let boxes = vec![BBox::new(0.3, 0.4, 0.2, 0.1).unwrap()];
        for f in [translate_x, rotate, shear_y, scale] {
            let (p, b) = f(&img, &boxes, 0.0);
            assert_eq!(p, img);
            assert_eq!(b, some(&boxes));
        }
        assert_eq!(bbox_only_rotate(&img, &boxes, 0.0), img);
        assert_eq!(color_jitter(&img, 1.0, 1.0), img);
    }

    #[test]
    fn translate_examples() {
        let img = gradient_raster(32, 32);
        let (_, b) = translate_x(&img, &[BBox::new(0.25, 0.5, 0.1, 0.1).unwrap()], 0.5);
        assert_eq!(b, vec![None]);
        let b0 = BBox::new(0.6, 0.5, 0.1, 0.2).unwrap();
        let (_, b) = translate_x(&img, &[b0], 0.25);
        assert!(close(&b[0].unwrap(), &BBox::new(0.35, 0.5, 0.1, 0.2).unwrap(), 1e-12));

        // Column-shift oracle on a 512-wide grid raster: shift by 128 px.
        let grid = GrayImage::from_fn(512, 64, |x, y| Luma([if x % 16 == 0 || y % 16 == 0 { 255 } else { (x % 200) as u8 }]));
        let (p, _) = translate_x(&grid, &[], 0.25);
        for y in 0..64 {
            for x in 0..512 {
                let want = if x + 128 < 512 { grid.get_pixel(x + 128, y)[0] } else { 0 };
                assert_eq!(p.get_pixel(x, y)[0], want, "({x}, {y})");
            }
        }
    }

    #[test]
    fn partial_exit_uses_quarter_area_rule() {
        let img = GrayImage::new(100, 100);
        // Box [0.0, 0.2] shifted left by 0.14 keeps 0.06 of 0.2 = 30%.
        let (_, b) = translate_x(&img, &[BBox::new(0.1, 0.5, 0.2, 0.2).unwrap()], 0.14);
        let kept = b[0].unwrap();
        assert!((kept.w() - 0.06).abs() < 1e-12 && kept.corners()[0] == 0.0);
        // Shifted by 0.16 keeps 20%: dropped.
        let (_, b) = translate_x(&img, &[BBox::new(0.1, 0.5, 0.2, 0.2).unwrap()], 0.16);
        assert_eq!(b, vec![None]);
    }

    #[test]
    fn rotation_examples() {
        let img = GrayImage::new(64, 64);
        let b = BBox::new(0.3, 0.6, 0.2, 0.1).unwrap();
        let (_, once) = rotate(&img, &[b], 180.0);
        let (_, half) = rotate(&img, &[b], 90.0);
        let (_, twice) = rotate(&img, &[half[0].unwrap()], 90.0);
        assert!(close(&once[0].unwrap(), &twice[0].unwrap(), 1e-9));
        assert!(close(&once[0].unwrap(), &BBox::new(0.7, 0.4, 0.2, 0.1).unwrap(), 1e-9));

        let sq = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let (_, r) = rotate(&img, &[sq], 15.0);
        let t = 15f64.to_radians();
        let r = r[0].unwrap();
        assert!((r.w() - 0.2 * (t.cos() + t.sin())).abs() < 1e-9);
        assert!((r.cx() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rotate_raster_by_180_reflects_pixels() {
        let img = gradient_raster(40, 40);
        let (p, _) = rotate(&img, &[], 180.0);
        for y in 0..40 {
            for x in 0..40 {
                assert_eq!(p.get_pixel(x, y)[0], img.get_pixel(39 - x, 39 - y)[0]);
            }
        }
    }

    /// Corner-transform oracle written out directly.
    fn shear_oracle(b: &BBox, deg: f64) -> [f64; 4] {
        let t = deg.to_radians().tan();
        let [x1, y1, x2, y2] = b.corners();
        let ys = [y1 - t * (x1 - 0.5), y1 - t * (x2 - 0.5), y2 - t * (x1 - 0.5), y2 - t * (x2 - 0.5)];
        let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min).clamp(0.0, 1.0);
        let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max).clamp(0.0, 1.0);
        [x1, lo, x2, hi]
    }

    #[test]
    fn shear_examples() {
        let img = GrayImage::new(50, 50);
        let b = BBox::new(0.3, 0.4, 0.2, 0.1).unwrap();
        let (_, s) = shear_y(&img, &[b], 10.0);
        let got = s[0].unwrap().corners();
        for (g, w) in got.iter().zip(shear_oracle(&b, 10.0)) {
            assert!((g - w).abs() < 1e-12);
        }
        // Corner inverse: shear forward then back maps corners home.
        let fwd = Affine::about(1.0, 0.0, -(10f64.to_radians().tan()), 1.0, 25.0, 25.0);
        let back = fwd.inverse();
        for (x, y) in [(3.0, 4.0), (40.0, 7.5), (12.25, 49.0)] {
            let (a, c) = fwd.apply(x, y);
            let (x2, y2) = back.apply(a, c);
            assert!((x2 - x).abs() < 1e-9 && (y2 - y).abs() < 1e-9);
        }
    }

    #[test]
    fn scale_examples() {
        let img = GrayImage::new(64, 64);
        let (_, s) = scale(&img, &[BBox::new(0.5, 0.5, 0.1, 0.1).unwrap()], -0.3);
        assert!((s[0].unwrap().w() - 0.07).abs() < 1e-12);
        // Near the edge: oracle scales corners about 0.5 then clips.
        let b = BBox::new(0.9, 0.2, 0.1, 0.1).unwrap();
        let (_, s) = scale(&img, &[b], 0.2);
        let c = b.corners().map(|v| (0.5 + 1.2 * (v - 0.5)).clamp(0.0, 1.0));
        for (g, w) in s[0].unwrap().corners().iter().zip(c) {
            assert!((g - w).abs() < 1e-12);
        }
        // Sub-8-px boxes are kept by scaling.
        let tiny = BBox::new(0.5, 0.5, 6.0 / 512.0, 6.0 / 512.0).unwrap();
        assert!(scale(&GrayImage::new(512, 512), &[tiny], -0.3).1[0].is_some());
    }

    #[test]
    fn bbox_only_rotate_reflects_mark_and_leaves_outside() {
        let mut img = GrayImage::from_pixel(64, 64, Luma([40]));
        // Box covering pixels 20..30 in both axes; center at pixel 25.
        let b = BBox::from_corners(20.0 / 64.0, 20.0 / 64.0, 30.0 / 64.0, 30.0 / 64.0).unwrap();
        img.put_pixel(21, 22, Luma([250]));
        img.put_pixel(22, 22, Luma([200]));
        img.put_pixel(5, 5, Luma([7]));
        let out = bbox_only_rotate(&img, &[b], 180.0);
        // Point reflection about (25, 25) maps pixel i to 49 - i.
        assert!(out.get_pixel(28, 27)[0] >= 249);
        assert!(out.get_pixel(27, 27)[0] >= 199);
        assert_eq!(out.get_pixel(21, 22)[0], 40);
        for y in 0..64 {
            for x in 0..64 {
                if !(20..30).contains(&x) || !(20..30).contains(&y) {
                    assert_eq!(out.get_pixel(x, y), img.get_pixel(x, y));
                }
            }
        }
        assert_eq!(bbox_only_rotate(&img, &[], 77.0), img);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn bbox_only_rotate_touches_only_boxes(
            deg in -180.0f64..180.0,
            raw in prop::collection::vec((0.1f64..0.9, 0.1f64..0.9, 0.02f64..0.2, 0.02f64..0.2), 1..4),
        ) {
            let img = gradient_raster(48, 48);
            let boxes: Vec<BBox> = raw.iter().map(|&(x, y, w, h)| BBox::clipped(x, y, w, h).unwrap()).collect();
            let out = bbox_only_rotate(&img, &boxes, deg);
            let spans: Vec<_> = boxes.iter().map(|b| pixel_span(b, 48, 48)).collect();
            for y in 0..48 {
                for x in 0..48 {
                    let inside = spans.iter().any(|(xs, ys)| xs.contains(&x) && ys.contains(&y));
                    if !inside {
                        prop_assert_eq!(out.get_pixel(x, y), img.get_pixel(x, y));
                    }
                }
            }
        }
    }

    #[test]
    fn equalize_examples() {
        let c = GrayImage::from_pixel(16, 16, Luma([77]));
        assert_eq!(equalize(&c), c);

        // Two levels: cdf(50) = N/2 = cdf_min → 0, cdf(200) = N → 255.
        let two = GrayImage::from_fn(16, 16, |x, _| Luma([if x < 8 { 50 } else { 200 }]));
        let e = equalize(&two);
        for (p, q) in two.pixels().zip(e.pixels()) {
            assert_eq!(q[0], if p[0] == 50 { 0 } else { 255 });
        }
        // Three levels 10/100/250 with counts 64/128/64 of 256:
        // cdf = 64, 192, 256; (cdf - 64) / 192 · 255 = 0, 170, 255.
        let three = GrayImage::from_fn(16, 16, |x, _| Luma([if x < 4 { 10 } else if x < 12 { 100 } else { 250 }]));
        let e = equalize(&three);
        for (p, q) in three.pixels().zip(e.pixels()) {
            let want = match p[0] {
                10 => 0,
                100 => 170,
                _ => 255,
            };
            assert_eq!(q[0], want);
        }

        let uniform = GrayImage::from_fn(256, 256, |x, _| Luma([x as u8]));
        let e = equalize(&uniform);
        let mut hist = [0i64; 256];
        for p in e.pixels() {
            hist[p[0] as usize] += 1;
        }
        assert!(hist.iter().all(|&h| (h - 256).abs() <= 1));
    }

    #[test]
    fn color_jitter_examples() {
        let img = GrayImage::from_pixel(4, 4, Luma([200]));
        assert!(color_jitter(&img, 1.5, 1.0).pixels().all(|p| p[0] == 255));
        let r = PolicyRegistry::default();
        if let Magnitude::Jitter { brightness, .. } = r.sub_policies[3].ops[1].magnitude {
            assert!(1.0 - brightness > 0.0);
        }
        // Contrast 0 collapses to the mean.
        let two = GrayImage::from_fn(2, 1, |x, _| Luma([if x == 0 { 100 } else { 200 }]));
        assert!(color_jitter(&two, 1.0, 0.0).pixels().all(|p| p[0] == 150));
    }

    /// Generator whose every draw is the maximum value, so no activation
    /// probability below 1 fires.
    struct MaxRng;
    impl RngCore for MaxRng {
        fn next_u32(&mut self) -> u32 {
            u32::MAX
        }
        fn next_u64(&mut self) -> u64 {
            u64::MAX
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            dst.fill(0xff);
        }
    }

    #[test]
    fn forced_policies() {
        let img = gradient_raster(64, 64);
        let boxes = vec![BBox::new(0.5, 0.5, 0.2, 0.3).unwrap(), BBox::new(0.1, 0.1, 0.1, 0.1).unwrap()];
        let r = PolicyRegistry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = apply_sub_policy(&img, &boxes, &r, 4, &mut rng);
        assert_eq!((s.pixels, s.boxes, s.sub_policy), (img.clone(), boxes.clone(), 5));
        assert!(s.applied_ops.iter().all(|o| !o.applied && o.name == "NoOp"));

        let s = apply_sub_policy(&img, &boxes, &r, 0, &mut MaxRng);
        assert_eq!((s.pixels, s.boxes), (img.clone(), boxes.clone()));
        assert!(s.applied_ops.iter().all(|o| !o.applied));
    }

    #[test]
    fn seeded_application_is_deterministic() {
        let img = gradient_raster(64, 64);
        let boxes = vec![BBox::new(0.5, 0.5, 0.2, 0.3).unwrap(), BBox::new(0.9, 0.1, 0.1, 0.1).unwrap()];
        let r = PolicyRegistry::default();
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..60 {
            let a = sample_and_apply(&img, &boxes, &r, &mut sample_rng(11, i));
            let b = sample_and_apply(&img, &boxes, &r, &mut sample_rng(11, i));
            assert_eq!(a, b);
            seen.insert(a.sub_policy);
            assert_eq!(a.boxes.len() + a.dropped.len(), boxes.len());
        }
        assert_eq!(seen.len(), 5);
    }

    #[test]
    fn log_serialization() {
        let mut params = BTreeMap::new();
        params.insert("brightness".to_string(), 1.25);
        let op = AppliedOp { name: "ColorJitter".into(), applied: true, params, noop: vec!["saturation".into(), "hue".into()] };
        let s = serde_json::to_string(&op).unwrap();
        assert_eq!(s, r#"{"name":"ColorJitter","applied":true,"params":{"brightness":1.25},"noop":["saturation","hue"]}"#);
        let idle = AppliedOp { name: "NoOp".into(), applied: false, params: BTreeMap::new(), noop: vec![] };
        assert_eq!(serde_json::to_string(&idle).unwrap(), r#"{"name":"NoOp","applied":false}"#);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn surviving_boxes_stay_valid(
            seed in any::<u64>(),
            raw in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.01f64..0.5, 0.01f64..0.5), 0..6),
        ) {
            let img = gradient_raster(32, 32);
            let boxes: Vec<BBox> = raw.iter().map(|&(x, y, w, h)| BBox::clipped(x, y, w, h).unwrap()).collect();
            let r = PolicyRegistry::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sample_and_apply(&img, &boxes, &r, &mut rng);
            prop_assert_eq!(s.boxes.len() + s.dropped.len(), boxes.len());
            for b in &s.boxes {
                let [x1, y1, x2, y2] = b.corners();
                prop_assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0);
                prop_assert!(BBox::new(b.cx(), b.cy(), b.w(), b.h()).is_ok());
            }
        }
    }
}
