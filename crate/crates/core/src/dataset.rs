//! Annotation ingestion and cleaning, 2048 → 512 tiling and grouped splits.
//!
//! Source tiles are 2048×2048 grayscale crops named by [`TileId`]. Crater
//! annotations are circles in fractions of their tile with a crowd accuracy
//! score. Cleaning removes low-accuracy, undersized and mostly-black
//! annotations; tiling cuts each source tile into a 4×4 grid of 512-px
//! sub-tiles and reassigns boxes by center.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Read};
use std::ops::Range;
use std::str::FromStr;

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{circle_to_box, BBox, GeometryError};

pub const DEFAULT_ACCURACY_THRESHOLD: f64 = 0.55;
pub const DEFAULT_BLACK_LEVEL: u8 = 30;
pub const DEFAULT_MAX_BLACK_FRACTION: f64 = 0.85;
pub const DEFAULT_MIN_DIAMETER_PX: f64 = 8.0;
pub const SOURCE_TILE_PX: u32 = 2048;
pub const SUB_TILE_PX: u32 = 512;
/// Sub-tiles per side of a source tile.
pub const GRID: u32 = SOURCE_TILE_PX / SUB_TILE_PX;
pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("malformed tile name {name:?}: {field}")]
    TileName { name: String, field: &'static str },
    #[error("annotation line {line}: {message}")]
    Annotation { line: u64, message: String },
    #[error("raster for {tile} is {got:?}, expected {expected:?}")]
    RasterSize { tile: String, expected: (u32, u32), got: (u32, u32) },
    #[error("need at least 3 distinct image ids to split, got {0}")]
    InsufficientGroups(usize),
    #[error("invalid split ratios {0:?}: must be non-negative and sum to 1")]
    InvalidRatios([f64; 3]),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Source tile name `image_id_xmin_ymin_size`, e.g. `M118673590LC_1508_36964_2048`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileId {
    pub image_id: String,
    pub x_min: u64,
    pub y_min: u64,
    pub tile_size: u64,
}

impl fmt::Display for TileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}_{}_{}", self.image_id, self.x_min, self.y_min, self.tile_size)
    }
}

impl FromStr for TileId {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_tile_id(s)
    }
}

impl Serialize for TileId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TileId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_tile_id(&s).map_err(serde::de::Error::custom)
    }
}

pub fn parse_tile_id(name: &str) -> Result<TileId, DatasetError> {
    let err = |field| DatasetError::TileName { name: name.to_string(), field };
    let mut parts = name.rsplitn(4, '_');
    let size = parts.next().ok_or_else(|| err("missing tile size"))?;
    let y = parts.next().ok_or_else(|| err("missing y_min"))?;
    let x = parts.next().ok_or_else(|| err("missing x_min"))?;
    let image_id = parts.next().ok_or_else(|| err("too few fields"))?;
    if image_id.is_empty() {
        return Err(err("empty image id"));
    }
    let num = |v: &str, field| -> Result<u64, DatasetError> {
        if v.is_empty() || !v.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err(field));
        }
        v.parse().map_err(|_| err(field))
    };
    Ok(TileId {
        image_id: image_id.to_string(),
        x_min: num(x, "x_min is not a non-negative integer")?,
        y_min: num(y, "y_min is not a non-negative integer")?,
        tile_size: num(size, "tile size is not a non-negative integer")?,
    })
}

/// Crater circle in fractions of its source tile, with a crowd accuracy score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleAnnotation {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub accuracy: f64,
}

impl CircleAnnotation {
    pub fn new(cx: f64, cy: f64, r: f64, accuracy: f64) -> Result<Self, DatasetError> {
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(GeometryError::InvalidCenter(cx, cy).into());
        }
        if !(r > 0.0) || !r.is_finite() {
            return Err(GeometryError::InvalidRadius(r).into());
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(DatasetError::InvalidParameter(format!("accuracy {accuracy} outside [0, 1]")));
        }
        Ok(Self { cx, cy, r, accuracy })
    }

    pub fn bbox(&self) -> Result<BBox, GeometryError> {
        circle_to_box(self.cx, self.cy, self.r)
    }

    pub fn diameter_px(&self, source_px: u32) -> f64 {
        2.0 * self.r * source_px as f64
    }
}

#[derive(Debug, Deserialize)]
struct AnnotationRow {
    tile_name: String,
    cx: f64,
    cy: f64,
    r: f64,
    accuracy: f64,
}

/// Annotations of one source tile in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct TileAnnotations {
    pub tile: TileId,
    pub annotations: Vec<CircleAnnotation>,
}

/// Reads `tile_name,cx,cy,r,accuracy` rows, grouped by tile in order of
/// first appearance.
pub fn read_annotations<R: Read>(input: R) -> Result<Vec<TileAnnotations>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| DatasetError::Annotation { line: 1, message: e.to_string() })?
        .clone();
    let expected = ["tile_name", "cx", "cy", "r", "accuracy"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(DatasetError::Annotation {
            line: 1,
            message: format!("header must be {}", expected.join(",")),
        });
    }
    let mut groups: Vec<TileAnnotations> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| DatasetError::Annotation {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row: AnnotationRow = record
            .deserialize(Some(&headers))
            .map_err(|e| DatasetError::Annotation { line, message: e.to_string() })?;
        let ann = CircleAnnotation::new(row.cx, row.cy, row.r, row.accuracy)
            .map_err(|e| DatasetError::Annotation { line, message: e.to_string() })?;
        let slot = match index.get(&row.tile_name) {
            Some(&i) => i,
            None => {
                let tile = parse_tile_id(&row.tile_name)
                    .map_err(|e| DatasetError::Annotation { line, message: e.to_string() })?;
                groups.push(TileAnnotations { tile, annotations: Vec::new() });
                index.insert(row.tile_name.clone(), groups.len() - 1);
                groups.len() - 1
            }
        };
        groups[slot].annotations.push(ann);
    }
    Ok(groups)
}

/// Tile names to drop entirely, one per line; blank lines and `#` comments
/// are ignored.
pub fn read_exclusion_list<R: BufRead>(input: R) -> Result<BTreeSet<TileId>, DatasetError> {
    let mut out = BTreeSet::new();
    for line in input.lines() {
        let line = line?;
        let name = line.trim();
        if name.is_empty() || name.starts_with('#') {
            continue;
        }
        out.insert(parse_tile_id(name)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalReason {
    Accuracy,
    Size,
    BlackFraction,
    ClipShrink,
    /// The whole source tile is on the exclusion list.
    Excluded,
}

impl fmt::Display for RemovalReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Accuracy => "accuracy",
            Self::Size => "size",
            Self::BlackFraction => "black_fraction",
            Self::ClipShrink => "clip_shrink",
            Self::Excluded => "excluded",
        };
        f.write_str(s)
    }
}

/// One audit row: annotation `index` of `tile_name` was removed for `reason`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub tile_name: String,
    pub index: usize,
    pub reason: RemovalReason,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CleaningParams {
    pub accuracy_threshold: f64,
    pub black_level: u8,
    pub max_black_fraction: f64,
    pub min_diameter_px: f64,
}

impl Default for CleaningParams {
    fn default() -> Self {
        Self {
            accuracy_threshold: DEFAULT_ACCURACY_THRESHOLD,
            black_level: DEFAULT_BLACK_LEVEL,
            max_black_fraction: DEFAULT_MAX_BLACK_FRACTION,
            min_diameter_px: DEFAULT_MIN_DIAMETER_PX,
        }
    }
}

impl CleaningParams {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.accuracy_threshold >= 0.0) || !(self.min_diameter_px >= 0.0) {
            return Err(DatasetError::InvalidParameter("thresholds must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.max_black_fraction) {
            return Err(DatasetError::InvalidParameter("max black fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Reason an annotation fails the accuracy or size rule, checked in that order.
fn metadata_violation(ann: &CircleAnnotation, accuracy_threshold: f64, min_diameter_px: f64, source_px: u32) -> Option<RemovalReason> {
    if ann.accuracy < accuracy_threshold {
        Some(RemovalReason::Accuracy)
    } else if ann.diameter_px(source_px) < min_diameter_px {
        Some(RemovalReason::Size)
    } else {
        None
    }
}

/// Keeps annotations with `accuracy >= accuracy_threshold` and a diameter of
/// at least `min_diameter_px` at `source_px` resolution, in order.
pub fn filter_annotations(
    anns: &[CircleAnnotation],
    accuracy_threshold: f64,
    min_diameter_px: f64,
    source_px: u32,
) -> Vec<CircleAnnotation> {
    anns.iter()
        .filter(|a| metadata_violation(a, accuracy_threshold, min_diameter_px, source_px).is_none())
        .copied()
        .collect()
}

/// Pixel index ranges whose centers lie inside `b` on a `width`×`height`
/// raster. A box too small to contain any pixel center maps to the pixel
/// under its center.
pub fn pixel_span(b: &BBox, width: u32, height: u32) -> (Range<u32>, Range<u32>) {
    let axis = |lo: f64, hi: f64, center: f64, n: u32| -> Range<u32> {
        let n_f = n as f64;
        let first = (lo * n_f - 0.5).ceil().max(0.0);
        let last = (hi * n_f - 0.5).floor().min(n_f - 1.0);
        if first <= last {
            first as u32..last as u32 + 1
        } else {
            let c = ((center * n_f).floor().max(0.0) as u32).min(n - 1);
            c..c + 1
        }
    };
    let [x1, y1, x2, y2] = b.corners();
    (axis(x1, x2, b.cx(), width), axis(y1, y2, b.cy(), height))
}

/// Fraction of pixels inside `b` with intensity below `black_level`.
pub fn black_fraction(pixels: &GrayImage, b: &BBox, black_level: u8) -> f64 {
    let (xs, ys) = pixel_span(b, pixels.width(), pixels.height());
    let total = (xs.len() * ys.len()) as f64;
    let mut black = 0usize;
    for y in ys {
        for x in xs.clone() {
            if pixels.get_pixel(x, y)[0] < black_level {
                black += 1;
            }
        }
    }
    black as f64 / total
}

/// True when the annotation's bounding box is at most `max_black_fraction` black.
pub fn black_pixel_filter(
    pixels: &GrayImage,
    ann: &CircleAnnotation,
    black_level: u8,
    max_black_fraction: f64,
) -> Result<bool, GeometryError> {
    Ok(black_fraction(pixels, &ann.bbox()?, black_level) <= max_black_fraction)
}

/// Where a source-tile box lands after tiling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TileAssignment {
    /// Sub-tile index (row-major) and the box in sub-tile coordinates.
    Kept(usize, BBox),
    /// The clipped box is narrower than the minimum size.
    ClipShrink(usize),
}

/// Assigns a box to the sub-tile containing its center (a center on an
/// interior boundary goes to the higher index), clips it to that sub-tile and
/// renormalizes. The box is dropped when its smaller clipped side is below
/// `min_diameter_px` source pixels.
pub fn assign_to_sub_tile(b: &BBox, source_px: u32, min_diameter_px: f64) -> TileAssignment {
    let g = GRID as f64;
    let cell = |c: f64| ((c * g).floor() as usize).min(GRID as usize - 1);
    let (col, row) = (cell(b.cx()), cell(b.cy()));
    let index = row * GRID as usize + col;
    let [x1, y1, x2, y2] = b.corners();
    let local = |v: f64, origin: usize| ((v * g) - origin as f64).clamp(0.0, 1.0);
    let (lx1, lx2) = (local(x1, col), local(x2, col));
    let (ly1, ly2) = (local(y1, row), local(y2, row));
    let sub_px = source_px as f64 / g;
    let min_side = (lx2 - lx1).min(ly2 - ly1) * sub_px;
    if min_side < min_diameter_px {
        return TileAssignment::ClipShrink(index);
    }
    match BBox::from_corners(lx1, ly1, lx2, ly2) {
        Ok(bb) => TileAssignment::Kept(index, bb),
        Err(_) => TileAssignment::ClipShrink(index),
    }
}

/// A 512-px sub-tile with its boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct TileRecord {
    pub tile: TileId,
    pub sub_tile: usize,
    pub pixels: GrayImage,
    pub boxes: Vec<BBox>,
    /// Index of each box's annotation in the source tile's annotation list.
    pub sources: Vec<usize>,
}

impl TileRecord {
    pub fn key(&self) -> String {
        sub_tile_key(&self.tile, self.sub_tile)
    }

    pub fn meta(&self, image: Option<String>) -> TileRecordMeta {
        TileRecordMeta {
            tile: self.tile.clone(),
            sub_tile: self.sub_tile,
            boxes: self.boxes.clone(),
            image,
            augmented: false,
        }
    }
}

/// `"<tile id>/<sub-tile index>"`, the key shared by record and prediction files.
pub fn sub_tile_key(tile: &TileId, sub_tile: usize) -> String {
    format!("{tile}/{sub_tile}")
}

pub fn parse_sub_tile_key(key: &str) -> Result<(TileId, usize), DatasetError> {
    let err = |field| DatasetError::TileName { name: key.to_string(), field };
    let (tile, sub) = key.rsplit_once('/').ok_or_else(|| err("missing '/<sub-tile>' suffix"))?;
    let sub: usize = sub.parse().map_err(|_| err("sub-tile index is not an integer"))?;
    if sub >= (GRID * GRID) as usize {
        return Err(err("sub-tile index out of range"));
    }
    Ok((parse_tile_id(tile)?, sub))
}

/// One line of a record JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecordMeta {
    pub tile: TileId,
    pub sub_tile: usize,
    /// `[cx, cy, w, h]` in sub-tile fractions.
    pub boxes: Vec<BBox>,
    /// Raster path relative to the record file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub augmented: bool,
}

impl TileRecordMeta {
    pub fn key(&self) -> String {
        sub_tile_key(&self.tile, self.sub_tile)
    }
}

/// Cuts a 2048² raster into 16 row-major 512² sub-tiles and distributes
/// `boxes` (with their annotation indices) by [`assign_to_sub_tile`].
/// Returns the records and the indices dropped for clip shrinkage.
pub fn tile_image(
    tile: &TileId,
    pixels: &GrayImage,
    boxes: &[(usize, BBox)],
    min_diameter_px: f64,
) -> Result<(Vec<TileRecord>, Vec<usize>), DatasetError> {
    let expected = (SOURCE_TILE_PX, SOURCE_TILE_PX);
    if pixels.dimensions() != expected {
        return Err(DatasetError::RasterSize { tile: tile.to_string(), expected, got: pixels.dimensions() });
    }
    let mut records: Vec<TileRecord> = (0..(GRID * GRID) as usize)
        .map(|k| {
            let (col, row) = (k as u32 % GRID, k as u32 / GRID);
            let crop = image::imageops::crop_imm(pixels, col * SUB_TILE_PX, row * SUB_TILE_PX, SUB_TILE_PX, SUB_TILE_PX);
            TileRecord { tile: tile.clone(), sub_tile: k, pixels: crop.to_image(), boxes: vec![], sources: vec![] }
        })
        .collect();
    let mut dropped = Vec::new();
    for &(src, b) in boxes {
        match assign_to_sub_tile(&b, SOURCE_TILE_PX, min_diameter_px) {
            TileAssignment::Kept(k, bb) => {
                records[k].boxes.push(bb);
                records[k].sources.push(src);
            }
            TileAssignment::ClipShrink(_) => dropped.push(src),
        }
    }
    Ok((records, dropped))
}

/// Result of cleaning and tiling one source tile.
#[derive(Debug, Clone, PartialEq)]
pub struct TileOutcome {
    /// 16 sub-tiles, or none for an excluded tile.
    pub records: Vec<TileRecord>,
    pub removals: Vec<Removal>,
}

/// Full cleaning pipeline for one source tile: exclusion, accuracy, size,
/// black fraction, then tiling. Every annotation ends up in exactly one
/// record or exactly one removal.
pub fn preprocess_tile(
    tile: &TileId,
    pixels: &GrayImage,
    anns: &[CircleAnnotation],
    params: &CleaningParams,
    excluded: bool,
) -> Result<TileOutcome, DatasetError> {
    params.validate()?;
    let name = tile.to_string();
    let removal = |index, reason| Removal { tile_name: name.clone(), index, reason };
    if excluded {
        let removals = (0..anns.len()).map(|i| removal(i, RemovalReason::Excluded)).collect();
        return Ok(TileOutcome { records: vec![], removals });
    }
    let expected = (SOURCE_TILE_PX, SOURCE_TILE_PX);
    if pixels.dimensions() != expected {
        return Err(DatasetError::RasterSize { tile: name, expected, got: pixels.dimensions() });
    }
    let mut removals = Vec::new();
    let mut kept = Vec::new();
    for (i, ann) in anns.iter().enumerate() {
        if let Some(reason) = metadata_violation(ann, params.accuracy_threshold, params.min_diameter_px, SOURCE_TILE_PX) {
            removals.push(removal(i, reason));
            continue;
        }
        let b = ann.bbox()?;
        if black_fraction(pixels, &b, params.black_level) > params.max_black_fraction {
            removals.push(removal(i, RemovalReason::BlackFraction));
            continue;
        }
        kept.push((i, b));
    }
    let (records, dropped) = tile_image(tile, pixels, &kept, params.min_diameter_px)?;
    removals.extend(dropped.into_iter().map(|i| removal(i, RemovalReason::ClipShrink)));
    removals.sort_by_key(|r| r.index);
    Ok(TileOutcome { records, removals })
}

/// Removal counts per reason.
pub fn removal_counts(removals: &[Removal]) -> BTreeMap<RemovalReason, usize> {
    let mut out = BTreeMap::new();
    for r in removals {
        *out.entry(r.reason).or_insert(0) += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Validation => "validation",
            Self::Test => "test",
        }
    }
}

/// Parent image id → split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub assignment: BTreeMap<String, Split>,
}

impl SplitManifest {
    pub fn split_of(&self, image_id: &str) -> Option<Split> {
        self.assignment.get(image_id).copied()
    }

    pub fn ids_in(&self, split: Split) -> Vec<&str> {
        self.assignment.iter().filter(|(_, s)| **s == split).map(|(k, _)| k.as_str()).collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in self.assignment.values() {
            c[*s as usize] += 1;
        }
        c
    }
}

/// Group counts closest to `ratios · n` (largest remainder; ties go to the
/// earlier split).
pub fn split_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| r * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Shuffles the distinct parent image ids with a seeded generator and
/// assigns whole groups to train / validation / test.
pub fn grouped_split<'a, I>(image_ids: I, ratios: [f64; 3], seed: u64) -> Result<SplitManifest, DatasetError>
where
    I: IntoIterator<Item = &'a str>,
{
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InvalidRatios(ratios));
    }
    let distinct: BTreeSet<&str> = image_ids.into_iter().collect();
    if distinct.len() < 3 {
        return Err(DatasetError::InsufficientGroups(distinct.len()));
    }
    let mut ids: Vec<&str> = distinct.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let counts = split_counts(ids.len(), ratios);
    let mut assignment = BTreeMap::new();
    let mut it = ids.into_iter();
    for (split, count) in Split::ALL.into_iter().zip(counts) {
        for id in it.by_ref().take(count) {
            assignment.insert(id.to_string(), split);
        }
    }
    Ok(SplitManifest { seed, ratios, assignment })
}

/// Image ids that appear in more than one of the given record sets.
pub fn leaked_ids(sets: &[(Split, Vec<TileRecordMeta>)]) -> BTreeSet<String> {
    let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
    let mut leaked = BTreeSet::new();
    for (split, records) in sets {
        for r in records {
            match seen.get(r.tile.image_id.as_str()) {
                Some(s) if s != split => {
                    leaked.insert(r.tile.image_id.clone());
                }
                _ => {
                    seen.insert(&r.tile.image_id, *split);
                }
            }
        }
    }
    leaked
}
