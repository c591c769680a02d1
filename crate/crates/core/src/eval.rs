//! Detection scoring: TP/FP/FN counting, recall and precision, and
//! per-image reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::parse_sub_tile_key;
use crate::geometry::{iou, nms, score_order, BBox, Prediction};

pub const DEFAULT_TP_IOU: f64 = 0.30;
pub const DEFAULT_NMS_IOU: f64 = 0.12;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("report needs at least one image")]
    Empty,
    #[error("predictions reference tile {0:?} which has no ground-truth entry")]
    UnknownTile(String),
    #[error("bad tile key {0:?}")]
    TileKey(String),
    #[error("threshold {name} = {value} outside [0, 1]")]
    Threshold { name: &'static str, value: f64 },
    #[error("csv output failed: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tp_iou: f64,
    pub nms_iou: f64,
    pub score_threshold: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { tp_iou: DEFAULT_TP_IOU, nms_iou: DEFAULT_NMS_IOU, score_threshold: DEFAULT_SCORE_THRESHOLD }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), EvalError> {
        for (name, value) in [("tp_iou", self.tp_iou), ("nms_iou", self.nms_iou)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(EvalError::Threshold { name, value });
            }
        }
        if !self.score_threshold.is_finite() {
            return Err(EvalError::Threshold { name: "score_threshold", value: self.score_threshold });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn recall(&self) -> Option<f64> {
        recall(self.tp, self.fn_)
    }

    pub fn precision(&self) -> Option<f64> {
        precision(self.tp, self.fp)
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;
    fn add(self, o: Confusion) -> Confusion {
        Confusion { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

/// `tp / (tp + fn)`, absent when there are no ground truths.
pub fn recall(tp: usize, fn_: usize) -> Option<f64> {
    (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64)
}

/// `tp / (tp + fp)`, absent when there are no detections.
pub fn precision(tp: usize, fp: usize) -> Option<f64> {
    (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64)
}

/// Greedy one-to-one counting on already suppressed predictions.
///
/// Predictions scoring below `score_threshold` are ignored. The rest are
/// visited by descending score; each claims the unclaimed ground truth of
/// highest IoU (lowest index on ties) when that IoU is strictly above
/// `tp_iou`, and is a false positive otherwise.
pub fn confusion(preds: &[Prediction], gts: &[BBox], tp_iou: f64, score_threshold: f64) -> Confusion {
    let mut order: Vec<usize> = (0..preds.len()).filter(|&i| !(preds[i].score < score_threshold)).collect();
    order.sort_by(|&a, &b| score_order(preds[a].score, preds[b].score).then(a.cmp(&b)));
    let mut claimed = vec![false; gts.len()];
    let mut c = Confusion::default();
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if claimed[j] {
                continue;
            }
            let v = iou(&preds[i].bbox, gt);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, v)) if v > tp_iou => {
                claimed[j] = true;
                c.tp += 1;
            }
            _ => c.fp += 1,
        }
    }
    c.fn_ = gts.len() - c.tp;
    c
}

/// NMS at `thresholds.nms_iou`, then [`confusion`].
pub fn evaluate_image(preds: &[Prediction], gts: &[BBox], thresholds: &Thresholds) -> Confusion {
    let kept = nms(preds, thresholds.nms_iou);
    confusion(&kept, gts, thresholds.tp_iou, thresholds.score_threshold)
}

/// Evaluates every sub-tile key of `gts` and sums the counts per parent tile.
///
/// Keys have the form `<TileId>/<k>`; predictions for keys without a
/// ground-truth entry are an error. Sub-tiles are evaluated in parallel and
/// reduced in key order.
pub fn evaluate_tiles(
    preds: &BTreeMap<String, Vec<Prediction>>,
    gts: &BTreeMap<String, Vec<BBox>>,
    thresholds: &Thresholds,
) -> Result<BTreeMap<String, Confusion>, EvalError> {
    thresholds.validate()?;
    if let Some(k) = preds.keys().find(|k| !gts.contains_key(*k)) {
        return Err(EvalError::UnknownTile(k.clone()));
    }
    let keyed: Vec<(String, &Vec<BBox>)> = gts
        .iter()
        .map(|(k, v)| {
            let (tile, _) = parse_sub_tile_key(k).map_err(|_| EvalError::TileKey(k.clone()))?;
            Ok((tile.to_string(), v))
        })
        .collect::<Result<_, EvalError>>()?;
    let empty = Vec::new();
    let counts: Vec<Confusion> = gts
        .keys()
        .zip(&keyed)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(key, (_, boxes))| evaluate_image(preds.get(*key).unwrap_or(&empty), boxes, thresholds))
        .collect();
    let mut per_image: BTreeMap<String, Confusion> = BTreeMap::new();
    for ((image, _), c) in keyed.into_iter().zip(counts) {
        let e = per_image.entry(image).or_default();
        *e = *e + c;
    }
    Ok(per_image)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image: String,
    /// Absent for rows built from published rates only.
    pub counts: Option<Confusion>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
}

impl ImageResult {
    pub fn from_counts(image: impl Into<String>, counts: Confusion) -> Self {
        Self { image: image.into(), counts: Some(counts), recall: counts.recall(), precision: counts.precision() }
    }

    pub fn from_rates(image: impl Into<String>, recall: Option<f64>, precision: Option<f64>) -> Self {
        Self { image: image.into(), counts: None, recall, precision }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageResult>,
    pub mean_recall: Option<f64>,
    pub mean_precision: Option<f64>,
    pub thresholds: Thresholds,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Builds a report with rows sorted by image name and unweighted means over
/// the images where each rate is defined.
pub fn make_report(mut per_image: Vec<ImageResult>, thresholds: Thresholds) -> Result<EvalReport, EvalError> {
    if per_image.is_empty() {
        return Err(EvalError::Empty);
    }
    per_image.sort_by(|a, b| a.image.cmp(&b.image));
    let mean_recall = mean(per_image.iter().map(|r| r.recall));
    let mean_precision = mean(per_image.iter().map(|r| r.precision));
    Ok(EvalReport { per_image, mean_recall, mean_precision, thresholds })
}

fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", v * 100.0))
}

impl EvalReport {
    pub fn from_counts(per_image: &BTreeMap<String, Confusion>, thresholds: Thresholds) -> Result<Self, EvalError> {
        make_report(per_image.iter().map(|(k, c)| ImageResult::from_counts(k.clone(), *c)).collect(), thresholds)
    }

    /// Fixed-column text table with a trailing mean row.
    pub fn render_table(&self) -> String {
        const NAME: &str = "Image Name";
        const RECALL: &str = "Recall (%)";
        const PRECISION: &str = "Precision (%)";
        let width = self.per_image.iter().map(|r| r.image.len()).chain([NAME.len(), 4]).max().unwrap_or(0);
        let (wr, wp) = (RECALL.len(), PRECISION.len());
        let mut out = String::new();
        let _ = writeln!(out, "{NAME:<width$} | {RECALL:>wr$} | {PRECISION:>wp$}");
        let _ = writeln!(out, "{}-+-{}-+-{}", "-".repeat(width), "-".repeat(wr), "-".repeat(wp));
        for r in &self.per_image {
            let _ = writeln!(out, "{:<width$} | {:>wr$} | {:>wp$}", r.image, percent(r.recall), percent(r.precision));
        }
        let _ = writeln!(out, "{}-+-{}-+-{}", "-".repeat(width), "-".repeat(wr), "-".repeat(wp));
        let _ = writeln!(out, "{:<width$} | {:>wr$} | {:>wp$}", "Mean", percent(self.mean_recall), percent(self.mean_precision));
        out
    }

    /// `image,recall,precision,tp,fp,fn`; rates are fractions, absent values
    /// are empty fields.
    pub fn render_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| EvalError::Csv(e.to_string());
        w.write_record(["image", "recall", "precision", "tp", "fp", "fn"]).map_err(csv_err)?;
        let rate = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
        for r in &self.per_image {
            let count = |f: fn(&Confusion) -> usize| r.counts.as_ref().map_or_else(String::new, |c| f(c).to_string());
            w.write_record([
                r.image.clone(),
                rate(r.recall),
                rate(r.precision),
                count(|c| c.tp),
                count(|c| c.fp),
                count(|c| c.fn_),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Csv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Published per-image (recall %, precision %) rows of the reference test set.
pub const REFERENCE_TABLE: [(&str, f64, f64); 6] = [
    ("M1184106708LC_1508_34916_2048", 87.8, 52.9),
    ("M1184106708LC_1508_47204_2048", 85.5, 29.3),
    ("M1250049562LC_1508_16484_2048", 93.4, 46.9),
    ("M1466265041LC_1508_100_2048", 94.0, 50.5),
    ("M1466265041LC_1508_12388_2048", 82.2, 73.1),
    ("M1466265041LC_1508_49252_2048", 87.5, 64.0),
];

pub fn reference_report() -> EvalReport {
    let rows = REFERENCE_TABLE
        .iter()
        .map(|&(name, r, p)| ImageResult::from_rates(name, Some(r / 100.0), Some(p / 100.0)))
        .collect();
    make_report(rows, Thresholds::default()).expect("reference table is non-empty")
}
