//! JSON-lines prediction files and anchor files exchanged with the model
//! exporter.
//!
//! A prediction file holds one object per line:
//! `{"tile": "<TileId>/<k>", "box": [cx, cy, w, h], "score": s, "embedding": [...]}`
//! with `embedding` optional. The first line may instead be a header
//! `{"manifest": {...}}`. An anchor file is a single object `{"anchor": [...]}`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::dataset::parse_sub_tile_key;
use crate::geometry::{BBox, Prediction};
use crate::losses::{cosine_similarity, Embedding};

pub const PREDICTION_SCHEMA: &str = include_str!("../schemas/prediction.schema.json");
pub const ANCHOR_SCHEMA: &str = include_str!("../schemas/anchor.schema.json");
pub const MANIFEST_SCHEMA: &str = include_str!("../schemas/manifest.schema.json");

/// Tolerance on a stored score against the recomputed cosine similarity.
pub const SCORE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum InterchangeError {
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("anchor: {0}")]
    Anchor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Header describing the model that produced a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportManifest {
    pub model: String,
    pub image_size: u32,
    pub patch_size: u32,
    pub tokens: u32,
    pub embedding_dim: u32,
    pub prompt: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    manifest: ExportManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub tile: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl PredictionRecord {
    fn validate(&self) -> Result<(), String> {
        parse_sub_tile_key(&self.tile).map_err(|e| e.to_string())?;
        if !self.score.is_finite() || !(-1.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [-1, 1]", self.score));
        }
        if let Some(e) = &self.embedding {
            Embedding::new(e.clone()).map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    pub fn to_prediction(&self) -> Prediction {
        Prediction {
            bbox: self.bbox,
            embedding: self.embedding.clone().and_then(|e| Embedding::new(e).ok()),
            score: self.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionFile {
    pub manifest: Option<ExportManifest>,
    pub records: Vec<PredictionRecord>,
}

impl PredictionFile {
    /// Predictions grouped by sub-tile key, in file order within each key.
    pub fn by_tile(&self) -> BTreeMap<String, Vec<Prediction>> {
        let mut out: BTreeMap<String, Vec<Prediction>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.tile.clone()).or_default().push(r.to_prediction());
        }
        out
    }
}

/// Reads a prediction file. Blank lines are skipped; errors carry 1-based
/// line numbers.
pub fn read_predictions<R: BufRead>(input: R) -> Result<PredictionFile, InterchangeError> {
    let mut file = PredictionFile::default();
    let mut seen_content = false;
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let err = |message: String| InterchangeError::Record { line: line_no, message };
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| err(e.to_string()))?;
        if value.get("manifest").is_some() {
            if seen_content {
                return Err(err("manifest header must be the first line".into()));
            }
            let h: Header = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
            file.manifest = Some(h.manifest);
        } else {
            let r: PredictionRecord = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
            r.validate().map_err(err)?;
            file.records.push(r);
        }
        seen_content = true;
    }
    Ok(file)
}

pub fn write_predictions<W: Write>(mut out: W, file: &PredictionFile) -> Result<(), InterchangeError> {
    if let Some(m) = &file.manifest {
        serde_json::to_writer(&mut out, &Header { manifest: m.clone() })?;
        out.write_all(b"\n")?;
    }
    for r in &file.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorFile {
    pub anchor: Vec<f64>,
}

impl AnchorFile {
    pub fn embedding(&self) -> Result<Embedding, InterchangeError> {
        Embedding::new(self.anchor.clone()).map_err(|e| InterchangeError::Anchor(e.to_string()))
    }

    pub fn norm(&self) -> f64 {
        self.anchor.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn read_anchor(text: &str) -> Result<AnchorFile, InterchangeError> {
    let a: AnchorFile = serde_json::from_str(text)?;
    a.embedding()?;
    Ok(a)
}

pub fn write_anchor<W: Write>(mut out: W, anchor: &Embedding) -> Result<(), InterchangeError> {
    serde_json::to_writer(&mut out, &AnchorFile { anchor: anchor.values().to_vec() })?;
    out.write_all(b"\n")?;
    Ok(())
}

/// A record whose stored score disagrees with the recomputed similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMismatch {
    pub index: usize,
    pub stored: f64,
    pub recomputed: f64,
}

/// Recomputes the cosine similarity of every record carrying an embedding
/// and returns the ones differing from the stored score by more than `tol`.
pub fn check_scores(records: &[PredictionRecord], anchor: &Embedding, tol: f64) -> Result<Vec<ScoreMismatch>, InterchangeError> {
    let mut bad = Vec::new();
    for (index, r) in records.iter().enumerate() {
        let Some(e) = &r.embedding else { continue };
        let e = Embedding::new(e.clone()).map_err(|e| InterchangeError::Record { line: index + 1, message: e.to_string() })?;
        let recomputed = cosine_similarity(&e, anchor).map_err(|e| InterchangeError::Anchor(e.to_string()))?;
        if (recomputed - r.score).abs() > tol {
            bad.push(ScoreMismatch { index, stored: r.score, recomputed });
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> ExportManifest {
        ExportManifest {
            model: "owlv2-base-patch16-ensemble".into(),
            image_size: 960,
            patch_size: 16,
            tokens: 3600,
            embedding_dim: 512,
            prompt: "crater".into(),
        }
    }

    fn record(tile: &str, score: f64, embedding: Option<Vec<f64>>) -> PredictionRecord {
        PredictionRecord { tile: tile.into(), bbox: BBox::new(0.5, 0.5, 0.1, 0.2).unwrap(), score, embedding }
    }

    #[test]
    fn round_trip_with_header() {
        let file = PredictionFile {
            manifest: Some(manifest()),
            records: vec![
                record("M1_1508_100_2048/3", 0.25, Some(vec![0.6, 0.8])),
                record("M1_1508_100_2048/15", -0.5, None),
            ],
        };
        let mut buf = Vec::new();
        write_predictions(&mut buf, &file).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with(r#"{"tile":"M1_1508_100_2048/3","box":[0.5,0.5,0.1,0.2],"score":0.25"#));
        assert_eq!(read_predictions(&buf[..]).unwrap(), file);
    }

    #[test]
    fn bad_lines_report_line_numbers() {
        let cases = [
            ("{\"tile\":\"M1_1_2_3/0\",\"box\":[0.5,0.5,0.1],\"score\":0.1}", 1),
            ("\n{\"tile\":\"nope\",\"box\":[0.5,0.5,0.1,0.1],\"score\":0.1}", 2),
            ("{\"tile\":\"M1_1_2_3/0\",\"box\":[0.5,0.5,0.1,0.1],\"score\":1.5}", 1),
            ("{\"tile\":\"M1_1_2_3/0\",\"box\":[0.95,0.5,0.2,0.1],\"score\":0.1}", 1),
            ("{\"tile\":\"M1_1_2_3/0\",\"box\":[0.5,0.5,0.1,0.1],\"score\":0.1,\"extra\":1}", 1),
            ("{\"tile\":\"M1_1_2_3/0\",\"box\":[0.5,0.5,0.1,0.1],\"score\":0.1,\"embedding\":[0,0]}", 1),
            ("{\"tile\":\"M1_1_2_3/0\",\"box\":[0.5,0.5,0.1,0.1],\"score\":0.1}\n{\"manifest\":{}}", 2),
            ("not json", 1),
        ];
        for (text, line) in cases {
            match read_predictions(text.as_bytes()) {
                Err(InterchangeError::Record { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn grouping_keeps_file_order() {
        let file = PredictionFile {
            manifest: None,
            records: vec![record("M1_1_2_3/1", 0.1, None), record("M1_1_2_3/0", 0.2, None), record("M1_1_2_3/1", 0.3, None)],
        };
        let g = file.by_tile();
        assert_eq!(g.len(), 2);
        assert_eq!(g["M1_1_2_3/1"].iter().map(|p| p.score).collect::<Vec<_>>(), vec![0.1, 0.3]);
    }

    #[test]
    fn anchor_round_trip_and_validation() {
        let e = Embedding::new(vec![3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_anchor(&mut buf, &e).unwrap();
        let a = read_anchor(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert_eq!(a.embedding().unwrap(), e);
        assert!(read_anchor(r#"{"anchor": []}"#).is_err());
        assert!(read_anchor(r#"{"anchor": [0, 0]}"#).is_err());
        assert!(read_anchor(r#"{"vector": [1]}"#).is_err());
    }

    #[test]
    fn score_recomputation() {
        let anchor = Embedding::new(vec![1.0, 0.0]).unwrap();
        let records = vec![
            record("M1_1_2_3/0", 0.6, Some(vec![0.6, 0.8])),
            record("M1_1_2_3/0", 0.9, Some(vec![0.6, 0.8])),
            record("M1_1_2_3/0", 0.3, None),
            // Unnormalized embeddings are compared after normalization.
            record("M1_1_2_3/0", 0.6, Some(vec![6.0, 8.0])),
        ];
        let bad = check_scores(&records, &anchor, SCORE_TOLERANCE).unwrap();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].index, 1);
        assert!((bad[0].recomputed - 0.6).abs() < 1e-12);
    }
}
