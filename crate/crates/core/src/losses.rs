//! Anchor-contrastive classification loss, weighted total loss and the
//! warmup-cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Default hinge margin for negatives.
pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_ALPHA_BOX: f64 = 7.5;
pub const DEFAULT_ALPHA_CLS: f64 = 3.0;
/// Fraction of optimizer steps spent in linear warmup.
pub const WARMUP_FRACTION: f64 = 0.10;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(&'static str),
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("batch has {0} embeddings but {1} labels")]
    LabelCount(usize, usize),
    #[error("invalid schedule: {0}")]
    InvalidConfig(&'static str),
}

/// Unit-norm embedding vector. Normalized once at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, LossError> {
        if values.is_empty() {
            return Err(LossError::InvalidEmbedding("empty vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LossError::InvalidEmbedding("non-finite component"));
        }
        let norm = l2_norm(&values);
        if norm == 0.0 {
            return Err(LossError::InvalidEmbedding("zero vector"));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = LossError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Embedding::new(v)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64, LossError> {
    if a.dim() != b.dim() {
        return Err(LossError::DimensionMismatch(a.dim(), b.dim()));
    }
    Ok(dot(a.values(), b.values()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub embeddings: Vec<Embedding>,
    pub labels: Vec<Label>,
    pub anchor: Embedding,
    pub tau: f64,
}

/// Mean pull of positives toward the anchor plus mean hinge on negatives.
/// An empty positive or negative set contributes zero.
pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<f64, LossError> {
    if batch.embeddings.len() != batch.labels.len() {
        return Err(LossError::LabelCount(batch.embeddings.len(), batch.labels.len()));
    }
    let (mut pos_sum, mut pos_n, mut neg_sum, mut neg_n) = (0.0, 0usize, 0.0, 0usize);
    for (e, label) in batch.embeddings.iter().zip(&batch.labels) {
        let cos = cosine_similarity(e, &batch.anchor)?;
        match label {
            Label::Positive => {
                pos_sum += 1.0 - cos;
                pos_n += 1;
            }
            Label::Negative => {
                neg_sum += (cos - batch.tau).max(0.0);
                neg_n += 1;
            }
        }
    }
    Ok(mean_or_zero(pos_sum, pos_n) + mean_or_zero(neg_sum, neg_n))
}

fn mean_or_zero(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Contrastive loss on raw (unnormalized) embeddings, with the gradient of
/// the loss w.r.t. each raw vector. `anchor` must already be unit norm.
pub fn contrastive_loss_raw(
    raw: &[Vec<f64>],
    labels: &[Label],
    anchor: &Embedding,
    tau: f64,
) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    if raw.len() != labels.len() {
        return Err(LossError::LabelCount(raw.len(), labels.len()));
    }
    let t = anchor.values();
    let n_pos = labels.iter().filter(|l| **l == Label::Positive).count();
    let n_neg = labels.len() - n_pos;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(raw.len());
    let (mut pos_sum, mut neg_sum) = (0.0, 0.0);
    for (x, label) in raw.iter().zip(labels) {
        if x.len() != t.len() {
            return Err(LossError::DimensionMismatch(x.len(), t.len()));
        }
        let norm = l2_norm(x);
        if norm == 0.0 {
            return Err(LossError::InvalidEmbedding("zero vector"));
        }
        let cos = dot(x, t) / norm;
        // d cos / dx = (t - cos * x/|x|) / |x|
        let d_cos: Vec<f64> = x.iter().zip(t).map(|(xi, ti)| (ti - cos * xi / norm) / norm).collect();
        let coeff = match label {
            Label::Positive => {
                pos_sum += 1.0 - cos;
                -1.0 / n_pos as f64
            }
            Label::Negative => {
                let margin = cos - tau;
                if margin > 0.0 {
                    neg_sum += margin;
                    1.0 / n_neg as f64
                } else {
                    0.0
                }
            }
        };
        grads.push(d_cos.into_iter().map(|d| coeff * d).collect());
    }
    loss += mean_or_zero(pos_sum, n_pos) + mean_or_zero(neg_sum, n_neg);
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_box: f64,
    pub alpha_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha_box: DEFAULT_ALPHA_BOX, alpha_cls: DEFAULT_ALPHA_CLS }
    }
}

pub fn total_loss(l_box: f64, l_cls: f64, alpha_box: f64, alpha_cls: f64) -> f64 {
    alpha_box * l_box + alpha_cls * l_cls
}

/// Number of warmup steps for a run of `total_steps` optimizer steps.
pub fn warmup_steps(total_steps: u64) -> u64 {
    let w = (WARMUP_FRACTION * total_steps as f64).ceil() as u64;
    w.min(total_steps.saturating_sub(1))
}

/// Linear warmup from 0 to `peak`, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, peak: f64) -> Result<f64, LossError> {
    if total_steps == 0 {
        return Err(LossError::InvalidConfig("total_steps must be positive"));
    }
    if !(peak > 0.0) {
        return Err(LossError::InvalidConfig("peak learning rate must be positive"));
    }
    Ok(lr_at(step.min(total_steps) as f64, total_steps, peak))
}

/// The schedule as a function of a continuous step position.
pub(crate) fn lr_at(step: f64, total_steps: u64, peak: f64) -> f64 {
    let warm = warmup_steps(total_steps) as f64;
    let total = total_steps as f64;
    if step <= warm {
        if warm == 0.0 {
            return 0.0;
        }
        return peak * step / warm;
    }
    let progress = ((step - warm) / (total - warm)).clamp(0.0, 1.0);
    if progress >= 1.0 {
        return 0.0;
    }
    peak * 0.5 * (1.0 + (PI * progress).cos())
}
