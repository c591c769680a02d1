//! Crater detection toolkit.
//!
//! The crate covers the algorithmic core of a fine-tuned open-vocabulary
//! crater detector:
//!
//! - [`geometry`]: normalized boxes, IoU / CIoU and non-maximum suppression.
//! - [`matching`]: padded cost matrices and Hungarian set matching.
//! - [`losses`]: anchor-contrastive loss, weighted total loss, LR schedule.
//! - [`adapter`]: LoRA layers, multi-head attention and a toy detector with
//!   hand-written backward passes and a training loop.
//! - [`dataset`]: tile naming, annotation cleaning, 2048 → 512 tiling and
//!   grouped splits.
//! - [`augment`]: the five two-operation augmentation sub-policies.
//! - [`eval`]: TP/FP/FN counting, recall/precision and report rendering.
//! - [`interchange`]: JSON-lines prediction and anchor files produced by the
//!   model exporter.

pub mod adapter;
pub mod augment;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod interchange;
pub mod losses;
pub mod matching;

pub use geometry::{BBox, Prediction};
pub use losses::Embedding;
