use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::detector::{DetectorConfig, LossBreakdown, ToyDetector};
use super::AdapterError;
use crate::matching::MatchingError;
use crate::losses::{lr_schedule, Embedding, LossWeights, DEFAULT_ALPHA_BOX, DEFAULT_ALPHA_CLS, DEFAULT_TAU};

/// Toy training configuration, read from TOML key-value files.
/// Missing keys take the reference defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTrainConfig {
    pub grid: usize,
    pub patch_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub d_e: usize,
    pub rank_encoder: usize,
    pub rank_heads: usize,
    pub positional_encoding: bool,
    pub steps: u64,
    /// Peak learning rate of the warmup + cosine schedule. 0 disables updates.
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub n_scenes: usize,
    pub max_craters: usize,
    /// Standard deviation of background patch noise.
    pub noise: f64,
    pub tau: f64,
    pub alpha_box: f64,
    pub alpha_cls: f64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        let d = DetectorConfig::default();
        Self {
            grid: d.grid,
            patch_dim: d.patch_dim,
            d_model: d.d_model,
            n_heads: d.n_heads,
            n_layers: d.n_layers,
            d_ff: d.d_ff,
            d_e: d.d_e,
            rank_encoder: d.rank_encoder,
            rank_heads: d.rank_heads,
            positional_encoding: d.positional_encoding,
            steps: 200,
            peak_lr: 0.05,
            weight_decay: 1e-3,
            n_scenes: 8,
            max_craters: 3,
            noise: 0.3,
            tau: DEFAULT_TAU,
            alpha_box: DEFAULT_ALPHA_BOX,
            alpha_cls: DEFAULT_ALPHA_CLS,
        }
    }
}

impl ToyTrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, AdapterError> {
        let cfg: Self = toml::from_str(text).map_err(|e| AdapterError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, AdapterError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AdapterError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            grid: self.grid,
            patch_dim: self.patch_dim,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            d_e: self.d_e,
            rank_encoder: self.rank_encoder,
            rank_heads: self.rank_heads,
            positional_encoding: self.positional_encoding,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { alpha_box: self.alpha_box, alpha_cls: self.alpha_cls }
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        self.detector().validate()?;
        if self.steps == 0 {
            return Err(AdapterError::Config("steps must be positive".into()));
        }
        if !(self.peak_lr >= 0.0) || !self.peak_lr.is_finite() {
            return Err(AdapterError::Config(format!("peak_lr must be finite and non-negative, got {}", self.peak_lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(AdapterError::Config("weight_decay must be non-negative".into()));
        }
        if self.n_scenes == 0 {
            return Err(AdapterError::Config("n_scenes must be positive".into()));
        }
        if self.max_craters == 0 || self.max_craters > self.grid * self.grid {
            return Err(AdapterError::Config(format!("max_craters must be in 1..={}", self.grid * self.grid)));
        }
        if !(self.noise >= 0.0) {
            return Err(AdapterError::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// A synthetic training scene: `grid²` patch feature rows and the
/// ground-truth boxes of the planted craters.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub patches: Array2<f64>,
    pub gts: Vec<[f64; 4]>,
}

const MIN_CRATER: f64 = 0.1;
const MAX_CRATER: f64 = 0.3;

fn unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Scenes with 1..=`max_craters` craters each. A crater patch carries a
/// shared signature direction plus a second direction scaled by the crater's
/// size. Boxes are square and centered on their patch.
pub fn generate_scenes<R: Rng + ?Sized>(cfg: &ToyTrainConfig, rng: &mut R) -> Vec<Scene> {
    let (g, p) = (cfg.grid, cfg.patch_dim);
    let signature: Vec<f64> = unit_vector(rng, p).into_iter().map(|v| v * 3.0).collect();
    let size_dir = unit_vector(rng, p);
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    (0..cfg.n_scenes)
        .map(|_| {
            let mut patches = Array2::from_shape_fn((g * g, p), |_| if cfg.noise > 0.0 { noise.sample(rng) } else { 0.0 });
            let count = rng.random_range(1..=cfg.max_craters);
            let cells = sample(rng, g * g, count).into_vec();
            let mut gts = Vec::with_capacity(count);
            for cell in cells {
                let size = rng.random_range(MIN_CRATER..MAX_CRATER);
                let code = 2.0 * (size - MIN_CRATER) / (MAX_CRATER - MIN_CRATER) - 1.0;
                for k in 0..p {
                    patches[[cell, k]] += signature[k] + 2.0 * code * size_dir[k];
                }
                let (r, c) = (cell / g, cell % g);
                gts.push([(c as f64 + 0.5) / g as f64, (r as f64 + 0.5) / g as f64, size, size]);
            }
            Scene { patches, gts }
        })
        .collect()
}

pub fn random_anchor<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Embedding {
    Embedding::new(unit_vector(rng, dim)).expect("unit vector")
}

/// Detector, data and anchor for one seeded run.
#[derive(Debug, Clone)]
pub struct ToyProblem {
    pub detector: ToyDetector,
    pub scenes: Vec<Scene>,
    pub anchor: Embedding,
}

impl ToyProblem {
    pub fn new(cfg: &ToyTrainConfig, seed: u64) -> Result<Self, AdapterError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let detector = ToyDetector::new(cfg.detector(), &mut rng)?;
        let anchor = random_anchor(cfg.d_e, &mut rng);
        let scenes = generate_scenes(cfg, &mut rng);
        Ok(Self { detector, scenes, anchor })
    }
}

/// One row of the loss trajectory. Row `step` holds the loss before update
/// `step` and the learning rate that update uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: u64,
    pub lr: f64,
    pub l_box: f64,
    pub l_cls: f64,
    pub l_total: f64,
}

impl TrajectoryRow {
    fn new(step: u64, lr: f64, loss: LossBreakdown) -> Self {
        Self { step, lr, l_box: loss.l_box, l_cls: loss.l_cls, l_total: loss.l_total }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trajectory: Vec<TrajectoryRow>,
    pub problem: ToyProblem,
}

impl TrainOutcome {
    /// Final over initial total loss.
    pub fn loss_ratio(&self) -> f64 {
        let first = self.trajectory.first().map_or(f64::NAN, |r| r.l_total);
        let last = self.trajectory.last().map_or(f64::NAN, |r| r.l_total);
        last / first
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn learning_rate(step: u64, cfg: &ToyTrainConfig) -> Result<f64, AdapterError> {
    if cfg.peak_lr == 0.0 {
        return Ok(0.0);
    }
    Ok(lr_schedule(step, cfg.steps, cfg.peak_lr)?)
}

/// Full-batch AdamW on the LoRA parameters with per-step Hungarian
/// re-matching. Returns `steps + 1` trajectory rows.
pub fn train(problem: &mut ToyProblem, cfg: &ToyTrainConfig) -> Result<Vec<TrajectoryRow>, AdapterError> {
    cfg.validate()?;
    let weights = cfg.weights();
    let mut params = problem.detector.trainable_params();
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut rows = Vec::with_capacity(cfg.steps as usize + 1);
    for step in 0..=cfg.steps {
        let (loss, grad, _) = match problem.detector.loss_and_grad(&problem.scenes, &problem.anchor, weights, cfg.tau, None) {
            Ok(v) => v,
            // Non-finite predictions surface as non-finite matching costs.
            Err(AdapterError::Matching(MatchingError::InvalidCost { .. })) => return Err(AdapterError::Diverged { step }),
            Err(e) => return Err(e),
        };
        if !loss.l_total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(AdapterError::Diverged { step });
        }
        let lr = learning_rate(step, cfg)?;
        rows.push(TrajectoryRow::new(step, lr, loss));
        if step == cfg.steps {
            break;
        }
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
        for i in 0..params.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS) + cfg.weight_decay * params[i];
            params[i] -= lr * update;
        }
        problem.detector.set_trainable_params(&params)?;
    }
    Ok(rows)
}

/// Builds the seeded problem and trains it.
pub fn toy_train(cfg: &ToyTrainConfig, seed: u64) -> Result<TrainOutcome, AdapterError> {
    let mut problem = ToyProblem::new(cfg, seed)?;
    let trajectory = train(&mut problem, cfg)?;
    Ok(TrainOutcome { trajectory, problem })
}

/// Writes `step,lr,l_box,l_cls,l_total` rows.
pub fn write_trajectory_csv<W: Write>(rows: &[TrajectoryRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
