use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{AdapterError, FixedTargets, ToyProblem, ToyTrainConfig};

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter index with the largest error.
    pub worst_index: usize,
    pub n_params: usize,
}

/// Compares `analytic` (the gradient of `loss_at` at `params`) with central
/// differences.
///
/// The relative error of parameter `i` is
/// `|g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8)`.
pub fn grad_check<F>(loss_at: F, params: &[f64], analytic: &[f64]) -> Result<GradCheckReport, AdapterError>
where
    F: Fn(&[f64]) -> Result<f64, AdapterError> + Sync,
{
    if !loss_at(params)?.is_finite() {
        return Err(AdapterError::NonFinite { index: None });
    }
    if analytic.len() != params.len() {
        return Err(super::dim_err(params.len(), analytic.len()));
    }
    let fd: Vec<Result<f64, AdapterError>> = (0..params.len())
        .into_par_iter()
        .map(|i| {
            let mut probe = params.to_vec();
            probe[i] = params[i] + FD_STEP;
            let plus = loss_at(&probe)?;
            probe[i] = params[i] - FD_STEP;
            let minus = loss_at(&probe)?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(AdapterError::NonFinite { index: Some(i) });
            }
            Ok((plus - minus) / (2.0 * FD_STEP))
        })
        .collect();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0, n_params: params.len() };
    for (i, fd) in fd.into_iter().enumerate() {
        let fd = fd?;
        let ga = analytic[i];
        let rel = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Gradient check of the total loss of `problem` with LoRA parameters drawn
/// uniformly from `[-0.5, 0.5]` by `seed`. The matching and CIoU `alpha`s are
/// computed once at that point and held fixed.
pub fn detector_grad_check(problem: &ToyProblem, cfg: &ToyTrainConfig, seed: u64) -> Result<GradCheckReport, AdapterError> {
    let mut det = problem.detector.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<f64> = (0..det.n_trainable()).map(|_| rng.random_range(-0.5..0.5)).collect();
    det.set_trainable_params(&params)?;
    let (weights, tau) = (cfg.weights(), cfg.tau);
    let (_, grad, scenes) = det.loss_and_grad(&problem.scenes, &problem.anchor, weights, tau, None)?;
    let fixed: Vec<FixedTargets> = scenes.into_iter().map(|s| s.targets).collect();
    let loss_at = |q: &[f64]| {
        let mut d = det.clone();
        d.set_trainable_params(q)?;
        Ok(d.loss(&problem.scenes, &problem.anchor, weights, tau, Some(&fixed))?.0.l_total)
    };
    grad_check(loss_at, &params, &grad)
}
