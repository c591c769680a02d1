use anyhow::{Context, Result};
use crater_core::adapter::{detector_grad_check, toy_train, write_trajectory_csv, ToyProblem, ToyTrainConfig};
use log::info;

use crate::io::create;
use crate::{GradCheckArgs, ToyTrainArgs, Violation};

fn load_config(path: Option<&std::path::Path>) -> Result<ToyTrainConfig> {
    match path {
        Some(p) => ToyTrainConfig::from_path(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(ToyTrainConfig::default()),
    }
}

pub fn train(args: &ToyTrainArgs, seed: u64) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let outcome = toy_train(&cfg, seed)?;
    let mut w = create(&args.out)?;
    write_trajectory_csv(&outcome.trajectory, &mut w)?;
    let (first, last) = (outcome.trajectory.first(), outcome.trajectory.last());
    println!(
        "initial={:.6} final={:.6} ratio={:.4}",
        first.map_or(f64::NAN, |r| r.l_total),
        last.map_or(f64::NAN, |r| r.l_total),
        outcome.loss_ratio()
    );
    Ok(())
}

pub fn grad_check(args: &GradCheckArgs, seed: u64) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let problem = ToyProblem::new(&cfg, seed)?;
    let mut worst = 0.0f64;
    for point in 0..args.points {
        let rep = detector_grad_check(&problem, &cfg, seed.wrapping_mul(1_000_003).wrapping_add(point as u64))?;
        info!("point {point}: max_rel_error {:.3e} at parameter {}", rep.max_rel_error, rep.worst_index);
        worst = worst.max(rep.max_rel_error);
    }
    println!("max_rel_error={worst:.3e}");
    if !(worst < args.tolerance) {
        return Err(Violation(format!("max relative error {worst:.3e} >= {:.1e}", args.tolerance)).into());
    }
    Ok(())
}
