use std::collections::BTreeMap;
use std::io::Write;

use anyhow::{bail, Context, Result};
use crater_core::eval::{evaluate_tiles, EvalReport, Thresholds};
use crater_core::interchange::{check_scores, read_anchor, read_predictions, SCORE_TOLERANCE};
use crater_core::BBox;
use log::info;

use crate::io::{create, open, read_records};
use crate::{EvalArgs, Violation};

pub fn run(args: &EvalArgs) -> Result<()> {
    let thresholds = Thresholds { tp_iou: args.tp_iou, nms_iou: args.nms_iou, score_threshold: args.score_threshold };
    thresholds.validate()?;
    let preds = read_predictions(open(&args.predictions)?).with_context(|| format!("reading {}", args.predictions.display()))?;
    if let Some(m) = &preds.manifest {
        info!("predictions from {} (prompt {:?})", m.model, m.prompt);
    }
    if let Some(path) = &args.anchor {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let anchor = read_anchor(&text).with_context(|| format!("reading {}", path.display()))?.embedding()?;
        let bad = check_scores(&preds.records, &anchor, SCORE_TOLERANCE)?;
        if let Some(first) = bad.first() {
            return Err(Violation(format!(
                "{} scores differ from the recomputed similarity, first at record {}: {} vs {}",
                bad.len(),
                first.index + 1,
                first.stored,
                first.recomputed
            ))
            .into());
        }
    }
    let mut gts: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
    for r in read_records(&args.ground_truth)? {
        let key = r.key();
        if gts.insert(key.clone(), r.boxes).is_some() {
            bail!("duplicate ground-truth record {key}");
        }
    }
    let per_image = evaluate_tiles(&preds.by_tile(), &gts, &thresholds)?;
    let report = EvalReport::from_counts(&per_image, thresholds)?;
    let table = report.render_table();
    print!("{table}");
    if let Some(p) = &args.table {
        let mut w = create(p)?;
        w.write_all(table.as_bytes())?;
        w.flush()?;
    }
    if let Some(p) = &args.csv {
        let mut w = create(p)?;
        w.write_all(report.render_csv()?.as_bytes())?;
        w.flush()?;
    }
    Ok(())
}
