use std::collections::BTreeSet;

use anyhow::{bail, Context, Result};
use crater_core::augment::{apply_sub_policy, sample_and_apply, sample_rng, AugmentLog, PolicyRegistry};
use crater_core::dataset::TileRecordMeta;
use log::info;
use rayon::prelude::*;

use crate::io::{base_dir, load_gray, read_records, record_raster, save_gray, write_jsonl};
use crate::{AugmentArgs, Violation};

pub fn run(args: &AugmentArgs, seed: u64) -> Result<()> {
    let registry = match &args.policy {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            PolicyRegistry::parse(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PolicyRegistry::default(),
    };
    if args.print_policy {
        print!("{}", registry.to_table());
        return Ok(());
    }
    if let Some(k) = args.sub_policy {
        if k == 0 || k > registry.sub_policies.len() {
            bail!("--sub-policy must be in 1..={}", registry.sub_policies.len());
        }
    }
    let records = read_records(&args.records)?;
    let mut keys = BTreeSet::new();
    for r in &records {
        if !keys.insert(r.key()) {
            bail!("duplicate record {}", r.key());
        }
    }
    let base = base_dir(&args.records);
    let results: Vec<(TileRecordMeta, TileRecordMeta, AugmentLog)> = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| -> Result<_> {
            let pixels = load_gray(&record_raster(r, &base)?)?;
            let mut rng = sample_rng(seed, i as u64);
            let s = match args.sub_policy {
                Some(k) => apply_sub_policy(&pixels, &r.boxes, &registry, k - 1, &mut rng),
                None => sample_and_apply(&pixels, &r.boxes, &registry, &mut rng),
            };
            let stem = format!("tiles/{}/{}", r.tile, r.sub_tile);
            let (orig_rel, aug_rel) = (format!("{stem}.png"), format!("{stem}_aug.png"));
            save_gray(&args.out.join(&orig_rel), &pixels)?;
            save_gray(&args.out.join(&aug_rel), &s.pixels)?;
            let original = TileRecordMeta { image: Some(orig_rel), augmented: false, ..r.clone() };
            let augmented = TileRecordMeta { boxes: s.boxes, image: Some(aug_rel), augmented: true, ..r.clone() };
            let log = AugmentLog { tile: r.key(), sub_policy: s.sub_policy, ops: s.applied_ops, dropped_boxes: s.dropped };
            Ok((original, augmented, log))
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(2 * results.len());
    let mut logs = Vec::with_capacity(results.len());
    for (o, a, l) in results {
        out.push(o);
        out.push(a);
        logs.push(l);
    }
    if out.len() != 2 * records.len() || logs.len() != records.len() {
        return Err(Violation(format!("{} inputs gave {} records", records.len(), out.len())).into());
    }
    write_jsonl(&args.out.join("records.jsonl"), &out)?;
    write_jsonl(&args.out.join("applied_ops.jsonl"), &logs)?;
    let dropped: usize = logs.iter().map(|l| l.dropped_boxes.len()).sum();
    info!("{} augmented records, {dropped} boxes dropped", logs.len());
    println!("records={} augmented={} dropped_boxes={dropped}", out.len(), logs.len());
    Ok(())
}
