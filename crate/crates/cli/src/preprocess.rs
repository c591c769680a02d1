use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;

use anyhow::{Context, Result};
use crater_core::dataset::{
    preprocess_tile, read_annotations, read_exclusion_list, removal_counts, CircleAnnotation, CleaningParams, Removal,
    TileId, TileRecordMeta,
};
use log::{info, warn};
use rayon::prelude::*;

use crate::io::{create, load_gray, open, save_gray, write_jsonl};
use crate::{PreprocessArgs, Violation};

struct Processed {
    records: Vec<TileRecordMeta>,
    removals: Vec<Removal>,
    n_annotations: usize,
    excluded: bool,
}

/// Tiles named by the annotations plus any `<tile>.png` in the raster directory.
fn collect_tiles(args: &PreprocessArgs) -> Result<BTreeMap<TileId, Vec<CircleAnnotation>>> {
    let groups = read_annotations(open(&args.annotations)?).with_context(|| format!("reading {}", args.annotations.display()))?;
    let mut tiles: BTreeMap<TileId, Vec<CircleAnnotation>> = groups.into_iter().map(|g| (g.tile, g.annotations)).collect();
    let entries = fs::read_dir(&args.rasters).with_context(|| format!("listing {}", args.rasters.display()))?;
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_none_or(|e| e != "png") {
            continue;
        }
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
        match stem.parse::<TileId>() {
            Ok(t) => {
                tiles.entry(t).or_default();
            }
            Err(_) => warn!("ignoring raster with unparseable name {}", path.display()),
        }
    }
    Ok(tiles)
}

pub fn run(args: &PreprocessArgs) -> Result<()> {
    let params = CleaningParams {
        accuracy_threshold: args.accuracy_threshold,
        black_level: args.black_level,
        max_black_fraction: args.max_black_fraction,
        min_diameter_px: args.min_diameter_px,
    };
    params.validate()?;
    let excluded: BTreeSet<TileId> = match &args.exclusion_list {
        Some(p) => read_exclusion_list(open(p)?).with_context(|| format!("reading {}", p.display()))?,
        None => BTreeSet::new(),
    };
    let tiles = collect_tiles(args)?;
    let work: Vec<(&TileId, &Vec<CircleAnnotation>)> = tiles.iter().collect();
    let processed: Vec<Processed> = work
        .par_iter()
        .map(|(tile, anns)| -> Result<Processed> {
            let name = tile.to_string();
            let is_excluded = excluded.contains(tile);
            let pixels = if is_excluded {
                image::GrayImage::new(0, 0)
            } else {
                load_gray(&args.rasters.join(format!("{name}.png")))?
            };
            let outcome = preprocess_tile(tile, &pixels, anns, &params, is_excluded).with_context(|| format!("tile {name}"))?;
            let mut records = Vec::with_capacity(outcome.records.len());
            for r in &outcome.records {
                let rel = format!("tiles/{name}/{}.png", r.sub_tile);
                save_gray(&args.out.join(&rel), &r.pixels)?;
                records.push(r.meta(Some(rel)));
            }
            Ok(Processed { records, removals: outcome.removals, n_annotations: anns.len(), excluded: is_excluded })
        })
        .collect::<Result<_>>()?;

    let records: Vec<TileRecordMeta> = processed.iter().flat_map(|p| p.records.iter().cloned()).collect();
    let removals: Vec<Removal> = processed.iter().flat_map(|p| p.removals.iter().cloned()).collect();
    let n_annotations: usize = processed.iter().map(|p| p.n_annotations).sum();
    let n_boxes: usize = records.iter().map(|r| r.boxes.len()).sum();
    if n_boxes + removals.len() != n_annotations {
        return Err(Violation(format!("{n_annotations} annotations but {n_boxes} kept + {} removed", removals.len())).into());
    }

    write_jsonl(&args.out.join("records.jsonl"), &records)?;
    let mut audit = csv::Writer::from_writer(create(&args.out.join("audit.csv"))?);
    audit.write_record(["tile_name", "index", "reason"])?;
    for r in &removals {
        audit.write_record([r.tile_name.clone(), r.index.to_string(), r.reason.to_string()])?;
    }
    audit.flush()?;
    let mut ex = create(&args.out.join("excluded.txt"))?;
    for (tile, p) in tiles.keys().zip(&processed) {
        if p.excluded {
            writeln!(ex, "{tile}")?;
        }
    }
    ex.flush()?;

    info!("{} tiles, {} sub-tiles, {n_boxes} boxes kept", tiles.len(), records.len());
    for (reason, count) in removal_counts(&removals) {
        info!("removed {count} ({reason})");
    }
    println!("tiles={} records={} boxes={n_boxes} removed={}", tiles.len(), records.len(), removals.len());
    Ok(())
}
