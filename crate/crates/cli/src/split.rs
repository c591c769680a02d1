use anyhow::{bail, Result};
use crater_core::dataset::{grouped_split, leaked_ids, Split, TileRecordMeta};
use log::info;

use crate::io::{base_dir, create, read_records, rebase, write_jsonl};
use crate::{SplitArgs, Violation};

pub fn run(args: &SplitArgs, seed: u64) -> Result<()> {
    let [a, b, c] = args.ratios[..] else { bail!("--ratios needs three values") };
    let records = read_records(&args.records)?;
    let manifest = grouped_split(records.iter().map(|r| r.tile.image_id.as_str()), [a, b, c], seed)?;
    let from = base_dir(&args.records);
    let mut sets: Vec<(Split, Vec<TileRecordMeta>)> = Split::ALL.iter().map(|s| (*s, Vec::new())).collect();
    for r in &records {
        let split = manifest.split_of(&r.tile.image_id).expect("every image id is assigned");
        let mut r = r.clone();
        if let Some(img) = &r.image {
            r.image = Some(rebase(img, &from, &args.out)?);
        }
        sets[split as usize].1.push(r);
    }
    let leaked = leaked_ids(&sets);
    if !leaked.is_empty() {
        return Err(Violation(format!("image ids in several splits: {leaked:?}")).into());
    }
    let mut w = create(&args.out.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    for (split, set) in &sets {
        write_jsonl(&args.out.join(format!("{}.jsonl", split.name())), set)?;
        info!("{}: {} records", split.name(), set.len());
    }
    let counts = manifest.counts();
    println!("images train={} validation={} test={}", counts[0], counts[1], counts[2]);
    Ok(())
}
