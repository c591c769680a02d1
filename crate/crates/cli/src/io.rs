use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use crater_core::dataset::TileRecordMeta;
use image::GrayImage;
use serde::Serialize;

pub fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Directory containing `path`, for resolving relative references.
pub fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn read_records(path: &Path) -> Result<Vec<TileRecordMeta>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TileRecordMeta =
            serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        out.push(r);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path).with_context(|| format!("reading raster {}", path.display()))?.to_luma8())
}

pub fn save_gray(path: &Path, img: &GrayImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Raster of `record`, whose `image` is relative to `base`.
pub fn record_raster(record: &TileRecordMeta, base: &Path) -> Result<PathBuf> {
    match &record.image {
        Some(p) => Ok(base.join(p)),
        None => bail!("record {} has no image path", record.key()),
    }
}

/// Re-expresses `image` (relative to `from`) relative to `to`.
pub fn rebase(image: &str, from: &Path, to: &Path) -> Result<String> {
    let target = std::path::absolute(from.join(image))?;
    let to = std::path::absolute(to)?;
    let rel = pathdiff::diff_paths(&target, &to).unwrap_or(target);
    Ok(rel.to_string_lossy().replace('\\', "/"))
}
