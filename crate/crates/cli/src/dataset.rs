//! Dataset directories: `<image_id>.csil` label rasters with optional
//! `<image_id>.csif` confidence rasters next to them.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use csi_core::raster::{read_confidence, read_raster, write_confidence, write_raster};
use csi_core::{ConfidenceRaster, LabelRaster};

/// Image IDs of every `.csil` file in `dir`, sorted.
pub fn image_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "csil") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn label_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.csil"))
}

pub fn confidence_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.csif"))
}

pub fn read_label(path: &Path) -> Result<LabelRaster> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    read_raster(&bytes).with_context(|| format!("decoding {}", path.display()))
}

pub fn read_confidence_opt(path: &Path) -> Result<Option<ConfidenceRaster>> {
    if !path.exists() {
        return Ok(None);
    }
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    read_confidence(&bytes).map(Some).with_context(|| format!("decoding {}", path.display()))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_label(path: &Path, raster: &LabelRaster) -> Result<()> {
    write(path, &write_raster(raster))
}

pub fn write_conf(path: &Path, raster: &ConfidenceRaster) -> Result<()> {
    write(path, &write_confidence(raster))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().context("starting worker pool")
}
