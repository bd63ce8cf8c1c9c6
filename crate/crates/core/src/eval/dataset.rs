//! On-disk corpora: `images/<id>.png|.jpg`, `masks/<id>.png` holding instance
//! ids (0 is background) and an optional `manifest.tsv` of `id<TAB>split`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::GrayImage;

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, ImageTensor};

/// One object instance of one image.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub id: String,
    pub instance: u8,
    pub split: String,
    pub image: Arc<ImageTensor>,
    pub mask: BinaryMask,
}

#[derive(Debug, Default)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
    /// `(id, reason)` for every image that was not loaded.
    pub skipped: Vec<(String, String)>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Vec<DatasetItem> {
        self.items.iter().filter(|i| i.split == name).cloned().collect()
    }
}

fn read_manifest(dir: &Path) -> Result<Vec<(String, String)>> {
    let path = dir.join("manifest.tsv");
    if !path.exists() {
        let mut ids: Vec<String> = fs::read_dir(dir.join("images"))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.path().file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect();
        ids.sort();
        ids.dedup();
        return Ok(ids.into_iter().map(|id| (id, "all".to_string())).collect());
    }
    let text = fs::read_to_string(&path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let mut cols = line.split('\t');
            match (cols.next(), cols.next()) {
                (Some(id), Some(split)) => Ok((id.trim().to_string(), split.trim().to_string())),
                _ => Err(Error::Dataset(format!("manifest line {} is not `id<TAB>split`", n + 1))),
            }
        })
        .collect()
}

fn image_path(dir: &Path, id: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg"].iter().map(|ext| dir.join("images").join(format!("{id}.{ext}"))).find(|p| p.exists())
}

fn load_pair(dir: &Path, id: &str) -> Result<(ImageTensor, GrayImage)> {
    let img_path = image_path(dir, id).ok_or_else(|| Error::Dataset(format!("no image for {id}")))?;
    let image = ImageTensor::load(img_path)?;
    let mask = image::open(dir.join("masks").join(format!("{id}.png")))?.to_luma8();
    let (mw, mh) = mask.dimensions();
    if (mh as usize, mw as usize) != image.dims() {
        return Err(Error::Dataset(format!("mask {mh}x{mw} does not match image {:?}", image.dims())));
    }
    Ok((image, mask))
}

/// Loads every instance of every listed image; unreadable or mismatched
/// items and masks without any instance are skipped with a warning.
pub fn ingest_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut ds = Dataset::default();
    for (id, split) in read_manifest(dir)? {
        let (image, mask) = match load_pair(dir, &id) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("skipping {id}: {e}");
                ds.skipped.push((id, e.to_string()));
                continue;
            }
        };
        let mut ids: Vec<u8> = mask.pixels().map(|p| p.0[0]).filter(|&v| v != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            log::warn!("skipping {id}: mask has no foreground");
            ds.skipped.push((id, "empty mask".into()));
            continue;
        }
        let image = Arc::new(image);
        let (w, h) = mask.dimensions();
        for inst in ids {
            let m = BinaryMask::from_fn(h as usize, w as usize, |(r, c)| mask.get_pixel(c as u32, r as u32).0[0] == inst);
            ds.items.push(DatasetItem { id: id.clone(), instance: inst, split: split.clone(), image: image.clone(), mask: m });
        }
    }
    Ok(ds)
}
