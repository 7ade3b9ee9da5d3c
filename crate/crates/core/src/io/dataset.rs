use std::path::{Path, PathBuf};

use super::image::{is_image_path, load_image};
use crate::error::{Error, Result};
use crate::training::TrainingData;

/// Image files of the content set and of each style collection, sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub content_files: Vec<PathBuf>,
    pub style_collections: Vec<Vec<PathBuf>>,
    /// Non-image directory entries that were ignored.
    pub skipped: usize,
}

impl DatasetIndex {
    pub fn styles(&self) -> usize {
        self.style_collections.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.style_collections.iter().map(Vec::len).collect()
    }

    /// Decode every indexed file.
    pub fn load(&self) -> Result<TrainingData> {
        let load_all = |files: &[PathBuf]| files.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>();
        Ok(TrainingData {
            content: load_all(&self.content_files)?,
            styles: self.style_collections.iter().map(|c| load_all(c)).collect::<Result<_>>()?,
        })
    }
}

/// Image files directly inside `dir`, lexicographically ordered, plus the
/// number of other entries.
pub fn list_images(dir: &Path) -> Result<(Vec<PathBuf>, usize)> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut skipped = 0;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image_path(&path) {
            files.push(path);
        } else {
            skipped += 1;
        }
    }
    files.sort();
    Ok((files, skipped))
}

/// Index one directory per style collection plus an optional content
/// directory.
pub fn index_dataset(style_dirs: &[PathBuf], content_dir: Option<&Path>) -> Result<DatasetIndex> {
    if style_dirs.is_empty() {
        return Err(Error::Dataset("no style collections configured".into()));
    }
    let mut skipped = 0;
    let mut style_collections = Vec::with_capacity(style_dirs.len());
    for dir in style_dirs {
        let (files, s) = list_images(dir)?;
        if files.is_empty() {
            return Err(Error::Dataset(format!("style collection {} contains no images", dir.display())));
        }
        skipped += s;
        style_collections.push(files);
    }
    let content_files = match content_dir {
        Some(dir) => {
            let (files, s) = list_images(dir)?;
            if files.is_empty() {
                return Err(Error::Dataset(format!("content directory {} contains no images", dir.display())));
            }
            skipped += s;
            files
        }
        None => Vec::new(),
    };
    if skipped > 0 {
        log::warn!("skipped {skipped} non-image entries while indexing");
    }
    Ok(DatasetIndex { content_files, style_collections, skipped })
}
