//! Labeled image folders: scanning, manifests, splits, loading and the
//! synthetic blob datasets.

mod loader;
mod split;
mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use loader::{augment, hflip, load_batch, load_gray, preprocess, AugmentConfig, Dataset, GrayImage, Normalization};
pub use split::{split_dataset, Split, SplitAssignment, SplitFractions};
pub use synthetic::{generate_synthetic, quadrant_center, render_sample, Preset, SyntheticOutput, SyntheticSpec, TABLE3_CLASSES};

use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the dataset root, `/`-separated.
    pub path: String,
    pub label: usize,
}

/// A file that was found but could not be read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    pub skipped: Vec<SkippedFile>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for e in &self.entries {
            counts[e.label] += 1;
        }
        counts
    }

    pub fn full_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.entries[index].path)
    }

    /// Writes `path,label_index,class_name` rows with a header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Csv { path: path.to_path_buf(), message: e.to_string() };
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(csv_err)?;
        w.write_record(["path", "label_index", "class_name"]).map_err(csv_err)?;
        for e in &self.entries {
            let label = e.label.to_string();
            w.write_record([e.path.as_str(), label.as_str(), self.class_names[e.label].as_str()]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest CSV; entry paths are resolved against `root`.
    pub fn read_csv(path: &Path, root: &Path) -> Result<Self> {
        let csv_err = |m: String| Error::Csv { path: path.to_path_buf(), message: m };
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(e.to_string()))?;
        let headers = r.headers().map_err(|e| csv_err(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label_index", "class_name"] {
            return Err(csv_err(format!("unexpected header {headers:?}")));
        }
        let mut class_names: Vec<Option<String>> = Vec::new();
        let mut entries = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(e.to_string()))?;
            let label: usize = rec[1].parse().map_err(|_| csv_err(format!("bad label index {:?}", &rec[1])))?;
            if class_names.len() <= label {
                class_names.resize(label + 1, None);
            }
            match &class_names[label] {
                Some(n) if n != &rec[2] => {
                    return Err(csv_err(format!("label {label} named both {n:?} and {:?}", &rec[2])));
                }
                _ => class_names[label] = Some(rec[2].to_string()),
            }
            entries.push(ManifestEntry { path: rec[0].to_string(), label });
        }
        let class_names = class_names
            .into_iter()
            .enumerate()
            .map(|(i, n)| n.ok_or_else(|| csv_err(format!("no samples for label {i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { root: root.to_path_buf(), class_names, entries, skipped: Vec::new() })
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        out.push(entry.map_err(|e| Error::io(path, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Builds a manifest from `<root>/<class>/<image>` with classes sorted by
/// name and files by path. Unreadable images are skipped and reported in
/// [`DatasetManifest::skipped`].
pub fn scan_image_folder(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::config(format!("dataset root {} is not a directory", root.display())));
    }
    let class_dirs: Vec<PathBuf> = sorted_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::config(format!("dataset root {} has no class directories", root.display())));
    }
    let mut class_names = Vec::new();
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().and_then(|n| n.to_str()).ok_or_else(|| {
            Error::config(format!("class directory name {} is not valid UTF-8", dir.display()))
        })?;
        let before = entries.len();
        for file in sorted_dir(dir)?.into_iter().filter(|p| p.is_file() && is_image(p)) {
            let readable = image::ImageReader::open(&file)
                .and_then(|r| r.with_guessed_format())
                .map_err(|e| e.to_string())
                .and_then(|r| r.into_dimensions().map_err(|e| e.to_string()));
            match readable {
                Ok(_) => {
                    let rel = file.strip_prefix(root).expect("listed under root");
                    let rel = rel.iter().map(|c| c.to_string_lossy()).collect::<Vec<_>>().join("/");
                    entries.push(ManifestEntry { path: rel, label });
                }
                Err(reason) => {
                    log::warn!("skipping unreadable image {}: {reason}", file.display());
                    skipped.push(SkippedFile { path: file, reason });
                }
            }
        }
        if entries.len() == before {
            return Err(Error::config(format!("class directory {name:?} contains no readable images")));
        }
        class_names.push(name.to_string());
    }
    Ok(DatasetManifest { root: root.to_path_buf(), class_names, entries, skipped })
}

#[cfg(test)]
mod tests;
