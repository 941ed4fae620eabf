//! Dataset and file I/O: images, masks, point clouds, point labels, the
//! on-disk dataset layout, and the binary feature interchange format.
//!
//! A dataset root is organized as
//! `<root>/<category>/{RGB,Infrared,Pointcloud}/...`, where each modality
//! directory holds `train/` with normal samples, `test/<defect>/` with test
//! samples grouped by defect type (`good` for normal ones), and `GT/<defect>/`
//! with the annotations for defects visible in that modality — mask images
//! for RGB/infrared, point-index text files for clouds. Samples are matched
//! across modalities by file stem.

pub mod feature_file;
pub mod image;
pub mod pointcloud;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::core::{ModalityId, SampleRef, Split, GOOD_DEFECT};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error: {0}")]
    Image(String),
    #[error("point cloud error: {0}")]
    Cloud(String),
    #[error("mask {path} is {mask:?} but its image is {image:?}")]
    MaskSizeMismatch {
        path: String,
        mask: (u32, u32),
        image: (u32, u32),
    },
    #[error("feature file error: {0}")]
    Feature(String),
    #[error("dataset layout error: {0}")]
    Layout(String),
}

impl IngestError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IngestError::Io { path: path.display().to_string(), source }
    }
}

/// Where annotations live and how they are named, relative to a modality
/// directory. The default matches `GT/<defect>/<id>.png` for images and
/// `GT/<defect>/<id>.txt` for point clouds.
#[derive(Debug, Clone)]
pub struct LayoutConfig {
    /// Annotation directory name next to `train`/`test`.
    pub gt_dir: String,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self { gt_dir: "GT".into() }
    }
}

/// Everything found under a dataset root, in deterministic order.
#[derive(Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub categories: Vec<CategoryIndex>,
}

#[derive(Debug)]
pub struct CategoryIndex {
    pub name: String,
    /// Normal training samples, ordered by id.
    pub train: Vec<SampleRef>,
    /// Test samples, ordered by (defect, id).
    pub test: Vec<SampleRef>,
}

impl DatasetIndex {
    pub fn category(&self, name: &str) -> Option<&CategoryIndex> {
        self.categories.iter().find(|c| c.name == name)
    }
}

/// Scans a dataset root with the default layout. The result is independent
/// of filesystem enumeration order: directories and ids are sorted
/// lexicographically.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex, IngestError> {
    scan_dataset_with(root, &LayoutConfig::default())
}

pub fn scan_dataset_with(root: &Path, layout: &LayoutConfig) -> Result<DatasetIndex, IngestError> {
    let mut categories = Vec::new();
    for name in sorted_dirs(root)? {
        categories.push(scan_category(root, &name, layout)?);
    }
    if categories.is_empty() {
        return Err(IngestError::Layout(format!(
            "no category directories under {}",
            root.display()
        )));
    }
    Ok(DatasetIndex { root: root.to_path_buf(), categories })
}

fn scan_category(
    root: &Path,
    name: &str,
    layout: &LayoutConfig,
) -> Result<CategoryIndex, IngestError> {
    let cat_dir = root.join(name);
    for m in ModalityId::ALL {
        let dir = cat_dir.join(m.dir_name());
        if !dir.is_dir() {
            return Err(IngestError::Layout(format!(
                "category {name}: missing modality directory {}",
                dir.display()
            )));
        }
    }

    // Train: merge `<Modality>/train/<id>.<ext>` across modalities by stem.
    let mut train: BTreeMap<String, SampleRef> = BTreeMap::new();
    for m in ModalityId::ALL {
        let dir = cat_dir.join(m.dir_name()).join(Split::Train.dir_name());
        for (id, path) in data_files(&dir, m)? {
            let sample = train.entry(id.clone()).or_insert_with(|| SampleRef {
                category: name.to_string(),
                split: Split::Train,
                defect: GOOD_DEFECT.to_string(),
                id,
                paths: Vec::new(),
                annotations: Vec::new(),
            });
            sample.paths.push((m, path));
        }
    }
    if train.is_empty() {
        return Err(IngestError::Layout(format!(
            "category {name}: no training samples"
        )));
    }

    // Test: merge `<Modality>/test/<defect>/<id>.<ext>` by (defect, id).
    let mut test: BTreeMap<(String, String), SampleRef> = BTreeMap::new();
    let mut defects: BTreeSet<String> = BTreeSet::new();
    for m in ModalityId::ALL {
        let split_dir = cat_dir.join(m.dir_name()).join(Split::Test.dir_name());
        if !split_dir.is_dir() {
            continue;
        }
        for defect in sorted_dirs(&split_dir)? {
            defects.insert(defect.clone());
            for (id, path) in data_files(&split_dir.join(&defect), m)? {
                let key = (defect.clone(), id.clone());
                let sample = test.entry(key).or_insert_with(|| SampleRef {
                    category: name.to_string(),
                    split: Split::Test,
                    defect: defect.clone(),
                    id,
                    paths: Vec::new(),
                    annotations: Vec::new(),
                });
                sample.paths.push((m, path));
            }
        }
    }

    // Annotations: `<Modality>/GT/<defect>/<id>.<ext>`, attached to the
    // matching test sample. Files without one are reported and skipped.
    for m in ModalityId::ALL {
        let gt_dir = cat_dir.join(m.dir_name()).join(&layout.gt_dir);
        if !gt_dir.is_dir() {
            continue;
        }
        for defect in sorted_dirs(&gt_dir)? {
            for (id, path) in annotation_files(&gt_dir.join(&defect), m)? {
                match test.get_mut(&(defect.clone(), id.clone())) {
                    Some(sample) => sample.annotations.push((m, path)),
                    None => log::warn!(
                        "annotation {} has no matching test sample {defect}/{id}",
                        path.display()
                    ),
                }
            }
        }
    }

    let test: Vec<SampleRef> = test.into_values().collect();
    for sample in &test {
        if !sample.is_normal() && sample.annotations.is_empty() {
            return Err(IngestError::Layout(format!(
                "category {name}: test sample {}/{} is labeled defective but has no annotation in any modality",
                sample.defect, sample.id
            )));
        }
    }

    Ok(CategoryIndex {
        name: name.to_string(),
        train: train.into_values().collect(),
        test,
    })
}

fn sorted_dirs(dir: &Path) -> Result<Vec<String>, IngestError> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| IngestError::io(dir, e))? {
        let entry = entry.map_err(|e| IngestError::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            if let Some(n) = path.file_name().and_then(|n| n.to_str()) {
                if !n.starts_with('.') {
                    names.push(n.to_string());
                }
            }
        }
    }
    names.sort();
    Ok(names)
}

fn is_image_ext(ext: &str) -> bool {
    matches!(ext, "png" | "ppm" | "pgm" | "pnm")
}

fn is_cloud_ext(ext: &str) -> bool {
    matches!(ext, "xyz" | "ply" | "txt")
}

/// Data files in one directory as sorted `(stem, path)` pairs, restricted
/// to the extensions meaningful for the modality. Two files with the same
/// stem (e.g. `0.png` and `0.ppm`) are rejected as a duplicate id.
fn data_files(dir: &Path, modality: ModalityId) -> Result<Vec<(String, PathBuf)>, IngestError> {
    files_by_stem(dir, |ext| match modality {
        ModalityId::Rgb | ModalityId::Infrared => is_image_ext(ext),
        ModalityId::Pointcloud => is_cloud_ext(ext),
    })
}

fn annotation_files(
    dir: &Path,
    modality: ModalityId,
) -> Result<Vec<(String, PathBuf)>, IngestError> {
    files_by_stem(dir, |ext| match modality {
        ModalityId::Rgb | ModalityId::Infrared => is_image_ext(ext),
        ModalityId::Pointcloud => ext == "txt",
    })
}

fn files_by_stem(
    dir: &Path,
    keep_ext: impl Fn(&str) -> bool,
) -> Result<Vec<(String, PathBuf)>, IngestError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| IngestError::io(dir, e))? {
        let entry = entry.map_err(|e| IngestError::io(dir, e))?;
        paths.push(entry.path());
    }
    paths.sort();
    for path in paths {
        if !path.is_file() {
            continue;
        }
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_lowercase();
        if !keep_ext(&ext) {
            continue;
        }
        let stem = match path.file_stem().and_then(|s| s.to_str()) {
            Some(s) if !s.is_empty() && !s.starts_with('.') => s.to_string(),
            _ => continue,
        };
        if let Some(previous) = out.get(&stem) {
            return Err(IngestError::Layout(format!(
                "duplicate sample id {stem:?}: {} and {}",
                previous.display(),
                path.display()
            )));
        }
        out.insert(stem, path);
    }
    Ok(out.into_iter().collect())
}
