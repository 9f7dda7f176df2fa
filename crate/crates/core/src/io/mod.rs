//! Persistence: NIfTI images, datasets on disk, run configuration and CSV
//! reports.

pub mod config;
pub mod nifti;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::TrainSample;

/// Writes through a temporary file in the destination directory and renames
/// it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Serializes rows to CSV in memory, then writes atomically.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    atomic_write(path, &bytes)
}

/// One registration evaluated against its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub pair_id: String,
    pub time_s: f64,
    /// Absent when no ground-truth field is known.
    pub epe_mm: Option<f64>,
    pub mse: f64,
    pub nlcc: f64,
    pub mi: f64,
}

pub const METRIC_HEADER: [&str; 6] = ["pair_id", "time_s", "epe_mm", "mse", "nlcc", "mi"];
pub const LOSS_HEADER: [&str; 6] = ["step", "L_F", "L_sim0", "L_sim1", "L_seg", "total"];

/// Writes the loss history with its fixed header; absent terms are written
/// as 0.
pub fn write_loss_history(path: &Path, history: &[crate::pipeline::LossRecord]) -> Result<()> {
    atomic_write(path, &loss_history_csv(history)?)
}

/// Loss history CSV bytes with the fixed header.
pub fn loss_history_csv(history: &[crate::pipeline::LossRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LOSS_HEADER)?;
    for r in history {
        w.write_record([
            r.step.to_string(),
            r.field.to_string(),
            r.sim0.to_string(),
            r.sim1.to_string(),
            r.seg.to_string(),
            r.total.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Paths for sample `index` of a dataset directory.
pub fn sample_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("sample_{index:03}_image.nii")), dir.join(format!("sample_{index:03}_labels.nii")))
}

pub fn write_dataset(dir: &Path, samples: &[TrainSample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let (img, lab) = sample_paths(dir, i);
        nifti::write_volume(&s.moving, &img)?;
        if let Some(l) = &s.moving_labels {
            nifti::write_labels(l, &lab)?;
        }
    }
    Ok(())
}

/// Loads every `*_image.nii` in `dir` (sorted by name) with its matching
/// `*_labels.nii` when present.
pub fn read_dataset(dir: &Path, num_classes: Option<usize>) -> Result<Vec<(String, TrainSample)>> {
    if !dir.is_dir() {
        return Err(Error::MissingInput(dir.to_path_buf()));
    }
    let mut images: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_image.nii")))
        .collect();
    images.sort();
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let name = img.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let stem = name.trim_end_matches("_image.nii").to_string();
        let labels_path = img.with_file_name(format!("{stem}_labels.nii"));
        let moving = nifti::read_volume(&img)?;
        let moving_labels = if labels_path.exists() { Some(nifti::read_labels(&labels_path, num_classes)?) } else { None };
        out.push((stem, TrainSample::new(moving, moving_labels)?));
    }
    Ok(out)
}
