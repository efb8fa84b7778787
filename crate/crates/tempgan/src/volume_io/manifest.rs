//! Sequence manifests and the patient-wise dataset split.
//!
//! A manifest is a UTF-8 text file, one `<temporal_index>\t<relative_path>`
//! line per volume, sorted ascending by temporal index. Lines starting with
//! `#` are comments. Paths are relative to the manifest's directory; the
//! patient id is the manifest's file stem.

use std::path::{Path, PathBuf};

use super::{io_err, read_volume, Volume, VolumeError};
use crate::rng::Rng;

/// One patient's ordered volume sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceManifest {
    pub patient_id: String,
    /// Absolute (resolved) volume paths, in temporal order.
    pub volume_paths: Vec<PathBuf>,
    /// Strictly increasing temporal indices, same length as `volume_paths`.
    pub temporal_index: Vec<u32>,
}

impl SequenceManifest {
    pub fn len(&self) -> usize {
        self.volume_paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volume_paths.is_empty()
    }

    /// Load every volume of the sequence, checking that dims agree.
    pub fn load_volumes(&self) -> Result<Vec<Volume>, VolumeError> {
        let mut volumes = Vec::with_capacity(self.len());
        for path in &self.volume_paths {
            let v = read_volume(path)?;
            if let Some(first) = volumes.first() {
                let first: &Volume = first;
                if first.dims() != v.dims() {
                    return Err(VolumeError::MixedDims {
                        patient: self.patient_id.clone(),
                        a: first.dims(),
                        b: v.dims(),
                    });
                }
            }
            volumes.push(v);
        }
        Ok(volumes)
    }
}

fn manifest_err(path: &Path, line: usize, message: impl Into<String>) -> VolumeError {
    VolumeError::Manifest {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Parse a manifest file. Validates the strictly-increasing temporal index.
pub fn read_manifest(path: &Path) -> Result<SequenceManifest, VolumeError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let patient_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    let mut temporal_index = Vec::new();
    let mut volume_paths = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_num = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (idx, rel) = trimmed
            .split_once('\t')
            .ok_or_else(|| manifest_err(path, line_num, "expected <index><TAB><path>"))?;
        let idx: u32 = idx
            .parse()
            .map_err(|_| manifest_err(path, line_num, format!("bad temporal index {idx:?}")))?;
        if let Some(&last) = temporal_index.last() {
            if idx <= last {
                return Err(manifest_err(
                    path,
                    line_num,
                    format!("temporal index {idx} not strictly increasing (previous {last})"),
                ));
            }
        }
        temporal_index.push(idx);
        volume_paths.push(dir.join(rel));
    }

    Ok(SequenceManifest {
        patient_id,
        volume_paths,
        temporal_index,
    })
}

/// Write a manifest; `entries` pairs temporal indices with paths relative to
/// the manifest location. Indices must be strictly increasing.
pub fn write_manifest(path: &Path, entries: &[(u32, String)]) -> Result<(), VolumeError> {
    for w in entries.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(manifest_err(
                path,
                0,
                format!("temporal indices not strictly increasing: {} then {}", w[0].0, w[1].0),
            ));
        }
    }
    let mut text = String::from("# temporal_index<TAB>relative_path\n");
    for (idx, rel) in entries {
        text.push_str(&format!("{idx}\t{rel}\n"));
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Patient-disjoint train/test partition.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train_manifests: Vec<SequenceManifest>,
    pub test_manifests: Vec<SequenceManifest>,
}

impl DatasetSplit {
    /// Split by patient: sort by id, seeded shuffle, hold out
    /// `ceil(test_fraction * n)` patients for test.
    pub fn by_patient(
        mut manifests: Vec<SequenceManifest>,
        test_fraction: f64,
        seed: u64,
    ) -> DatasetSplit {
        manifests.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        let mut order: Vec<usize> = (0..manifests.len()).collect();
        Rng::new(seed).shuffle(&mut order);
        let n_test = ((manifests.len() as f64) * test_fraction).ceil() as usize;
        let test_set: std::collections::HashSet<usize> =
            order.into_iter().take(n_test).collect();
        let mut train_manifests = Vec::new();
        let mut test_manifests = Vec::new();
        for (i, m) in manifests.into_iter().enumerate() {
            if test_set.contains(&i) {
                test_manifests.push(m);
            } else {
                train_manifests.push(m);
            }
        }
        DatasetSplit {
            train_manifests,
            test_manifests,
        }
    }
}

/// Scan a dataset directory for `*.manifest` files, sorted by name.
pub fn scan_manifests(dir: &Path) -> Result<Vec<SequenceManifest>, VolumeError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "manifest").unwrap_or(false))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_manifest(p)).collect()
}
