//! Volume data model, CT-style preprocessing, and on-disk formats.
//!
//! A [`Volume`] is a dense 3D scalar grid with normalized intensities in
//! [-1, 1], stored x-fastest (then y, then z). Raw scanner-unit grids are
//! [`RawVolume`]s; the `clip_intensity` → `minmax_normalize` pipeline turns
//! them into `Volume`s. Binary serialization lives in [`tvol`], sequence
//! manifests and the patient-wise split in [`manifest`].

mod manifest;
mod tvol;

pub use manifest::{read_manifest, scan_manifests, write_manifest, DatasetSplit, SequenceManifest};
pub use tvol::{read_volume, write_volume, TVOL_MAGIC, TVOL_VERSION};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid intensity range: lo ({lo}) must be below hi ({hi})")]
    InvalidRange { lo: f32, hi: f32 },
    #[error("voxel {index} value {value} outside [{lo}, {hi}]")]
    ValueOutOfRange {
        index: usize,
        value: f32,
        lo: f32,
        hi: f32,
    },
    #[error("invalid dims {0}x{1}x{2}: every dim must be >= 1")]
    InvalidDims(usize, usize, usize),
    #[error("voxel count {got} does not match dims {dims} ({expected})")]
    VoxelCountMismatch {
        dims: Dims,
        expected: usize,
        got: usize,
    },
    #[error("{path}: format error at offset {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },
    #[error("{path}: manifest error on line {line}: {message}")]
    Manifest {
        path: String,
        line: usize,
        message: String,
    },
    #[error("sequence {patient}: volumes disagree on dims ({a} vs {b})")]
    MixedDims { patient: String, a: Dims, b: Dims },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> VolumeError {
    VolumeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Grid extent in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Dims {
    pub fn new(x: usize, y: usize, z: usize) -> Self {
        Dims { x, y, z }
    }

    pub fn cubic(n: usize) -> Self {
        Dims { x: n, y: n, z: n }
    }

    pub fn count(&self) -> usize {
        self.x * self.y * self.z
    }

    /// Linear index of voxel (x, y, z); x varies fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.y + y) * self.x + x
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.x, self.y, self.z)
    }
}

/// A raw scalar grid in scanner units (HU for CT), prior to normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVolume {
    pub dims: Dims,
    pub values: Vec<f32>,
}

impl RawVolume {
    pub fn new(dims: Dims, values: Vec<f32>) -> Result<Self, VolumeError> {
        check_dims(dims)?;
        if values.len() != dims.count() {
            return Err(VolumeError::VoxelCountMismatch {
                dims,
                expected: dims.count(),
                got: values.len(),
            });
        }
        Ok(RawVolume { dims, values })
    }
}

/// A normalized volume: every voxel lies in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    voxels: Vec<f32>,
}

impl Volume {
    /// Build a volume, validating dims, voxel count, and the [-1, 1] range.
    pub fn new(dims: Dims, voxels: Vec<f32>) -> Result<Self, VolumeError> {
        check_dims(dims)?;
        if voxels.len() != dims.count() {
            return Err(VolumeError::VoxelCountMismatch {
                dims,
                expected: dims.count(),
                got: voxels.len(),
            });
        }
        for (index, &value) in voxels.iter().enumerate() {
            if !(-1.0..=1.0).contains(&value) {
                return Err(VolumeError::ValueOutOfRange {
                    index,
                    value,
                    lo: -1.0,
                    hi: 1.0,
                });
            }
        }
        Ok(Volume { dims, voxels })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.dims.index(x, y, z)]
    }

    /// Constant-valued volume; `value` must lie in [-1, 1].
    pub fn constant(dims: Dims, value: f32) -> Result<Self, VolumeError> {
        Volume::new(dims, vec![value; dims.count()])
    }
}

fn check_dims(dims: Dims) -> Result<(), VolumeError> {
    if dims.x == 0 || dims.y == 0 || dims.z == 0 {
        return Err(VolumeError::InvalidDims(dims.x, dims.y, dims.z));
    }
    Ok(())
}

/// Clamp every value of a raw grid to [lo, hi].
pub fn clip_intensity(raw: &RawVolume, lo: f32, hi: f32) -> Result<RawVolume, VolumeError> {
    if lo >= hi {
        return Err(VolumeError::InvalidRange { lo, hi });
    }
    let values = raw.values.iter().map(|v| v.clamp(lo, hi)).collect();
    Ok(RawVolume {
        dims: raw.dims,
        values,
    })
}

/// Min-max scale a clipped grid from [lo, hi] onto [-1, 1].
///
/// Values outside [lo, hi] are a hard error: clipping is an explicit,
/// separate step, and silently clamping here would hide a skipped one.
pub fn minmax_normalize(clipped: &RawVolume, lo: f32, hi: f32) -> Result<Volume, VolumeError> {
    if lo >= hi {
        return Err(VolumeError::InvalidRange { lo, hi });
    }
    let span = hi - lo;
    let mut voxels = Vec::with_capacity(clipped.values.len());
    for (index, &value) in clipped.values.iter().enumerate() {
        if !(lo..=hi).contains(&value) {
            return Err(VolumeError::ValueOutOfRange {
                index,
                value,
                lo,
                hi,
            });
        }
        voxels.push(2.0 * (value - lo) / span - 1.0);
    }
    // Rounding can leave results a hair outside [-1, 1]; pin the contract.
    for v in &mut voxels {
        *v = v.clamp(-1.0, 1.0);
    }
    Volume::new(clipped.dims, voxels)
}

/// Trilinear resample onto `target` dims (align-corners convention: the
/// first and last grid points of each axis map onto each other). Output is
/// clamped to [-1, 1].
pub fn resize_volume(volume: &Volume, target: Dims) -> Result<Volume, VolumeError> {
    check_dims(target)?;
    let src = volume.dims();
    if src == target {
        return Ok(volume.clone());
    }

    // Source coordinate of output index i along an axis.
    let axis_coord = |i: usize, dst: usize, srcn: usize| -> f64 {
        if dst == 1 {
            (srcn - 1) as f64 / 2.0
        } else {
            i as f64 * (srcn - 1) as f64 / (dst - 1) as f64
        }
    };

    let mut voxels = Vec::with_capacity(target.count());
    for z in 0..target.z {
        let fz = axis_coord(z, target.z, src.z);
        let z0 = (fz.floor() as usize).min(src.z - 1);
        let z1 = (z0 + 1).min(src.z - 1);
        let tz = fz - z0 as f64;
        for y in 0..target.y {
            let fy = axis_coord(y, target.y, src.y);
            let y0 = (fy.floor() as usize).min(src.y - 1);
            let y1 = (y0 + 1).min(src.y - 1);
            let ty = fy - y0 as f64;
            for x in 0..target.x {
                let fx = axis_coord(x, target.x, src.x);
                let x0 = (fx.floor() as usize).min(src.x - 1);
                let x1 = (x0 + 1).min(src.x - 1);
                let tx = fx - x0 as f64;

                let c = |xx: usize, yy: usize, zz: usize| volume.get(xx, yy, zz) as f64;
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;

                let v00 = lerp(c(x0, y0, z0), c(x1, y0, z0), tx);
                let v10 = lerp(c(x0, y1, z0), c(x1, y1, z0), tx);
                let v01 = lerp(c(x0, y0, z1), c(x1, y0, z1), tx);
                let v11 = lerp(c(x0, y1, z1), c(x1, y1, z1), tx);
                let v0 = lerp(v00, v10, ty);
                let v1 = lerp(v01, v11, ty);
                let v = lerp(v0, v1, tz);
                voxels.push((v as f32).clamp(-1.0, 1.0));
            }
        }
    }
    Volume::new(target, voxels)
}
