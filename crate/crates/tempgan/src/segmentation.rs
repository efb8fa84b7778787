//! Unsupervised change segmentation: absolute difference image, fixed 0.2
//! threshold, then two erosions and two dilations with the 6-connected
//! structuring element to remove noise.

use thiserror::Error;

use crate::volume_io::{Dims, Volume, VolumeError};

pub const CHANGE_THRESHOLD: f32 = 0.2;

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("volume dims differ: {a} vs {b}")]
    DimsMismatch { a: Dims, b: Dims },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// A per-voxel binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub dims: Dims,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(dims: Dims) -> Self {
        BinaryMask {
            dims,
            bits: vec![false; dims.count()],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.dims.index(x, y, z)]
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims == other.dims
            && self
                .bits
                .iter()
                .zip(&other.bits)
                .all(|(a, b)| !*a | *b)
    }

    /// Encode as a 0/1-valued volume (for `.tvol` export).
    pub fn to_volume(&self) -> Volume {
        Volume::new(
            self.dims,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("0/1 values are in range")
    }

    /// Interpret a volume as a mask: voxels > 0.5 are set.
    pub fn from_volume(v: &Volume) -> Self {
        BinaryMask {
            dims: v.dims(),
            bits: v.voxels().iter().map(|&x| x > 0.5).collect(),
        }
    }
}

/// Dice overlap 2|A∩B| / (|A|+|B|); 1.0 when both masks are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let inter = a
        .bits
        .iter()
        .zip(&b.bits)
        .filter(|(x, y)| **x && **y)
        .count();
    let total = a.count() + b.count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Mask of voxels whose absolute difference exceeds `threshold` (strict).
pub fn difference_mask(
    x_now: &Volume,
    x_future: &Volume,
    threshold: f32,
) -> Result<BinaryMask, SegmentationError> {
    if x_now.dims() != x_future.dims() {
        return Err(SegmentationError::DimsMismatch {
            a: x_now.dims(),
            b: x_future.dims(),
        });
    }
    Ok(BinaryMask {
        dims: x_now.dims(),
        bits: x_now
            .voxels()
            .iter()
            .zip(x_future.voxels())
            .map(|(a, b)| (a - b).abs() > threshold)
            .collect(),
    })
}

const NEIGHBORS: [(isize, isize, isize); 6] = [
    (1, 0, 0),
    (-1, 0, 0),
    (0, 1, 0),
    (0, -1, 0),
    (0, 0, 1),
    (0, 0, -1),
];

/// Binary erosion with the 6-connected element: a voxel survives only if
/// it and all face neighbors are set; out-of-bounds neighbors count as 0,
/// so boundary voxels always erode.
pub fn erode(mask: &BinaryMask) -> BinaryMask {
    morph(mask, true)
}

/// Binary dilation with the 6-connected element; no wraparound.
pub fn dilate(mask: &BinaryMask) -> BinaryMask {
    morph(mask, false)
}

fn morph(mask: &BinaryMask, erosion: bool) -> BinaryMask {
    let dims = mask.dims;
    let mut out = BinaryMask::empty(dims);
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                let center = mask.get(x, y, z);
                let mut value = center;
                for (dx, dy, dz) in NEIGHBORS {
                    let nx = x as isize + dx;
                    let ny = y as isize + dy;
                    let nz = z as isize + dz;
                    let neighbor = if nx < 0
                        || ny < 0
                        || nz < 0
                        || nx >= dims.x as isize
                        || ny >= dims.y as isize
                        || nz >= dims.z as isize
                    {
                        false
                    } else {
                        mask.get(nx as usize, ny as usize, nz as usize)
                    };
                    if erosion {
                        value &= neighbor;
                    } else {
                        value |= neighbor;
                    }
                }
                out.bits[dims.index(x, y, z)] = value;
            }
        }
    }
    out
}

/// The full change-segmentation pipeline:
/// dilate(dilate(erode(erode(|x_now - x_future| > 0.2)))).
pub fn segment_change(
    x_now: &Volume,
    x_future: &Volume,
) -> Result<BinaryMask, SegmentationError> {
    let mask = difference_mask(x_now, x_future, CHANGE_THRESHOLD)?;
    Ok(dilate(&dilate(&erode(&erode(&mask)))))
}
