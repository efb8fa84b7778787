//! Slice feature extraction for the Fréchet distance.
//!
//! The extractor is a fixed-seed, randomly initialized 2D convnet (four
//! stride-2 conv+ReLU blocks, global average pool, 64 features), frozen
//! forever: deterministic, dependency-free features that exercise the full
//! Fréchet machinery. Slices are min-max rescaled to [0, 1] per volume
//! before extraction.

use super::{EvalError, GaussianStats};
use crate::rng::Rng;
use crate::volume_io::Volume;

/// Seed of the frozen extractor weights. Changing it invalidates every
/// previously computed score.
pub const EXTRACTOR_SEED: u64 = 0x7E5A_11CE;

pub const FEATURE_DIM: usize = 64;

const CHANNELS: [usize; 5] = [1, 8, 16, 32, FEATURE_DIM];

/// Anatomical slicing axis. Axial slices are xy planes, coronal xz,
/// sagittal yz.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Axial,
    Coronal,
    Sagittal,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Axial, Axis::Coronal, Axis::Sagittal];

    pub fn name(&self) -> &'static str {
        match self {
            Axis::Axial => "axial",
            Axis::Coronal => "coronal",
            Axis::Sagittal => "sagittal",
        }
    }
}

struct ConvLayer {
    // (cout, cin, 3, 3) row-major.
    w: Vec<f32>,
    b: Vec<f32>,
    cin: usize,
    cout: usize,
}

/// A 2D image as (rows, cols, row-major data).
struct Plane {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl ConvLayer {
    /// 3x3, stride 2, pad 1 convolution + ReLU over multi-channel planes.
    fn forward(&self, x: &[Plane]) -> Vec<Plane> {
        debug_assert_eq!(x.len(), self.cin);
        let (rows, cols) = (x[0].rows, x[0].cols);
        let orows = (rows + 1) / 2;
        let ocols = (cols + 1) / 2;
        let mut out = Vec::with_capacity(self.cout);
        for co in 0..self.cout {
            let mut data = vec![0.0f32; orows * ocols];
            for (ci, plane) in x.iter().enumerate() {
                let wbase = (co * self.cin + ci) * 9;
                for oy in 0..orows {
                    for ox in 0..ocols {
                        let mut acc = 0.0f32;
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let sy = 2 * oy as isize + ky as isize - 1;
                                let sx = 2 * ox as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= rows as isize || sx >= cols as isize {
                                    continue;
                                }
                                acc += self.w[wbase + ky * 3 + kx]
                                    * plane.data[sy as usize * cols + sx as usize];
                            }
                        }
                        data[oy * ocols + ox] += acc;
                    }
                }
            }
            for v in &mut data {
                *v = (*v + self.b[co]).max(0.0);
            }
            out.push(Plane {
                rows: orows,
                cols: ocols,
                data,
            });
        }
        out
    }
}

/// The frozen random feature extractor.
pub struct SliceFeatureExtractor {
    layers: Vec<ConvLayer>,
}

impl Default for SliceFeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl SliceFeatureExtractor {
    pub fn new() -> Self {
        let mut rng = Rng::new(EXTRACTOR_SEED);
        let layers = (0..4)
            .map(|i| {
                let (cin, cout) = (CHANNELS[i], CHANNELS[i + 1]);
                let std = (2.0 / (cin * 9) as f64).sqrt();
                ConvLayer {
                    w: (0..cout * cin * 9)
                        .map(|_| (rng.normal() * std) as f32)
                        .collect(),
                    b: (0..cout).map(|_| (rng.normal() * 0.1) as f32).collect(),
                    cin,
                    cout,
                }
            })
            .collect();
        SliceFeatureExtractor { layers }
    }

    /// Map one [0, 1] slice to its feature vector.
    pub fn features(&self, rows: usize, cols: usize, data: &[f32]) -> Vec<f64> {
        debug_assert_eq!(data.len(), rows * cols);
        let mut planes = vec![Plane {
            rows,
            cols,
            data: data.to_vec(),
        }];
        for layer in &self.layers {
            planes = layer.forward(&planes);
        }
        planes
            .iter()
            .map(|p| p.data.iter().map(|&v| v as f64).sum::<f64>() / p.data.len() as f64)
            .collect()
    }
}

/// All 2D slices of a volume along `axis`, min-max rescaled to [0, 1] with
/// the volume's own range (flat volumes map to all-zero slices).
pub fn volume_slices(volume: &Volume, axis: Axis) -> Vec<(usize, usize, Vec<f32>)> {
    let dims = volume.dims();
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in volume.voxels() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let scale = if hi > lo { 1.0 / (hi - lo) } else { 0.0 };
    let rescale = |v: f32| (v - lo) * scale;

    let mut out = Vec::new();
    match axis {
        Axis::Axial => {
            for z in 0..dims.z {
                let mut data = Vec::with_capacity(dims.y * dims.x);
                for y in 0..dims.y {
                    for x in 0..dims.x {
                        data.push(rescale(volume.get(x, y, z)));
                    }
                }
                out.push((dims.y, dims.x, data));
            }
        }
        Axis::Coronal => {
            for y in 0..dims.y {
                let mut data = Vec::with_capacity(dims.z * dims.x);
                for z in 0..dims.z {
                    for x in 0..dims.x {
                        data.push(rescale(volume.get(x, y, z)));
                    }
                }
                out.push((dims.z, dims.x, data));
            }
        }
        Axis::Sagittal => {
            for x in 0..dims.x {
                let mut data = Vec::with_capacity(dims.z * dims.y);
                for z in 0..dims.z {
                    for y in 0..dims.y {
                        data.push(rescale(volume.get(x, y, z)));
                    }
                }
                out.push((dims.z, dims.y, data));
            }
        }
    }
    out
}

/// Gaussian statistics of the slice features of a volume set.
pub fn extract_slice_features(
    volumes: &[Volume],
    axis: Axis,
    extractor: &SliceFeatureExtractor,
) -> Result<(GaussianStats, usize), EvalError> {
    if volumes.is_empty() {
        return Err(EvalError::TooFewSamples { got: 0, need: 2 });
    }
    let slices: Vec<(usize, usize, Vec<f32>)> = volumes
        .iter()
        .flat_map(|v| volume_slices(v, axis))
        .collect();
    let features: Vec<Vec<f64>> = if crate::nn::serial_mode() {
        slices
            .iter()
            .map(|(r, c, d)| extractor.features(*r, *c, d))
            .collect()
    } else {
        use rayon::prelude::*;
        slices
            .par_iter()
            .map(|(r, c, d)| extractor.features(*r, *c, d))
            .collect()
    };
    let n = features.len();
    Ok((GaussianStats::from_samples(&features)?, n))
}
