//! Desk-scale volumetric networks: the image generator, the image
//! discriminator, and the temporal discriminator (the same architecture
//! with tripled input channels).
//!
//! The generator projects the latent code onto a coarse grid and refines it
//! with residual nearest-neighbor-upsampling blocks; discriminators mirror
//! that with average-pool downsampling blocks and a global-sum head.
//! Self-attention sits at one configurable level (by default the one whose
//! spatial extent is 8); discriminator weights optionally carry spectral
//! normalization.

mod discriminator;
mod generator;

pub use discriminator::{DiscTrace, DiscriminatorNet};
pub use generator::{GenTrace, GeneratorNet};

use thiserror::Error;

use crate::latent::LatentCode;
use crate::nn::{PaddedBatch, Scalar};
use crate::volume_io::{Dims, Volume};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid net config: {0}")]
    BadConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: String, got: String },
}

/// Architecture hyperparameters; output shapes and parameter counts are
/// pure functions of this struct.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub latent_size: usize,
    pub base_channels: usize,
    pub num_levels: usize,
    pub volume_dims: Dims,
    pub use_self_attention: bool,
    /// Generator block index (0-based) after which attention is applied;
    /// `None` picks the block whose output spatial extent is closest to 8.
    /// The discriminator mirrors the choice at the same spatial extent.
    pub attention_level: Option<usize>,
    /// Spectral normalization on discriminator weights.
    pub spectral_norm: bool,
}

impl NetConfig {
    /// Defaults for 32-cubed desk experiments.
    pub fn desk_default() -> Self {
        NetConfig {
            latent_size: 64,
            base_channels: 8,
            num_levels: 3,
            volume_dims: Dims::cubic(32),
            use_self_attention: true,
            attention_level: None,
            spectral_norm: true,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.latent_size == 0 || self.base_channels == 0 || self.num_levels == 0 {
            return Err(NetError::BadConfig(
                "latent_size, base_channels, num_levels must be >= 1".into(),
            ));
        }
        let div = 1usize << self.num_levels;
        let d = self.volume_dims;
        if d.x % div != 0 || d.y % div != 0 || d.z % div != 0 {
            return Err(NetError::BadConfig(format!(
                "volume dims {d} not divisible by 2^{}",
                self.num_levels
            )));
        }
        if d.x / div == 0 || d.y / div == 0 || d.z / div == 0 {
            return Err(NetError::BadConfig(format!(
                "volume dims {d} too small for {} levels",
                self.num_levels
            )));
        }
        for extent in [d.x, d.y, d.z] {
            let mut e = extent;
            while e >= 1 {
                if !crate::nn::SUPPORTED_EXTENTS.contains(&e) {
                    return Err(NetError::BadConfig(format!(
                        "extent {extent} (level size {e}) is outside the supported set \
                         {:?}",
                        crate::nn::SUPPORTED_EXTENTS
                    )));
                }
                if e == 1 || e % 2 != 0 {
                    break;
                }
                e /= 2;
            }
        }
        if let Some(l) = self.attention_level {
            if l >= self.num_levels {
                return Err(NetError::BadConfig(format!(
                    "attention level {l} out of range (num_levels {})",
                    self.num_levels
                )));
            }
        }
        Ok(())
    }

    /// Coarse grid the generator starts from.
    pub fn base_grid(&self) -> Dims {
        let div = 1usize << self.num_levels;
        Dims::new(
            self.volume_dims.x / div,
            self.volume_dims.y / div,
            self.volume_dims.z / div,
        )
    }

    /// Generator channels entering block i (block i maps gen_ch(i) ->
    /// gen_ch(i + 1)); gen_ch(0) is the projection width.
    pub fn gen_ch(&self, i: usize) -> usize {
        self.base_channels << (self.num_levels - i)
    }

    /// Discriminator channels leaving block i.
    pub fn disc_ch(&self, i: usize) -> usize {
        self.base_channels << (i + 1)
    }

    /// Generator block index after which attention runs.
    pub fn gen_attention_index(&self) -> Option<usize> {
        if !self.use_self_attention {
            return None;
        }
        if let Some(l) = self.attention_level {
            return Some(l);
        }
        let base = self.base_grid();
        let min_base = base.x.min(base.y).min(base.z);
        Some(closest_to_8(
            (0..self.num_levels).map(|i| min_base << (i + 1)),
        ))
    }

    /// Discriminator block index after which attention runs (same spatial
    /// extent as the generator's).
    pub fn disc_attention_index(&self) -> Option<usize> {
        if !self.use_self_attention {
            return None;
        }
        let gen_i = self.gen_attention_index()?;
        let base = self.base_grid();
        let min_base = base.x.min(base.y).min(base.z);
        let target = min_base << (gen_i + 1);
        let d = self.volume_dims;
        let min_dim = d.x.min(d.y).min(d.z);
        let mut best = 0usize;
        let mut best_diff = usize::MAX;
        for i in 0..self.num_levels {
            let extent = min_dim >> (i + 1);
            let diff = extent.abs_diff(target);
            if diff < best_diff {
                best_diff = diff;
                best = i;
            }
        }
        Some(best)
    }
}

fn closest_to_8(extents: impl Iterator<Item = usize>) -> usize {
    let mut best = 0usize;
    let mut best_diff = usize::MAX;
    for (i, e) in extents.enumerate() {
        let diff = e.abs_diff(8);
        if diff < best_diff {
            best_diff = diff;
            best = i;
        }
    }
    best
}

/// Elementwise sum of two equally shaped batches.
pub(crate) fn add_batches<T: Scalar>(a: &PaddedBatch<T>, b: &PaddedBatch<T>) -> PaddedBatch<T> {
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o + v;
    }
    out
}

/// Generate one volume from one latent code (inference convenience).
pub fn generate<T: Scalar>(
    g: &mut GeneratorNet<T>,
    z: &LatentCode<T>,
) -> Result<Volume, NetError> {
    if z.len() != g.cfg().latent_size {
        return Err(NetError::DimMismatch {
            expected: format!("latent size {}", g.cfg().latent_size),
            got: format!("{}", z.len()),
        });
    }
    let out = g.forward(&z.values, 1);
    let volumes = out.to_volumes().map_err(|e| NetError::BadConfig(e.to_string()))?;
    Ok(volumes.into_iter().next().expect("one volume"))
}

/// Score one volume with the image discriminator (inference convenience).
pub fn score_image<T: Scalar>(
    d: &mut DiscriminatorNet<T>,
    x: &Volume,
) -> Result<f64, NetError> {
    if d.in_channels() != 1 {
        return Err(NetError::DimMismatch {
            expected: "1-channel discriminator".into(),
            got: format!("{} channels", d.in_channels()),
        });
    }
    if x.dims() != d.cfg().volume_dims {
        return Err(NetError::DimMismatch {
            expected: format!("{}", d.cfg().volume_dims),
            got: format!("{}", x.dims()),
        });
    }
    let batch = PaddedBatch::<T>::from_volumes(&[x]);
    Ok(d.forward(&batch, false)[0])
}

/// Score an ordered triplet (channel order is the argument order).
pub fn score_triplet<T: Scalar>(
    d: &mut DiscriminatorNet<T>,
    x1: &Volume,
    x2: &Volume,
    x3: &Volume,
) -> Result<f64, NetError> {
    if d.in_channels() != 3 {
        return Err(NetError::DimMismatch {
            expected: "3-channel discriminator".into(),
            got: format!("{} channels", d.in_channels()),
        });
    }
    let dims = d.cfg().volume_dims;
    for v in [x1, x2, x3] {
        if v.dims() != dims {
            return Err(NetError::DimMismatch {
                expected: format!("{dims}"),
                got: format!("{}", v.dims()),
            });
        }
    }
    let batch = PaddedBatch::<T>::from_triplets(&[[x1, x2, x3]]);
    Ok(d.forward(&batch, false)[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_validates() {
        NetConfig::desk_default().validate().unwrap();
    }

    #[test]
    fn indivisible_dims_are_rejected() {
        let cfg = NetConfig {
            volume_dims: Dims::new(30, 32, 32),
            ..NetConfig::desk_default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_attention_sits_at_the_8_level() {
        let cfg = NetConfig::desk_default();
        // Generator: blocks end at 8, 16, 32 voxels; 8 is block 0.
        assert_eq!(cfg.gen_attention_index(), Some(0));
        // Discriminator: blocks end at 16, 8, 4; 8 is block 1.
        assert_eq!(cfg.disc_attention_index(), Some(1));
    }

    #[test]
    fn channel_schedule_mirrors() {
        let cfg = NetConfig::desk_default();
        // Generator: 64 -> 32 -> 16 -> 8; discriminator: -> 16 -> 32 -> 64.
        assert_eq!(cfg.gen_ch(0), 64);
        assert_eq!(cfg.gen_ch(3), 8);
        assert_eq!(cfg.disc_ch(0), 16);
        assert_eq!(cfg.disc_ch(2), 64);
        assert_eq!(cfg.base_grid(), Dims::cubic(4));
    }
}
