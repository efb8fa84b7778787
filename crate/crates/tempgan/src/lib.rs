//! Volumetric GAN with an explicitly trained temporal direction in its
//! latent space.
//!
//! The model pairs an image generator and discriminator with a temporal
//! discriminator that scores ordered volume triplets; one latent vector plus
//! a learned unit direction generates whole ordered sequences by shifting
//! the code along the direction. Training only requires the natural
//! ordering of real sequences.
//!
//! Crate layout mirrors the pipeline: [`volume_io`] (data model and file
//! formats), [`synth`] (ground-truth synthetic datasets), [`latent`] /
//! [`networks`] / [`losses`] / [`sampler`] / [`training`] (the model and
//! its optimization), [`evaluation`] (slice-wise Fréchet distance and
//! direction-effect metrics), [`segmentation`] (unsupervised change masks),
//! and [`cli`] (the `tempgan` binary).

pub mod cli;
pub mod evaluation;
pub mod latent;
pub mod networks;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod segmentation;
pub mod sampler;
pub mod synth;
pub mod training;
pub mod volume_io;

pub use volume_io::{Dims, Volume};
