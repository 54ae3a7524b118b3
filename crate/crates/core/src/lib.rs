//! Reconstruct depth (and RGBD) stimuli from voxel activity vectors.
//!
//! An encoder maps stimuli to voxel responses and is fit on paired data. A
//! decoder is then trained on paired responses plus a cycle loss through the
//! frozen encoder on unpaired stimuli. Reconstructions are scored by n-way
//! rank identification under a perceptual metric. [`synth`] provides a
//! simulated brain with planted depth-only and color-only voxels, so every
//! stage can be checked against known ground truth.
//!
//! The numeric engine in [`nn`] is a small deterministic f64 CPU
//! implementation with hand-written backward passes.

pub mod analysis;
pub mod config;
pub mod dataset;
pub mod depth;
pub mod encdec;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod nn;
pub mod perceptual;
pub mod pipeline;
pub mod synth;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use types::{ChannelMode, FmriVector, PairedExample, Region, RegionSet, RgbdSample, UnpairedExample, VoxelMask};
