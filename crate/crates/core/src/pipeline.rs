//! Glue between image space and the standardized latent space the
//! diffusion models work in.

use meddiff_tensor::Tensor;

use crate::diffusion::{DiffusionError, LatentStats};
use crate::pvae::{PvaeError, PvaeModel};
use crate::synth::SynthError;
use crate::volume::{PatchLayout, Volume, VolumeError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error(transparent)]
    Pvae(#[from] PvaeError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Frozen autoencoder plus latent standardization.
#[derive(Clone, Copy)]
pub struct LatentCodec<'a> {
    pub pvae: &'a PvaeModel,
    pub stats: &'a LatentStats,
}

impl<'a> LatentCodec<'a> {
    pub fn new(pvae: &'a PvaeModel, stats: &'a LatentStats) -> LatentCodec<'a> {
        LatentCodec { pvae, stats }
    }

    /// Patch-wise encode and quantize, stitch, standardize: `(1, C, X, Y, Z)`.
    pub fn encode(&self, vol: &Volume) -> Result<(Tensor, PatchLayout)> {
        let lv = self.pvae.encode_volume_patchwise(vol)?;
        if lv.features.shape()[1] != self.stats.mean.len() {
            return Err(PipelineError::Geometry(format!(
                "latent has {} channels, statistics cover {}",
                lv.features.shape()[1],
                self.stats.mean.len()
            )));
        }
        Ok((self.stats.standardize(&lv.features), lv.layout))
    }

    /// Latent shape and layout for volumes of `extent`.
    pub fn latent_shape(&self, extent: [usize; 3]) -> Result<(Vec<usize>, PatchLayout)> {
        let layout = PatchLayout::new(extent, self.pvae.config.patch)?;
        let lp = self.pvae.config.latent_patch();
        let mut shape = vec![1, self.pvae.config.latent_channels];
        shape.extend((0..3).map(|a| layout.grid[a] * lp[a]));
        Ok((shape, layout))
    }

    /// Undo standardization, snap onto the codebook, decode jointly.
    pub fn decode(&self, z: &Tensor, layout: PatchLayout) -> Result<Volume> {
        let lv = self.pvae.requantize(&self.stats.unstandardize(z), layout)?;
        Ok(self.pvae.decode_volume_joint(&lv)?)
    }
}
