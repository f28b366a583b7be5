//! Volumetric latent diffusion: a patch-volume VQ autoencoder, a dual-flow
//! noise estimator, control adapters, synthetic phantoms and metrics.

pub mod biflownet;
pub mod controlnet;
pub mod diffusion;
pub mod layers;
pub mod metrics;
pub mod pipeline;
pub mod pvae;
pub mod synth;
pub mod volume;

pub use volume::{PatchLayout, Volume};
