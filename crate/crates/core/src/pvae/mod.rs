//! Patch-volume autoencoder: a patch encoder with a learned codebook, a
//! patch decoder for the first training stage and a joint decoder that
//! decodes a stitched latent volume in one pass.

pub mod loss;
pub mod nets;
pub mod quant;
pub mod train;

use std::path::Path;

use meddiff_tensor::{impl_module, no_grad, Module, Tensor, TensorArchive, TensorError, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::layers::stream_rng;
use crate::volume::{partition, PatchLayout, Volume, VolumeError};
pub use loss::{disc_objective, generator_adv, total_ae_loss, triplane_loss, vq_loss, VqLoss};
pub use nets::{Decoder, Encoder, PatchDiscriminator, PlaneFeatures, RandomPlaneFeatures, SliceCritic, REDUCTION};
pub use quant::{straight_through, Codebook, LatentVolume, QuantizedLatent};
pub use train::{memory_probe, patch_psnr, MemoryReport, PvaeTrainer, StepLosses};

#[derive(Debug, thiserror::Error)]
pub enum PvaeError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("codebook is empty")]
    EmptyCodebook,
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage 2 needs a model that went through stage 1")]
    NoStage1,
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("no training volumes")]
    NoData,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PvaeError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PvaeConfig {
    pub patch: [usize; 3],
    pub widths: [usize; 3],
    pub res_blocks: usize,
    pub latent_channels: usize,
    pub codebook_size: usize,
    pub lambda_adv: f64,
    pub lambda_tp: f64,
    pub disc_warmup: u64,
    pub disc_width: usize,
    pub feature_seed: u64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub lr_disc: f64,
    pub batch: usize,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    /// Dead-code sweep period in steps; 0 disables reseeding.
    pub reseed_every: u64,
    pub seed: u64,
}

impl Default for PvaeConfig {
    fn default() -> Self {
        PvaeConfig {
            patch: [32; 3],
            widths: [32, 64, 128],
            res_blocks: 1,
            latent_channels: 8,
            codebook_size: 8192,
            lambda_adv: 2.0,
            lambda_tp: 4.0,
            disc_warmup: 500,
            disc_width: 8,
            feature_seed: 0,
            lr_stage1: 3e-4,
            lr_stage2: 3e-5,
            lr_disc: 3e-4,
            batch: 4,
            stage1_steps: 5000,
            stage2_steps: 1000,
            reseed_every: 200,
            seed: 0,
        }
    }
}

impl PvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch.iter().any(|&p| p == 0 || p % REDUCTION != 0) {
            return Err(PvaeError::Config(format!("patch {:?} must be a positive multiple of {REDUCTION}", self.patch)));
        }
        if self.patch.iter().any(|&p| p < 4) {
            return Err(PvaeError::Config("patch sides below 4 cannot feed the slice discriminator".into()));
        }
        if self.widths.contains(&0) || self.latent_channels == 0 || self.disc_width == 0 {
            return Err(PvaeError::Config("widths, latent channels and critic width must be positive".into()));
        }
        if self.codebook_size < 2 {
            return Err(PvaeError::Config(format!("codebook size {} is below 2", self.codebook_size)));
        }
        if self.batch == 0 {
            return Err(PvaeError::Config("batch must be positive".into()));
        }
        if !(self.lr_stage1 > 0.0 && self.lr_stage2 > 0.0 && self.lr_disc > 0.0) {
            return Err(PvaeError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn latent_patch(&self) -> [usize; 3] {
        self.patch.map(|p| p / REDUCTION)
    }
}

/// Trained (or training) autoencoder. `stage` is 0 before any training,
/// 1 during/after the patch stage and 2 once the joint decoder exists.
#[derive(Clone, Debug)]
pub struct PvaeModel {
    pub config: PvaeConfig,
    pub encoder: Encoder,
    pub codebook: Codebook,
    pub patch_decoder: Decoder,
    pub joint_decoder: Option<Decoder>,
    pub discriminator: PatchDiscriminator,
    pub features: RandomPlaneFeatures,
    pub stage: u8,
}
impl_module!(PvaeModel { encoder, codebook, patch_decoder, joint_decoder, discriminator });

impl PvaeModel {
    pub fn new(config: PvaeConfig) -> Result<PvaeModel> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, 0);
        let c = &config;
        Ok(PvaeModel {
            encoder: Encoder::new(c.widths, c.res_blocks, c.latent_channels, &mut rng),
            codebook: Codebook::new(c.codebook_size, c.latent_channels, &mut rng),
            patch_decoder: Decoder::new(c.widths, c.res_blocks, c.latent_channels, &mut rng),
            joint_decoder: None,
            discriminator: PatchDiscriminator::new(c.disc_width, &mut rng),
            features: RandomPlaneFeatures::new(c.feature_seed),
            stage: 0,
            config,
        })
    }

    /// Decoder used for whole-volume decoding: the joint decoder once it
    /// exists, otherwise the patch decoder.
    pub fn volume_decoder(&self) -> &Decoder {
        self.joint_decoder.as_ref().unwrap_or(&self.patch_decoder)
    }

    /// Hash over encoder and codebook parameters.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.encoder.params_hash());
        h.update(self.codebook.params_hash());
        hex::encode(h.finalize())
    }

    fn check_patch_batch(&self, x: &[usize]) -> Result<()> {
        if x.len() != 5 || x[1] != 1 || x[2..] != self.config.patch {
            return Err(PvaeError::Shape(format!(
                "patch batch {x:?} does not match (N, 1, {:?})",
                self.config.patch
            )));
        }
        Ok(())
    }

    /// Pre-quantization features of a `(N, 1, h, w, d)` patch batch.
    pub fn encode(&self, x: &Var) -> Result<Var> {
        self.check_patch_batch(x.shape())?;
        Ok(self.encoder.forward(x))
    }

    /// Pre-quantization features of a single patch, `(1, C, h/4, w/4, d/4)`.
    pub fn encode_patch(&self, patch: &Volume) -> Result<Tensor> {
        if patch.shape() != self.config.patch {
            return Err(PvaeError::Shape(format!("patch {:?}, model expects {:?}", patch.shape(), self.config.patch)));
        }
        Ok(no_grad(|| self.encoder.forward(&Var::constant(patch.to_tensor())).value().clone()))
    }

    pub fn quantize(&self, z: &Tensor) -> Result<QuantizedLatent> {
        self.codebook.quantize(z)
    }

    fn check_latent(&self, s: &[usize], spatial: Option<[usize; 3]>) -> Result<()> {
        let ok = s.len() == 5
            && s[1] == self.config.latent_channels
            && spatial.is_none_or(|sp| s[2..] == sp)
            && s[2..].iter().all(|&e| e > 0);
        if !ok {
            return Err(PvaeError::Shape(format!(
                "latent {s:?} does not match {} channels{}",
                self.config.latent_channels,
                spatial.map(|sp| format!(" and extent {sp:?}")).unwrap_or_default()
            )));
        }
        Ok(())
    }

    /// Patch reconstructions `(N, 1, h, w, d)` from quantized latents.
    pub fn decode_patch(&self, q: &QuantizedLatent) -> Result<Tensor> {
        self.check_latent(q.features.shape(), Some(self.config.latent_patch()))?;
        Ok(no_grad(|| self.patch_decoder.forward(&Var::constant(q.features.clone())).value().clone()))
    }

    /// Partition → encode → quantize → stitch in layout order.
    pub fn encode_volume_patchwise(&self, vol: &Volume) -> Result<LatentVolume> {
        Ok(self.encode_volume_full(vol)?.1)
    }

    /// Like [`PvaeModel::encode_volume_patchwise`] but also returns the
    /// stitched pre-quantization features.
    pub fn encode_volume_full(&self, vol: &Volume) -> Result<(Tensor, LatentVolume)> {
        let (patches, layout) = partition(vol, self.config.patch)?;
        let lp = self.config.latent_patch();
        let mut raw = Vec::with_capacity(patches.len());
        let mut feats = Vec::with_capacity(patches.len());
        let mut idx = Vec::new();
        for chunk in patches.chunks(self.config.batch) {
            let parts: Vec<Tensor> = chunk.iter().map(|p| p.to_tensor()).collect();
            let x = Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0);
            let z = no_grad(|| self.encoder.forward(&Var::constant(x)).value().clone());
            let q = self.codebook.quantize(&z)?;
            idx.extend_from_slice(&q.indices);
            feats.push(q.features);
            raw.push(z);
        }
        let stitch = |ts: &[Tensor]| quant::stitch_blocks(&Tensor::concat(&ts.iter().collect::<Vec<_>>(), 0), layout.grid, lp);
        let features = stitch(&feats);
        let z = stitch(&raw);
        let idx_t = Tensor::new(&[patches.len(), 1, lp[0], lp[1], lp[2]], idx.iter().map(|&i| i as f64).collect());
        let indices = quant::stitch_blocks(&idx_t, layout.grid, lp).data().iter().map(|&v| v as usize).collect();
        Ok((z, LatentVolume { features, indices, layout }))
    }

    /// Latent volume whose features are the codes nearest to `z`, used to
    /// snap generated latents back onto the codebook.
    pub fn requantize(&self, z: &Tensor, layout: PatchLayout) -> Result<LatentVolume> {
        let q = self.codebook.quantize(z)?;
        let lv = LatentVolume { features: q.features, indices: q.indices, layout };
        self.check_joint_extent(&lv)?;
        Ok(lv)
    }

    fn check_joint_extent(&self, lv: &LatentVolume) -> Result<()> {
        let want = lv.layout.padded().map(|p| p / REDUCTION);
        self.check_latent(lv.features.shape(), Some(want))?;
        if lv.features.shape()[0] != 1 || lv.layout.padded().iter().any(|p| p % REDUCTION != 0) {
            return Err(PvaeError::Shape("latent volume must be a single padded volume".into()));
        }
        Ok(())
    }

    /// One decoder pass over the whole latent volume, cropped to the
    /// original extent.
    pub fn decode_volume_joint(&self, lv: &LatentVolume) -> Result<Volume> {
        self.check_joint_extent(lv)?;
        let out = no_grad(|| self.volume_decoder().forward(&Var::constant(lv.features.clone())).value().clone());
        let full = Volume::from_tensor(&out, &Volume::zeros([1; 3]))?;
        Ok(lv.layout.crop(&full)?)
    }

    /// Baseline: decode every latent block with the patch decoder and
    /// concatenate the patch reconstructions.
    pub fn decode_patches_naive(&self, lv: &LatentVolume) -> Result<Volume> {
        self.check_joint_extent(lv)?;
        let lp = self.config.latent_patch();
        let blocks = quant::split_blocks(&lv.features, lv.layout.grid, lp);
        let n = blocks.shape()[0];
        let mut outs = Vec::with_capacity(n);
        for s in (0..n).step_by(self.config.batch.max(1)) {
            let len = self.config.batch.max(1).min(n - s);
            let b = blocks.narrow(0, s, len);
            outs.push(no_grad(|| self.patch_decoder.forward(&Var::constant(b)).value().clone()));
        }
        let all = Tensor::concat(&outs.iter().collect::<Vec<_>>(), 0);
        let full = quant::stitch_blocks(&all, lv.layout.grid, self.config.patch);
        let vol = Volume::from_tensor(&full, &Volume::zeros([1; 3]))?;
        Ok(lv.layout.crop(&vol)?)
    }

    /// Encode patchwise and decode jointly.
    pub fn reconstruct(&self, vol: &Volume) -> Result<Volume> {
        let lv = self.encode_volume_patchwise(vol)?;
        let mut out = self.decode_volume_joint(&lv)?;
        out.spacing = vol.spacing;
        out.class_tag = vol.class_tag.clone();
        out.value_range = vol.value_range;
        Ok(out)
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        a.insert_all("model.", &self.state_dict());
        a.insert("codebook_usage", usage_tensor(&self.codebook.usage));
        a.insert("codebook_epoch_usage", usage_tensor(&self.codebook.epoch_usage));
        a.metadata.insert("config".into(), serde_json::to_string(&self.config).expect("config serializes"));
        a.metadata.insert("stage".into(), self.stage.to_string());
        a.metadata.insert("frozen_hash".into(), self.frozen_hash());
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<PvaeModel> {
        let config: PvaeConfig =
            serde_json::from_str(a.meta("config")?).map_err(|e| PvaeError::Checkpoint(format!("config: {e}")))?;
        let stage: u8 = a.meta("stage")?.parse().map_err(|_| PvaeError::Checkpoint("bad stage flag".into()))?;
        let mut m = PvaeModel::new(config)?;
        m.stage = stage;
        if stage >= 2 {
            m.joint_decoder = Some(m.patch_decoder.clone());
        }
        m.load_state_dict(&a.with_prefix("model."))?;
        m.codebook.usage = usage_vec(a.get("codebook_usage")?);
        m.codebook.epoch_usage = usage_vec(a.get("codebook_epoch_usage")?);
        if m.codebook.usage.len() != m.codebook.len() || m.codebook.epoch_usage.len() != m.codebook.len() {
            return Err(PvaeError::Checkpoint("codebook usage length mismatch".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_archive()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<PvaeModel> {
        PvaeModel::from_archive(&TensorArchive::load(path)?)
    }
}

pub(crate) fn usage_tensor(u: &[u64]) -> Tensor {
    Tensor::new(&[u.len()], u.iter().map(|&c| c as f64).collect())
}

pub(crate) fn usage_vec(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|&c| c as u64).collect()
}
