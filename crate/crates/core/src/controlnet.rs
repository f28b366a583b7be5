//! Conditional adapter: a trainable copy of the estimator's encoder halves
//! feeding a frozen base through zero-initialized connectors.

use std::path::Path;

use meddiff_tensor::{file_hash, impl_module, Conv3d, Linear, Module, Param, Tensor, TensorArchive, Var};
use rand::Rng;

use crate::biflownet::{
    encode_levels, patchify_var, repeat_per_patch, BiFlowNet, ConditionEmbedding, ControlResiduals, Dit,
    DitBlock,
};
use crate::diffusion::{sample, DiffusionError, NoiseEstimator, NoiseSchedule, Result, WithHint};
use crate::layers::ResBlock3d;
use crate::pipeline::{self, LatentCodec, PipelineError};
use crate::volume::Volume;

/// Copy of the first half of the transformer flow with a zero hint
/// embedding on its input and a zero projection on its output.
#[derive(Clone, Debug)]
pub struct ControlDit {
    embed: Linear,
    pos: Param,
    hint_embed: Linear,
    blocks: Vec<DitBlock>,
    tap_out: Conv3d,
}
impl_module!(ControlDit { embed, pos, hint_embed, blocks, tap_out });

#[derive(Clone, Debug)]
pub struct ControlAdapter {
    /// Frozen base estimator; not part of this module's parameters.
    pub base: BiFlowNet,
    /// Content hash identifying the base checkpoint.
    pub base_hash: String,
    cond: ConditionEmbedding,
    conv_in: Conv3d,
    hint_in: Conv3d,
    enc: Vec<Vec<ResBlock3d>>,
    downs: Vec<Conv3d>,
    mid: ResBlock3d,
    skip_out: Vec<Conv3d>,
    mid_out: Conv3d,
    dit: Option<ControlDit>,
}
impl_module!(ControlAdapter { cond, conv_in, hint_in, enc, downs, mid, skip_out, mid_out, dit });

impl ControlAdapter {
    /// Copies the base encoder halves and freezes the base.
    pub fn new(mut base: BiFlowNet, base_hash: String) -> ControlAdapter {
        let c = base.config.channels;
        let widths = base.config.unet_widths.clone();
        let dit = base.dit.as_ref().map(|d| ControlDit {
            embed: d.embed.clone(),
            pos: d.pos.clone(),
            hint_embed: Linear::zeros(base.config.token_dim(), base.config.embed_dim),
            blocks: d.blocks[..base.config.depth / 2].to_vec(),
            tap_out: Conv3d::zeros(base.config.embed_dim, widths[base.config.fusion_level()]),
        });
        let mut adapter = ControlAdapter {
            cond: base.cond.clone(),
            conv_in: base.unet.conv_in.clone(),
            hint_in: Conv3d::zeros(c, widths[0]),
            enc: base.unet.enc.clone(),
            downs: base.unet.downs.clone(),
            mid: base.unet.mid.clone(),
            skip_out: widths.iter().map(|&w| Conv3d::zeros(w, w)).collect(),
            mid_out: Conv3d::zeros(widths[widths.len() - 1], widths[widths.len() - 1]),
            dit,
            base: {
                base.set_trainable(false);
                base
            },
            base_hash,
        };
        adapter.set_trainable(true);
        adapter
    }

    /// Connector layers, which start out as exact zero maps.
    pub fn connectors(&self) -> Vec<(String, &Param)> {
        self.named_params()
            .into_iter()
            .filter(|(n, _)| {
                ["hint_in.", "skip_out.", "mid_out.", "dit.hint_embed.", "dit.tap_out."].iter().any(|p| n.starts_with(p))
            })
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.named_params().iter().filter(|(_, p)| p.is_trainable()).map(|(_, p)| p.value().numel()).sum()
    }

    /// Residuals for the base given the condition latent `hint` (same shape as `zt`).
    pub fn residuals(&self, zt: &Var, t: &[usize], class: &[usize], hint: &Var) -> Result<ControlResiduals> {
        if hint.shape() != zt.shape() {
            return Err(DiffusionError::Shape(format!("condition {:?} vs latent {:?}", hint.shape(), zt.shape())));
        }
        let grid = self.base.grid_of(zt.shape())?;
        let cond = self.cond.forward(t, class)?;
        let h = self.conv_in.forward(zt).add(&self.hint_in.forward(hint));
        let (skips, mid) = encode_levels(&self.enc, &self.downs, &self.mid, h, &cond, None)?;
        let skips = skips.iter().zip(&self.skip_out).map(|(s, z)| z.forward(s)).collect();
        let mid = self.mid_out.forward(&mid);
        let tap = match &self.dit {
            None => None,
            Some(d) => {
                let cfg = &self.base.config;
                let cond_p = repeat_per_patch(&cond, grid.iter().product());
                let tokens = |v: &Var| patchify_var(v, cfg.latent_patch).map(|p| Dit::tokenize(&p, cfg.token));
                let mut h = d.embed.forward(&tokens(zt)?).add(&d.pos.var()).add(&d.hint_embed.forward(&tokens(hint)?));
                for blk in &d.blocks {
                    h = blk.forward(&h, &cond_p);
                }
                Some(d.tap_out.forward(&Dit::tokens_to_volume(&h, cfg.latent_patch, cfg.token, grid)))
            }
        };
        Ok(ControlResiduals { skips, mid, tap })
    }

    pub fn forward(&self, zt: &Var, t: &[usize], class: &[usize], hint: &Var) -> Result<Var> {
        let r = self.residuals(zt, t, class, hint)?;
        self.base.forward_with(zt, t, class, Some(&r))
    }

    /// Adapter and connector weights under `adapter.` plus the base hash
    /// and base architecture.
    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        a.insert_all("adapter.", &self.state_dict());
        a.metadata.insert("base_hash".into(), self.base_hash.clone());
        a.metadata.insert("architecture".into(), self.base.architecture_json());
        a
    }

    /// Rebuilds against `base`, which must carry the recorded hash and architecture.
    pub fn from_archive(a: &TensorArchive, base: BiFlowNet, base_hash: &str) -> Result<ControlAdapter> {
        let want = a.meta("base_hash")?;
        if want != base_hash {
            return Err(DiffusionError::Checkpoint(format!("adapter was trained on base {want}, got {base_hash}")));
        }
        if a.meta("architecture")? != base.architecture_json() {
            return Err(DiffusionError::Checkpoint("adapter architecture does not match the base estimator".into()));
        }
        let mut m = ControlAdapter::new(base, base_hash.to_string());
        m.load_state_dict(&a.with_prefix("adapter."))?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_archive().save(path)?)
    }

    /// Loads an adapter and its base checkpoint, verifying the base hash.
    pub fn load(path: &Path, base_path: &Path) -> Result<ControlAdapter> {
        let base = BiFlowNet::load(base_path)?;
        ControlAdapter::from_archive(&TensorArchive::load(path)?, base, &file_hash(base_path)?)
    }
}

impl NoiseEstimator for ControlAdapter {
    /// Without a condition the hint is an all-zero latent.
    fn predict(&self, zt: &Var, t: &[usize], class: &[usize]) -> Result<Var> {
        self.forward(zt, t, class, &Var::constant(Tensor::zeros(zt.shape())))
    }

    fn predict_hinted(&self, zt: &Var, t: &[usize], class: &[usize], hint: &Var) -> Result<Var> {
        self.forward(zt, t, class, hint)
    }
}

/// Condition latent: frozen patch-wise encode, quantize, standardize.
pub fn encode_condition(cond_vol: &Volume, target_extent: [usize; 3], codec: &LatentCodec) -> pipeline::Result<Tensor> {
    if cond_vol.shape() != target_extent {
        return Err(PipelineError::Geometry(format!(
            "condition extent {:?} differs from target extent {:?}",
            cond_vol.shape(),
            target_extent
        )));
    }
    Ok(codec.encode(cond_vol)?.0)
}

/// Ancestral sampling steered by the condition volume, then joint decode.
pub fn conditional_sample<R: Rng>(
    adapter: &ControlAdapter,
    cond_vol: &Volume,
    class: usize,
    sched: &NoiseSchedule,
    codec: &LatentCodec,
    rng: &mut R,
) -> pipeline::Result<Volume> {
    let (hint, layout) = codec.encode(cond_vol)?;
    let shape = hint.shape().to_vec();
    let z = sample(&WithHint { est: adapter, hint }, &shape, class, sched, rng)?;
    let mut out = codec.decode(&z, layout)?;
    out.spacing = cond_vol.spacing;
    out.class_tag = cond_vol.class_tag.clone();
    Ok(out)
}

/// Unconditional counterpart of [`conditional_sample`] for a base estimator.
pub fn unconditional_sample<R: Rng>(
    est: &dyn NoiseEstimator,
    extent: [usize; 3],
    class: usize,
    sched: &NoiseSchedule,
    codec: &LatentCodec,
    rng: &mut R,
) -> pipeline::Result<Volume> {
    let (shape, layout) = codec.latent_shape(extent)?;
    let z = sample(est, &shape, class, sched, rng)?;
    codec.decode(&z, layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biflownet::BiFlowConfig;
    use crate::diffusion::{diffusion_loss_at, randn_like, DiffusionConfig, DiffusionTrainer, TrainLatent};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(unet_only: bool) -> BiFlowNet {
        BiFlowNet::new(BiFlowConfig {
            channels: 2,
            latent_patch: [2; 3],
            token: 1,
            embed_dim: 8,
            heads: 2,
            mlp_ratio: 2,
            depth: 4,
            unet_widths: vec![4, 4],
            cond_dim: 8,
            num_classes: 2,
            timesteps: 10,
            cosine_offset: 0.008,
            unet_only,
            seed: 1,
        })
        .unwrap()
    }

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        randn_like(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_connectors_give_identity() {
        for unet_only in [false, true] {
            let base = toy(unet_only);
            let ad = ControlAdapter::new(base.clone(), "h".into());
            assert!(!ad.connectors().is_empty());
            assert!(ad.connectors().iter().all(|(_, p)| p.value().max_abs() == 0.0));
            for s in 0..5 {
                let z = Var::constant(rnd(&[1, 2, 4, 4, 4], s));
                let hint = Var::constant(rnd(&[1, 2, 4, 4, 4], s + 100));
                let t = [1 + s as usize];
                let c = [(s % 2) as usize];
                let want = base.predict(&z, &t, &c).unwrap();
                assert_eq!(ad.forward(&z, &t, &c, &hint).unwrap().value(), want.value());
            }
        }
    }

    #[test]
    fn adapter_is_smaller_than_base() {
        let base = toy(false);
        let total: usize = base.named_params().iter().map(|(_, p)| p.value().numel()).sum();
        let ad = ControlAdapter::new(base, "h".into());
        assert!(ad.trainable_count() < total);
        assert!(ad.base.named_params().iter().all(|(_, p)| !p.is_trainable()));
    }

    #[test]
    fn hint_shape_checked() {
        let ad = ControlAdapter::new(toy(false), "h".into());
        let z = Var::constant(rnd(&[1, 2, 4, 4, 4], 1));
        let bad = Var::constant(rnd(&[1, 2, 4, 4, 2], 1));
        assert!(matches!(ad.forward(&z, &[1], &[0], &bad), Err(DiffusionError::Shape(_))));
    }

    #[test]
    fn step_zero_loss_matches_base_and_base_stays_frozen() {
        let base = toy(false);
        let sched = NoiseSchedule::cosine(10, 0.008).unwrap();
        let z0 = rnd(&[1, 2, 4, 4, 4], 3);
        let hint = rnd(&[1, 2, 4, 4, 4], 4);
        let eps = rnd(&[1, 2, 4, 4, 4], 5);
        let ad = ControlAdapter::new(base.clone(), "h".into());
        let l_base = diffusion_loss_at(&base, &z0, &[1], &[6], &eps, &sched).unwrap().item();
        let l_ad = diffusion_loss_at(&WithHint { est: &ad, hint: hint.clone() }, &z0, &[1], &[6], &eps, &sched).unwrap().item();
        assert_eq!(l_base, l_ad);

        let before = base.params_hash();
        let data = vec![TrainLatent { latent: z0, class: 1, hint: Some(hint) }];
        let cfg = DiffusionConfig { timesteps: 10, lr: 1e-3, steps: 20, ..DiffusionConfig::default() };
        let mut tr = DiffusionTrainer::new(ad, cfg, data).unwrap();
        tr.train(20).unwrap();
        assert_eq!(tr.model.base.params_hash(), before);
        assert!(tr.model.connectors().iter().any(|(_, p)| p.value().max_abs() > 0.0));
        assert!(DiffusionTrainer::new(tr.model.clone(), DiffusionConfig::default(), vec![]).is_err());
    }

    #[test]
    fn mixed_hints_rejected() {
        let ad = ControlAdapter::new(toy(false), "h".into());
        let z = rnd(&[1, 2, 4, 4, 4], 1);
        let data = vec![TrainLatent { latent: z.clone(), class: 0, hint: Some(z.clone()) }, TrainLatent::new(z, 0)];
        assert!(DiffusionTrainer::new(ad, DiffusionConfig::default(), data).is_err());
    }

    #[test]
    fn archive_checks_base() {
        let base = toy(false);
        let mut ad = ControlAdapter::new(base.clone(), "abc".into());
        ad.mid_out.bias.as_mut().unwrap().set(Tensor::full(&[4], 0.25));
        let a = ad.to_archive();
        assert!(a.tensors.keys().all(|k| k.starts_with("adapter.")));
        let back = ControlAdapter::from_archive(&a, base.clone(), "abc").unwrap();
        assert_eq!(back.params_hash(), ad.params_hash());
        assert!(matches!(ControlAdapter::from_archive(&a, base, "xyz"), Err(DiffusionError::Checkpoint(_))));
        assert!(matches!(ControlAdapter::from_archive(&a, toy(true), "abc"), Err(DiffusionError::Checkpoint(_))));
    }

    #[test]
    fn predict_without_condition_uses_zero_hint() {
        let mut ad = ControlAdapter::new(toy(false), "h".into());
        ad.hint_in.weight.set(Tensor::full(&[4, 2, 1, 1, 1], 0.3));
        ad.skip_out[0].weight.set(Tensor::full(&[4, 4, 1, 1, 1], 0.1));
        let z = Var::constant(rnd(&[1, 2, 4, 4, 4], 8));
        let zero = Var::constant(Tensor::zeros(&[1, 2, 4, 4, 4]));
        let hint = Var::constant(rnd(&[1, 2, 4, 4, 4], 9));
        let a = ad.predict(&z, &[3], &[0]).unwrap();
        assert_eq!(a.value(), ad.forward(&z, &[3], &[0], &zero).unwrap().value());
        assert_ne!(a.value(), ad.forward(&z, &[3], &[0], &hint).unwrap().value());
    }
}
