//! Two-stage training: patch stage (encoder, codebook, patch decoder,
//! critic) and joint stage (joint decoder and critic only).

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use meddiff_tensor::storage::{live_bytes, peak_bytes, reset_peak};
use meddiff_tensor::{no_grad, Adam, Module, ModuleGroup, Tensor, TensorArchive, Var};
use rand::Rng;

use super::loss::{slice_disc_objective, slice_generator_adv, total_ae_loss, triplane_loss, vq_loss};
use super::quant::{stitch_blocks_var, straight_through};
use super::{LatentVolume, PvaeError, PvaeModel, Result};
use crate::layers::{batch_l2, stream_rng};
use crate::metrics::psnr_from_mse;
use crate::volume::{partition, reflect_pad, PatchLayout, Volume};

/// Losses of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub step: u64,
    pub total: f64,
    pub vq: f64,
    pub adv: f64,
    pub tp: f64,
    /// Critic objective, once the critic trains.
    pub disc: Option<f64>,
}

impl StepLosses {
    pub const CSV_HEADER: &'static str = "step,loss_total,loss_vq,loss_adv,loss_tp";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.total, self.vq, self.adv, self.tp)
    }
}

/// Appends loss rows to a CSV file, writing the header when the file is new.
pub fn append_loss_rows(path: &Path, rows: &[StepLosses]) -> std::io::Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{}", StepLosses::CSV_HEADER)?;
    }
    for r in rows {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

struct JointItem {
    target: Tensor,
    z: Tensor,
    latent: LatentVolume,
}

pub struct PvaeTrainer {
    pub model: PvaeModel,
    opt_ae: Adam,
    opt_d: Adam,
    /// Global step, continued across both stages.
    pub step: u64,
    patches: Vec<Tensor>,
    volumes: Vec<Volume>,
    joint: Vec<JointItem>,
}

fn random_index<R: Rng>(rng: &mut R, extent: &[usize]) -> [usize; 3] {
    [0, 1, 2].map(|a| rng.gen_range(0..extent[a]))
}

impl PvaeTrainer {
    /// `volumes` are expected in the normalized [-1, 1] range.
    pub fn new(model: PvaeModel, volumes: Vec<Volume>) -> Result<PvaeTrainer> {
        if volumes.is_empty() {
            return Err(PvaeError::NoData);
        }
        let mut patches = Vec::new();
        for v in &volumes {
            let (ps, _) = partition(v, model.config.patch)?;
            patches.extend(ps.iter().map(|p| p.to_tensor()));
        }
        let lr = if model.stage >= 2 { model.config.lr_stage2 } else { model.config.lr_stage1 };
        let mut t = PvaeTrainer {
            opt_ae: Adam::new(lr),
            opt_d: Adam::new(model.config.lr_disc),
            model,
            step: 0,
            patches,
            volumes,
            joint: Vec::new(),
        };
        if t.model.stage >= 2 {
            t.prepare_joint()?;
        }
        Ok(t)
    }

    fn critic_active(&self) -> bool {
        self.step >= self.model.config.disc_warmup
    }

    fn check_finite(&self, l: &StepLosses) -> Result<()> {
        for (name, v) in [("total", l.total), ("vq", l.vq), ("adv", l.adv), ("tp", l.tp)] {
            if !v.is_finite() {
                return Err(PvaeError::Diverged { step: self.step, detail: format!("{name} loss is {v}") });
            }
        }
        Ok(())
    }

    /// Critic update on matched slices; returns the critic objective.
    fn critic_step(&mut self, x: &Var, x_rec: &Var, idx: [usize; 3]) -> Result<f64> {
        let obj = slice_disc_objective(&self.model.discriminator, x, &x_rec.detach(), idx);
        let v = obj.item();
        if !v.is_finite() {
            return Err(PvaeError::Diverged { step: self.step, detail: "critic objective is not finite".into() });
        }
        let g = obj.neg().backward();
        self.opt_d.step(&mut self.model.discriminator, &g);
        Ok(v)
    }

    /// One patch-stage step on a random batch of aligned patches.
    pub fn stage1_step(&mut self) -> Result<StepLosses> {
        if self.model.stage >= 2 {
            return Err(PvaeError::Config("the patch stage is over for this model".into()));
        }
        self.model.stage = 1;
        let cfg = self.model.config.clone();
        let mut rng = stream_rng(cfg.seed, self.step + 1);
        let picks: Vec<&Tensor> = (0..cfg.batch).map(|_| &self.patches[rng.gen_range(0..self.patches.len())]).collect();
        let x = Var::constant(Tensor::concat(&picks, 0));
        let idx = random_index(&mut rng, &cfg.patch);

        let m = &self.model;
        let z = m.encoder.forward(&x);
        let q = m.codebook.quantize(z.value())?;
        let zq = m.codebook.lookup_var(&q.indices, q.grid());
        let x_rec = m.patch_decoder.forward(&straight_through(&z, &q.features));
        let vq = vq_loss(&x, &x_rec, &z, &zq)?.total();
        let tp = triplane_loss(&x, &x_rec, &m.features, idx)?;
        let critic_on = self.critic_active();
        let adv = if critic_on {
            slice_generator_adv(&m.discriminator, &x_rec, idx)
        } else {
            Var::constant(Tensor::scalar(0.0))
        };
        let total = total_ae_loss(&vq, &adv, &tp, cfg.lambda_adv, cfg.lambda_tp);
        let mut out = StepLosses { step: self.step, total: total.item(), vq: vq.item(), adv: adv.item(), tp: tp.item(), disc: None };
        self.check_finite(&out)?;

        let g = total.backward();
        {
            let mut group = ModuleGroup::new()
                .with("encoder", &mut self.model.encoder)
                .with("codebook", &mut self.model.codebook)
                .with("patch_decoder", &mut self.model.patch_decoder);
            self.opt_ae.step(&mut group, &g);
        }
        if critic_on {
            out.disc = Some(self.critic_step(&x, &x_rec, idx)?);
        }
        self.model.codebook.record_usage(&q.indices);
        self.step += 1;
        if cfg.reseed_every > 0 && self.step.is_multiple_of(cfg.reseed_every) {
            let rows = z.value().permute(&[0, 2, 3, 4, 1]);
            let n = self.model.codebook.reseed_dead(rows.data(), &mut rng);
            log::debug!("step {}: reseeded {n} dead codes", self.step);
        }
        Ok(out)
    }

    pub fn train_stage1(&mut self, steps: u64) -> Result<Vec<StepLosses>> {
        (0..steps).map(|_| self.stage1_step()).collect()
    }

    /// Switches to the joint stage: the joint decoder starts as a copy of
    /// the patch decoder, encoder and codebook are frozen, and the encoder
    /// runs once per volume outside any gradient graph.
    pub fn begin_stage2(&mut self) -> Result<()> {
        if self.model.stage == 0 {
            return Err(PvaeError::NoStage1);
        }
        if self.model.stage == 1 {
            self.model.joint_decoder = Some(self.model.patch_decoder.clone());
            self.model.stage = 2;
            self.opt_ae = Adam::new(self.model.config.lr_stage2);
        }
        self.prepare_joint()
    }

    fn prepare_joint(&mut self) -> Result<()> {
        self.model.encoder.set_trainable(false);
        self.model.codebook.set_trainable(false);
        self.joint = self
            .volumes
            .iter()
            .map(|v| {
                let (z, latent) = self.model.encode_volume_full(v)?;
                let target = reflect_pad(v, latent.layout.padded()).to_tensor();
                Ok(JointItem { target, z, latent })
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// One joint-stage step on a random whole volume.
    pub fn stage2_step(&mut self) -> Result<StepLosses> {
        if self.model.stage < 2 || self.joint.is_empty() {
            return Err(PvaeError::NoStage1);
        }
        let cfg = self.model.config.clone();
        let mut rng = stream_rng(cfg.seed, self.step + 1);
        let item = &self.joint[rng.gen_range(0..self.joint.len())];
        let idx = random_index(&mut rng, &item.target.shape()[2..]);
        let x = Var::constant(item.target.clone());
        let m = &self.model;
        let dec = m.joint_decoder.as_ref().expect("joint decoder in stage 2");
        let x_rec = dec.forward(&Var::constant(item.latent.features.clone()));
        let vq = vq_loss(&x, &x_rec, &Var::constant(item.z.clone()), &Var::constant(item.latent.features.clone()))?.total();
        let tp = triplane_loss(&x, &x_rec, &m.features, idx)?;
        let critic_on = self.critic_active();
        let adv = if critic_on {
            slice_generator_adv(&m.discriminator, &x_rec, idx)
        } else {
            Var::constant(Tensor::scalar(0.0))
        };
        let total = total_ae_loss(&vq, &adv, &tp, cfg.lambda_adv, cfg.lambda_tp);
        let mut out = StepLosses { step: self.step, total: total.item(), vq: vq.item(), adv: adv.item(), tp: tp.item(), disc: None };
        self.check_finite(&out)?;
        let g = total.backward();
        {
            let joint = self.model.joint_decoder.as_mut().expect("joint decoder in stage 2");
            let mut group = ModuleGroup::new().with("joint_decoder", joint);
            self.opt_ae.step(&mut group, &g);
        }
        if critic_on {
            out.disc = Some(self.critic_step(&x, &x_rec, idx)?);
        }
        self.step += 1;
        Ok(out)
    }

    pub fn train_stage2(&mut self, steps: u64) -> Result<Vec<StepLosses>> {
        (0..steps).map(|_| self.stage2_step()).collect()
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = self.model.to_archive()?;
        a.insert_all("opt_ae.", &self.opt_ae.state());
        a.insert_all("opt_d.", &self.opt_d.state());
        a.metadata.insert("step".into(), self.step.to_string());
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_archive()?.save(path)?)
    }

    /// Restores model, optimizer moments and step counter.
    pub fn resume(path: &Path, volumes: Vec<Volume>) -> Result<PvaeTrainer> {
        let a = TensorArchive::load(path)?;
        let model = PvaeModel::from_archive(&a)?;
        let mut t = PvaeTrainer::new(model, volumes)?;
        t.opt_ae.load_state(&a.with_prefix("opt_ae."))?;
        t.opt_d.load_state(&a.with_prefix("opt_d."))?;
        t.step = a.meta("step")?.parse().map_err(|_| PvaeError::Checkpoint("bad step counter".into()))?;
        Ok(t)
    }
}

/// Patch reconstruction PSNR (encode → quantize → patch decode) over all
/// aligned patches of `vols`, from the aggregate MSE on the [-1, 1] scale.
pub fn patch_psnr(model: &PvaeModel, vols: &[Volume]) -> Result<f64> {
    let mut se = 0.0;
    let mut n = 0usize;
    for v in vols {
        let (patches, _) = partition(v, model.config.patch)?;
        for chunk in patches.chunks(model.config.batch) {
            let parts: Vec<Tensor> = chunk.iter().map(|p| p.to_tensor()).collect();
            let x = Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0);
            let z = no_grad(|| model.encoder.forward(&Var::constant(x.clone())).value().clone());
            let rec = model.decode_patch(&model.quantize(&z)?)?;
            se += rec.sub(&x).sq_norm();
            n += x.numel();
        }
    }
    Ok(psnr_from_mse(se / n as f64, 2.0))
}

/// Peak numeric-buffer bytes of one joint-stage training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryReport {
    /// Encoder outside the graph, joint decoder trained on cached latents.
    pub efficient: usize,
    /// Encoder inside the graph for every patch, as if trained end to end.
    pub naive: usize,
}

fn joint_step_loss(model: &PvaeModel, x: &Var, latent: &Var, idx: [usize; 3]) -> Result<Var> {
    let x_rec = model.volume_decoder().forward(latent);
    let rec = batch_l2(&x.sub(&x_rec));
    let tp = triplane_loss(x, &x_rec, &model.features, idx)?;
    Ok(rec.add(&tp.scale(model.config.lambda_tp)))
}

/// Measures forward + backward peak memory of one joint-stage step on
/// `vol` for the efficient path and for a naive full-graph variant.
/// Uses process-wide counters, so nothing else should run concurrently.
pub fn memory_probe(model: &PvaeModel, vol: &Volume) -> Result<MemoryReport> {
    let layout = PatchLayout::new(vol.shape(), model.config.patch)?;
    let idx = layout.extent.map(|e| e / 2);
    let x = Var::constant(reflect_pad(vol, layout.padded()).to_tensor());

    let efficient = {
        let base = live_bytes();
        reset_peak();
        let lv = model.encode_volume_patchwise(vol)?;
        let loss = joint_step_loss(model, &x, &Var::constant(lv.features.clone()), idx)?;
        let g = loss.backward();
        let peak = peak_bytes().saturating_sub(base);
        drop((g, loss, lv));
        peak
    };

    let naive = {
        let mut m = model.clone();
        m.encoder.set_trainable(true);
        m.codebook.set_trainable(true);
        let base = live_bytes();
        reset_peak();
        let (patches, layout) = partition(vol, m.config.patch)?;
        let parts: Vec<Tensor> = patches.iter().map(|p| p.to_tensor()).collect();
        let xp = Var::constant(Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0));
        let z = m.encoder.forward(&xp);
        let q = m.codebook.quantize(z.value())?;
        let zq = straight_through(&z, &q.features);
        let latent = stitch_blocks_var(&zq, layout.grid);
        let loss = joint_step_loss(&m, &x, &latent, idx)?;
        let g = loss.backward();
        let peak = peak_bytes().saturating_sub(base);
        drop((g, loss, latent, zq, z));
        peak
    };
    Ok(MemoryReport { efficient, naive })
}
