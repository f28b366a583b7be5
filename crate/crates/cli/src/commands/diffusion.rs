use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use meddiff::biflownet::BiFlowNet;
use meddiff::controlnet::unconditional_sample;
use meddiff::diffusion::{DiffusionConfig, DiffusionTrainer, LatentStats, NoiseSchedule, TrainLatent};
use meddiff::layers::stream_rng;
use meddiff::pipeline::LatentCodec;
use meddiff::pvae::PvaeModel;
use meddiff::volume::{save_volume, sidecar_path};
use meddiff_tensor::TensorArchive;
use serde::{Deserialize, Serialize};

use super::{class_index, describe_classes, require, Ctx, DataManifest, LossLog};
use crate::run::{hash_file, RunManifest};
use crate::{usage, CliError, CliResult};

/// A trained estimator together with everything needed to decode its samples.
pub struct EstimatorBundle {
    pub net: BiFlowNet,
    pub stats: LatentStats,
    pub classes: Vec<String>,
    pub extent: [usize; 3],
    pub diffusion: DiffusionConfig,
    pub schedule: NoiseSchedule,
    pub pvae: PvaeModel,
    pub pvae_path: PathBuf,
}

fn meta_json<T: for<'de> Deserialize<'de>>(a: &TensorArchive, key: &str) -> CliResult<T> {
    Ok(serde_json::from_str(a.meta(key)?).with_context(|| format!("checkpoint metadata `{key}`"))?)
}

impl EstimatorBundle {
    /// Loads an estimator checkpoint and the autoencoder it was trained on,
    /// checking the autoencoder's content hash.
    pub fn load(path: &Path) -> CliResult<EstimatorBundle> {
        require(path, "estimator checkpoint")?;
        let a = TensorArchive::load(path)?;
        let net = BiFlowNet::from_archive(&a)?;
        let diffusion: DiffusionConfig = meta_json(&a, "diffusion")?;
        let pvae_path = PathBuf::from(a.meta("pvae_path")?);
        require(&pvae_path, "autoencoder checkpoint recorded in the estimator")?;
        let want = a.meta("pvae_hash")?;
        let got = hash_file(&pvae_path)?;
        if got != want {
            return Err(CliError::Runtime(anyhow::anyhow!(
                "autoencoder {} changed since the estimator was trained ({got} vs {want})",
                pvae_path.display()
            )));
        }
        Ok(EstimatorBundle {
            net,
            stats: meta_json(&a, "latent_stats")?,
            classes: meta_json(&a, "classes")?,
            extent: meta_json(&a, "extent")?,
            schedule: diffusion.schedule()?,
            diffusion,
            pvae: PvaeModel::load(&pvae_path)?,
            pvae_path,
        })
    }

    pub fn codec(&self) -> LatentCodec<'_> {
        LatentCodec::new(&self.pvae, &self.stats)
    }
}

pub fn train_diffusion(
    ctx: &Ctx,
    pvae: Option<&Path>,
    resume: Option<&Path>,
    steps: Option<u64>,
    m: &mut RunManifest,
) -> CliResult<()> {
    let pvae_path = pvae.map(Path::to_path_buf).unwrap_or_else(|| ctx.default_pvae());
    require(&pvae_path, "autoencoder checkpoint")?;
    let pvae_path = pvae_path.canonicalize()?;
    let pvae_hash = m.input(&pvae_path)?;
    let model = PvaeModel::load(&pvae_path)?;
    if model.stage < 2 {
        log::warn!("autoencoder has no joint decoder yet; samples will use the patch decoder");
    }
    let dir = ctx.data_dir();
    let data = DataManifest::load(&dir)?;
    m.input(&dir.join(super::DATA_MANIFEST))?;
    let classes = ctx.cfg.data.families.clone();
    let n_classes = ctx.cfg.num_classes();
    let mut labels = Vec::with_capacity(data.items.len());
    for it in &data.items {
        let c = classes.iter().position(|f| *f == it.family).ok_or_else(|| {
            usage!("data family `{}` is not among configured classes ({})", it.family, describe_classes(&classes))
        })?;
        if c >= n_classes {
            return Err(usage!(
                "class-count mismatch: data uses class {c} ({}) but biflownet.num_classes is {n_classes}",
                it.family
            ));
        }
        labels.push(c);
    }
    let vols = data.volumes(&dir)?;
    let raw: Vec<_> = vols.iter().map(|v| Ok(model.encode_volume_patchwise(v)?.features)).collect::<CliResult<_>>()?;
    let stats = LatentStats::fit(&raw)?;
    let latents: Vec<TrainLatent> =
        raw.iter().zip(&labels).map(|(z, &c)| TrainLatent::new(stats.standardize(z), c)).collect();

    let net = BiFlowNet::new(ctx.cfg.biflow_config()?).map_err(|e| usage!("[biflownet] {e}"))?;
    let mut t = DiffusionTrainer::new(net, ctx.cfg.diffusion.clone(), latents)?;
    if let Some(p) = resume {
        require(p, "checkpoint")?;
        m.input(p)?;
        t.restore(&TensorArchive::load(p)?)?;
    }
    let s = &t.schedule;
    println!(
        "schedule: cosine T={} alpha_bar[1]={:.6} alpha_bar[T]={:.3e}",
        s.steps(),
        s.alpha_bar[1],
        s.alpha_bar[s.steps()]
    );

    let ckpt = ctx.diffusion_ckpt();
    std::fs::create_dir_all(ckpt.parent().expect("nested path"))?;
    let extras = [
        ("latent_stats", serde_json::to_string(&stats)?),
        ("classes", serde_json::to_string(&classes)?),
        ("extent", serde_json::to_string(&data.extent)?),
        ("pvae_path", pvae_path.display().to_string()),
        ("pvae_hash", pvae_hash),
    ];
    let save = |t: &DiffusionTrainer<BiFlowNet>| -> CliResult<()> {
        let mut a = t.to_archive();
        a.metadata.insert("architecture".into(), t.model.architecture_json());
        for (k, v) in &extras {
            a.metadata.insert(k.to_string(), v.clone());
        }
        a.save(&ckpt)?;
        Ok(())
    };
    let log = LossLog::open(ckpt.with_file_name("loss.csv"), "step,loss", t.step)?;
    let until = steps.unwrap_or(ctx.cfg.diffusion.steps);
    let mut rows = Vec::new();
    let mut last = f64::NAN;
    while t.step < until {
        let step = t.step;
        last = t.train_step()?;
        rows.push(format!("{step},{last}"));
        if t.step % ctx.cfg.runtime.log_interval == 0 {
            log::info!("step {step} loss {last:.5}");
            log.append(&rows)?;
            rows.clear();
        }
        if t.step % ctx.cfg.runtime.checkpoint_every == 0 {
            save(&t)?;
        }
    }
    log.append(&rows)?;
    save(&t)?;
    println!("trained to step {} (last loss {last:.5}) -> {}", t.step, ckpt.display());
    m.note("final_loss", last);
    m.output(&ckpt);
    m.output(log.path());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub file: String,
    pub index: usize,
    pub seed: u64,
    pub class: String,
    pub sha256: String,
    pub model_hash: String,
    pub schedule_hash: String,
    pub steps: usize,
}

pub fn sample_cmd(
    ctx: &Ctx,
    model: Option<&Path>,
    count: usize,
    class: Option<&str>,
    seed: Option<u64>,
    out: Option<&Path>,
    m: &mut RunManifest,
) -> CliResult<()> {
    let path = model.map(Path::to_path_buf).unwrap_or_else(|| ctx.diffusion_ckpt());
    let b = EstimatorBundle::load(&path)?;
    let model_hash = m.input(&path)?;
    m.input(&b.pvae_path)?;
    let c = match class {
        Some(name) => class_index(&b.classes, name)?,
        None => 0,
    };
    let seed = seed.unwrap_or(ctx.cfg.runtime.seed);
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| ctx.root.join("samples").join(format!("seed{seed}-{}", b.classes[c])));
    std::fs::create_dir_all(&out)?;
    let codec = b.codec();
    let mut rows = String::new();
    for i in 0..count {
        let mut rng = stream_rng(seed, i as u64);
        let mut vol = unconditional_sample(&b.net, b.extent, c, &b.schedule, &codec, &mut rng)?;
        vol.class_tag = b.classes[c].clone();
        let file = format!("sample_{i:03}.raw");
        let p = out.join(&file);
        save_volume(&vol, &p)?;
        m.output(&p);
        m.output(&sidecar_path(&p));
        let rec = SampleRecord {
            sha256: hash_file(&p)?,
            file,
            index: i,
            seed,
            class: b.classes[c].clone(),
            model_hash: model_hash.clone(),
            schedule_hash: b.schedule.hash(),
            steps: b.schedule.steps(),
        };
        rows.push_str(&serde_json::to_string(&rec)?);
        rows.push('\n');
        log::info!("sample {i} -> {}", p.display());
    }
    let mpath = out.join("manifest.jsonl");
    let mut f = std::fs::File::create(&mpath)?;
    f.write_all(rows.as_bytes())?;
    m.output(&mpath);
    println!("wrote {count} samples of class {} to {}", b.classes[c], out.display());
    Ok(())
}
