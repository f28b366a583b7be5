use std::path::{Path, PathBuf};

use meddiff::controlnet::{conditional_sample, encode_condition, ControlAdapter};
use meddiff::diffusion::{DiffusionConfig, DiffusionTrainer, TrainLatent};
use meddiff::layers::stream_rng;
use meddiff::metrics::psnr;
use meddiff::synth::read_pairs;
use meddiff::volume::{load_volume, save_volume, sidecar_path};
use meddiff_tensor::TensorArchive;
use serde::{Deserialize, Serialize};

use super::diffusion::EstimatorBundle;
use super::{require, Ctx, LossLog};
use crate::run::{hash_file, RunManifest};
use crate::{usage, CliError, CliResult};

pub fn train_controlnet(
    ctx: &Ctx,
    base: Option<&Path>,
    pairs: Option<&Path>,
    steps: Option<u64>,
    m: &mut RunManifest,
) -> CliResult<()> {
    let pairs = pairs.map(Path::to_path_buf).unwrap_or_else(|| ctx.pairs_manifest());
    require(&pairs, "pairs manifest")?;
    let base = base.map(Path::to_path_buf).unwrap_or_else(|| ctx.diffusion_ckpt());
    require(&base, "base estimator checkpoint")?;
    let base = base.canonicalize()?;
    let b = EstimatorBundle::load(&base)?;
    let base_hash = m.input(&base)?;
    m.input(&pairs)?;
    let codec = b.codec();

    let rows = read_pairs(&pairs)?;
    let mut data = Vec::with_capacity(rows.len());
    for r in &rows {
        let target = load_volume(&r.target)?;
        let cond = load_volume(&r.condition)?;
        let class = b.classes.iter().position(|c| *c == r.class_tag).unwrap_or(0);
        let latent = codec.encode(&target)?.0;
        let hint = encode_condition(&cond, target.shape(), &codec)?;
        data.push(TrainLatent { latent, class, hint: Some(hint) });
    }
    let cc = &ctx.cfg.controlnet;
    let dcfg = DiffusionConfig { lr: cc.lr, lr_power: cc.lr_power, steps: cc.steps, batch: cc.batch, seed: cc.seed, ..b.diffusion.clone() };
    let adapter = ControlAdapter::new(b.net.clone(), base_hash);
    let mut t = DiffusionTrainer::new(adapter, dcfg, data)?;
    let l_adapter = t.next_batch_loss(&t.model, true)?.item();
    let l_base = t.next_batch_loss(&b.net, false)?.item();
    println!("step 0: adapter loss {l_adapter:.8} base loss {l_base:.8} (difference {:.2e})", (l_adapter - l_base).abs());
    m.note("step0_adapter_loss", l_adapter);
    m.note("step0_base_loss", l_base);

    let ckpt = ctx.adapter_ckpt();
    std::fs::create_dir_all(ckpt.parent().expect("nested path"))?;
    let save = |t: &DiffusionTrainer<ControlAdapter>| -> CliResult<()> {
        let mut a = t.model.to_archive();
        a.metadata.insert("base_path".into(), base.display().to_string());
        a.save(&ckpt)?;
        Ok(())
    };
    let log = LossLog::open(ckpt.with_file_name("loss.csv"), "step,loss", 0)?;
    let until = steps.unwrap_or(cc.steps);
    let mut out = Vec::new();
    while t.step < until {
        let step = t.step;
        let l = t.train_step()?;
        out.push(format!("{step},{l}"));
        if t.step % ctx.cfg.runtime.log_interval == 0 {
            log::info!("step {step} loss {l:.5}");
            log.append(&out)?;
            out.clear();
        }
    }
    log.append(&out)?;
    save(&t)?;
    println!(
        "adapter trained for {until} steps ({} trainable parameters) -> {}",
        t.model.trainable_count(),
        ckpt.display()
    );
    m.output(&ckpt);
    m.output(log.path());
    Ok(())
}

pub struct CondSampleArgs<'a> {
    pub adapter: Option<&'a Path>,
    pub base: Option<&'a Path>,
    pub pairs: Option<&'a Path>,
    pub cond: Option<&'a Path>,
    pub limit: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<&'a Path>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CondRecord {
    pub file: String,
    pub condition: PathBuf,
    pub target: Option<PathBuf>,
    pub seed: u64,
    pub psnr_sample: Option<f64>,
    pub psnr_condition: Option<f64>,
}

pub fn cond_sample(ctx: &Ctx, args: CondSampleArgs, m: &mut RunManifest) -> CliResult<()> {
    let adapter_path = args.adapter.map(Path::to_path_buf).unwrap_or_else(|| ctx.adapter_ckpt());
    require(&adapter_path, "adapter checkpoint")?;
    let archive = TensorArchive::load(&adapter_path)?;
    let base = match args.base {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from(archive.meta("base_path")?),
    };
    let b = EstimatorBundle::load(&base)?;
    let base_hash = hash_file(&base)?;
    let adapter = ControlAdapter::from_archive(&archive, b.net.clone(), &base_hash).map_err(|e| CliError::Runtime(e.into()))?;
    m.input(&adapter_path)?;
    m.input(&base)?;
    m.note("base_hash_verified", true);

    let items: Vec<(PathBuf, Option<PathBuf>)> = match (args.cond, args.pairs) {
        (Some(c), _) => vec![(c.to_path_buf(), None)],
        (None, p) => {
            let p = p.map(Path::to_path_buf).unwrap_or_else(|| ctx.pairs_manifest());
            require(&p, "pairs manifest")?;
            m.input(&p)?;
            read_pairs(&p)?.into_iter().map(|r| (r.condition, Some(r.target))).collect()
        }
    };
    let items = &items[..args.limit.unwrap_or(items.len()).min(items.len())];
    if items.is_empty() {
        return Err(usage!("no condition volumes to sample from"));
    }
    let seed = args.seed.unwrap_or(ctx.cfg.runtime.seed);
    let out = args.out.map(Path::to_path_buf).unwrap_or_else(|| ctx.root.join("cond-samples").join(format!("seed{seed}")));
    std::fs::create_dir_all(&out)?;
    let codec = b.codec();
    let mut text = String::new();
    let (mut sum_s, mut sum_c, mut scored) = (0.0, 0.0, 0usize);
    for (i, (cpath, tpath)) in items.iter().enumerate() {
        require(cpath, "condition volume")?;
        let cond = load_volume(cpath)?;
        let class = b.classes.iter().position(|c| *c == cond.class_tag).unwrap_or(0);
        let mut rng = stream_rng(seed, i as u64);
        let vol = conditional_sample(&adapter, &cond, class, &b.schedule, &codec, &mut rng)?;
        let file = format!("cond_{i:03}.raw");
        let p = out.join(&file);
        save_volume(&vol, &p)?;
        m.output(&p);
        m.output(&sidecar_path(&p));
        let (ps, pc) = match tpath {
            Some(tp) => {
                let target = load_volume(tp)?;
                let ps = psnr(&vol, &target, ctx.cfg.metrics.data_range)?;
                let pc = psnr(&cond, &target, ctx.cfg.metrics.data_range)?;
                sum_s += ps;
                sum_c += pc;
                scored += 1;
                (Some(ps), Some(pc))
            }
            None => (None, None),
        };
        let rec = CondRecord { file, condition: cpath.clone(), target: tpath.clone(), seed, psnr_sample: ps, psnr_condition: pc };
        text.push_str(&serde_json::to_string(&rec)?);
        text.push('\n');
    }
    let mpath = out.join("manifest.jsonl");
    std::fs::write(&mpath, text)?;
    m.output(&mpath);
    if scored > 0 {
        let (s, c) = (sum_s / scored as f64, sum_c / scored as f64);
        println!("mean PSNR to target over {scored} items: conditional sample {s:.2} dB, zero-filled condition {c:.2} dB");
        m.note("mean_psnr_sample", s);
        m.note("mean_psnr_condition", c);
    }
    println!("wrote {} conditional samples to {}", items.len(), out.display());
    Ok(())
}
