use std::path::Path;

use meddiff::metrics::{codebook_stats, psnr, seam_discontinuity};
use meddiff::pvae::{patch_psnr, PvaeModel, PvaeTrainer, StepLosses};
use meddiff::volume::{load_volume, save_volume};

use super::{require, Ctx, DataManifest, LossLog};
use crate::run::RunManifest;
use crate::{usage, CliError, CliResult};

const STAGE2_START: &str = "stage2_start";
const INIT_FROZEN_HASH: &str = "init_frozen_hash";

fn save(t: &PvaeTrainer, path: &Path, extra: &[(&str, String)]) -> CliResult<()> {
    let mut a = t.to_archive()?;
    for (k, v) in extra {
        a.metadata.insert(k.to_string(), v.clone());
    }
    a.save(path)?;
    Ok(())
}

pub fn train_pvae(
    ctx: &Ctx,
    stage: u8,
    init: Option<&Path>,
    resume: Option<&Path>,
    steps: Option<u64>,
    m: &mut RunManifest,
) -> CliResult<()> {
    if stage == 2 && init.is_none() && resume.is_none() {
        return Err(usage!("stage 2 requires --init pointing at a stage-1 checkpoint"));
    }
    for p in [init, resume].into_iter().flatten() {
        require(p, "checkpoint")?;
        m.input(p)?;
    }
    let dir = ctx.data_dir();
    let data = DataManifest::load(&dir)?;
    m.input(&dir.join(super::DATA_MANIFEST))?;
    let vols = data.volumes(&dir)?;
    let every = ctx.cfg.runtime.checkpoint_every;
    let log_every = ctx.cfg.runtime.log_interval;
    std::fs::create_dir_all(ctx.pvae_dir())?;

    let run_steps = |t: &mut PvaeTrainer, until: u64, log: &LossLog, ckpt: &Path, extra: &[(&str, String)]| -> CliResult<()> {
        let mut rows = Vec::new();
        while t.step < until {
            let l: StepLosses = if stage == 1 { t.stage1_step()? } else { t.stage2_step()? };
            rows.push(l.csv_row());
            if t.step.is_multiple_of(log_every) || t.step == until {
                log::info!("stage {stage} step {} loss {:.4} (vq {:.4} adv {:.4} tp {:.4})", l.step, l.total, l.vq, l.adv, l.tp);
                log.append(&rows)?;
                rows.clear();
            }
            if t.step.is_multiple_of(every) {
                save(t, ckpt, extra)?;
            }
        }
        log.append(&rows)?;
        Ok(())
    };

    if stage == 1 {
        let mut t = match resume {
            Some(p) => {
                let t = PvaeTrainer::resume(p, vols.clone())?;
                if t.model.stage > 1 {
                    return Err(usage!("{} is a stage-2 checkpoint", p.display()));
                }
                t
            }
            None => {
                let mut cfg = ctx.cfg.pvae.clone();
                cfg.seed = cfg.seed.wrapping_add(ctx.cfg.runtime.seed);
                PvaeTrainer::new(PvaeModel::new(cfg)?, vols.clone())?
            }
        };
        let until = steps.unwrap_or(ctx.cfg.pvae.stage1_steps);
        let ckpt = ctx.pvae_dir().join("stage1.ckpt");
        let log = LossLog::open(ctx.pvae_dir().join("loss_stage1.csv"), StepLosses::CSV_HEADER, t.step)?;
        run_steps(&mut t, until, &log, &ckpt, &[])?;
        save(&t, &ckpt, &[])?;
        let (used, ppl) = codebook_stats(&t.model.codebook.usage);
        let p = patch_psnr(&t.model, &vols)?;
        println!("stage 1 done at step {}: patch PSNR {p:.2} dB, {used} codes used (perplexity {ppl:.1})", t.step);
        m.note("patch_psnr", p);
        m.output(&ckpt);
        m.output(log.path());
        return Ok(());
    }

    let (mut t, start, init_hash) = match resume {
        Some(p) => {
            let a = meddiff_tensor::TensorArchive::load(p)?;
            let start: u64 = a.meta(STAGE2_START)?.parse().map_err(|_| usage!("{} lacks a stage-2 start", p.display()))?;
            let init_hash = a.meta(INIT_FROZEN_HASH)?.to_string();
            let mut t = PvaeTrainer::resume(p, vols.clone())?;
            if t.model.stage != 2 {
                return Err(usage!("{} is not a stage-2 checkpoint", p.display()));
            }
            t.begin_stage2()?;
            (t, start, init_hash)
        }
        None => {
            let p = init.expect("checked above");
            let mut t = PvaeTrainer::resume(p, vols.clone())?;
            if t.model.stage != 1 {
                return Err(usage!("--init must be a stage-1 checkpoint; {} has stage {}", p.display(), t.model.stage));
            }
            let h = t.model.frozen_hash();
            let start = t.step;
            t.begin_stage2()?;
            (t, start, h)
        }
    };
    let until = start + steps.unwrap_or(ctx.cfg.pvae.stage2_steps);
    let ckpt = ctx.pvae_dir().join("stage2.ckpt");
    let extra = [(STAGE2_START, start.to_string()), (INIT_FROZEN_HASH, init_hash.clone())];
    let log = LossLog::open(ctx.pvae_dir().join("loss_stage2.csv"), StepLosses::CSV_HEADER, t.step)?;
    run_steps(&mut t, until, &log, &ckpt, &extra)?;
    save(&t, &ckpt, &extra)?;

    let unchanged = t.model.frozen_hash() == init_hash;
    println!("encoder_hash_unchanged: {unchanged}");
    m.note("encoder_hash_unchanged", unchanged);
    m.output(&ckpt);
    m.output(log.path());
    if !unchanged {
        return Err(CliError::Runtime(anyhow::anyhow!("encoder/codebook parameters changed during stage 2")));
    }
    let lv = t.model.encode_volume_patchwise(&vols[0])?;
    let joint = t.model.decode_volume_joint(&lv)?;
    let naive = t.model.decode_patches_naive(&lv)?;
    println!(
        "volume 0: joint PSNR {:.2} dB seam {:.4} | patch concatenation PSNR {:.2} dB seam {:.4}",
        psnr(&joint, &vols[0], 2.0)?,
        seam_discontinuity(&joint, &lv.layout)?,
        psnr(&naive, &vols[0], 2.0)?,
        seam_discontinuity(&naive, &lv.layout)?
    );
    Ok(())
}

pub fn reconstruct(ctx: &Ctx, pvae: Option<&Path>, input: &Path, out: &Path, m: &mut RunManifest) -> CliResult<()> {
    let ckpt = pvae.map(Path::to_path_buf).unwrap_or_else(|| ctx.default_pvae());
    require(&ckpt, "autoencoder checkpoint")?;
    require(input, "input volume")?;
    m.input(&ckpt)?;
    m.input(input)?;
    let model = PvaeModel::load(&ckpt)?;
    let vol = load_volume(input)?;
    let rec = model.reconstruct(&vol)?;
    if let Some(d) = out.parent() {
        std::fs::create_dir_all(d)?;
    }
    save_volume(&rec, out)?;
    m.output(out);
    m.output(&meddiff::volume::sidecar_path(out));
    let p = psnr(&rec, &vol, 2.0)?;
    m.note("psnr", p);
    println!("reconstruction PSNR {p:.2} dB -> {}", out.display());
    Ok(())
}
