use meddiff::synth::{build_pairs, gen_phantom, item_seed, Family, PhantomSpec};
use meddiff::volume::{save_volume, sidecar_path};

use super::{Ctx, DataItem, DataManifest, DATA_MANIFEST};
use crate::run::{hash_file, RunManifest};
use crate::{usage, CliError, CliResult};

pub fn gen_data(
    ctx: &Ctx,
    count: Option<usize>,
    seed: Option<u64>,
    families: Option<&str>,
    m: &mut RunManifest,
) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let names: Vec<String> = match families {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => cfg.data.families.clone(),
    };
    let fams = names.iter().map(|n| n.parse::<Family>().map_err(|e| usage!("{e}"))).collect::<CliResult<Vec<_>>>()?;
    if fams.is_empty() {
        return Err(usage!("no phantom families given"));
    }
    let count = count.unwrap_or(cfg.data.count);
    let seed = seed.unwrap_or(cfg.runtime.seed);
    let dir = ctx.data_dir();
    std::fs::create_dir_all(&dir)?;

    let mut items = Vec::with_capacity(count);
    let mut failed = Vec::new();
    for n in 0..count {
        let family = fams[n % fams.len()];
        let s = item_seed(seed, n);
        let spec = PhantomSpec::new(family, cfg.data.extent, s);
        let (vol, labels) = match gen_phantom(&spec) {
            Ok(v) => v,
            Err(e) => {
                log::error!("item {n} ({family}, seed {s}) failed: {e}");
                failed.push(format!("{n}: {e}"));
                continue;
            }
        };
        let file = format!("vol_{n:04}.raw");
        let label_file = format!("lab_{n:04}.raw");
        save_volume(&vol, &dir.join(&file))?;
        save_volume(&labels, &dir.join(&label_file))?;
        for f in [&file, &label_file] {
            m.output(&dir.join(f));
            m.output(&sidecar_path(&dir.join(f)));
        }
        items.push(DataItem { sha256: hash_file(&dir.join(&file))?, file, label_file, family: family.name().into(), seed: s });
    }
    if items.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!("all {count} phantoms failed")));
    }

    let targets: Vec<_> = items.iter().map(|it| dir.join(&it.file)).collect();
    let kind = cfg.mask_kind()?;
    let pairs_path = ctx.pairs_manifest();
    let pairs = build_pairs(&targets, &dir.join("pairs"), &pairs_path, kind, cfg.data.acceleration, seed)?;
    for p in &pairs {
        m.output(&p.condition);
        m.output(&sidecar_path(&p.condition));
    }
    m.output(&pairs_path);

    let manifest = DataManifest { families: names, extent: cfg.data.extent, items, failed };
    let mpath = dir.join(DATA_MANIFEST);
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)?;
    m.output(&mpath);
    m.note("generated", manifest.items.len());
    m.note("failed", manifest.failed.len());
    println!(
        "generated {} phantoms ({} failed) and {} {} pairs in {}",
        manifest.items.len(),
        manifest.failed.len(),
        pairs.len(),
        kind.name(),
        dir.display()
    );
    Ok(())
}
