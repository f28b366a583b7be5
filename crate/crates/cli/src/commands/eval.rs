use std::fmt::Write as _;
use std::path::Path;

use meddiff::metrics::{
    diversity_msssim, frechet_distance, mmd, FeatureEmbeddingSet, FeatureExtractor, RandomConvExtractor,
};
use meddiff::volume::{load_volume, Volume};

use super::{list_volumes, Ctx};
use crate::run::RunManifest;
use crate::{usage, CliResult};

pub const METRICS: [&str; 3] = ["mmd", "frechet", "ms-ssim"];
pub const REPORT_HEADER: &str = "metric,value,n_real,n_gen,skipped,extractor_hash,config_hash";

/// Loads every volume in `dir` whose extent equals `extent` (or the first
/// one seen); returns the kept volumes and the number skipped.
fn load_set(dir: &Path, extent: &mut Option<[usize; 3]>, m: &mut RunManifest) -> CliResult<(Vec<Volume>, usize)> {
    let mut kept = Vec::new();
    let mut skipped = 0;
    for p in list_volumes(dir)? {
        let v = match load_volume(&p) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("skipping unreadable {}: {e}", p.display());
                skipped += 1;
                continue;
            }
        };
        let want = *extent.get_or_insert(v.shape());
        if v.shape() != want {
            log::warn!("skipping {}: extent {:?} differs from {:?}", p.display(), v.shape(), want);
            skipped += 1;
            continue;
        }
        m.input(&p)?;
        kept.push(v);
    }
    Ok((kept, skipped))
}

pub fn evaluate(ctx: &Ctx, real: &Path, gen: &Path, metrics: &str, out: Option<&Path>, m: &mut RunManifest) -> CliResult<()> {
    let wanted: Vec<&str> = metrics.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if let Some(bad) = wanted.iter().find(|w| !METRICS.contains(w)) {
        return Err(usage!("unknown metric `{bad}`; available: {}", METRICS.join(", ")));
    }
    let mut extent = None;
    let (rv, rs) = load_set(real, &mut extent, m)?;
    let (gv, gs) = load_set(gen, &mut extent, m)?;
    let skipped = rs + gs;
    if rv.is_empty() || gv.is_empty() {
        return Err(usage!("need at least one readable volume of matching extent in each set"));
    }
    let mc = &ctx.cfg.metrics;
    let extractor = RandomConvExtractor::new(mc.extractor_seed);
    let fr = FeatureEmbeddingSet::from_volumes(&extractor, &rv);
    let fg = FeatureEmbeddingSet::from_volumes(&extractor, &gv);
    let mut report = format!("{REPORT_HEADER}\n");
    for w in &wanted {
        let v = match *w {
            "mmd" => mmd(&fr, &fg)?,
            "frechet" => frechet_distance(&fr, &fg, mc.frechet_eps)?,
            _ => diversity_msssim(&gv, mc.data_range, mc.max_pairs, ctx.cfg.runtime.seed)?,
        };
        println!("{w}: {v:.6}");
        writeln!(report, "{w},{v},{},{},{skipped},{},{}", rv.len(), gv.len(), extractor.identity_hash(), ctx.cfg.hash()).expect("string write");
    }
    println!("{} real, {} generated, {skipped} skipped; extractor {}", rv.len(), gv.len(), extractor.identity_hash());
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| ctx.root.join("eval").join("report.csv"));
    if let Some(d) = out.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(&out, report)?;
    m.output(&out);
    m.note("skipped", skipped);
    Ok(())
}
