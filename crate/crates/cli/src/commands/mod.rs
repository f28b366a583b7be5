//! Subcommand implementations and the helpers they share.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use meddiff::volume::{load_volume, Volume};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::run::RunManifest;
use crate::{usage, CliResult, Command};

pub mod control;
pub mod data;
pub mod diffusion;
pub mod eval;
pub mod pvae;

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
}

impl Ctx {
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn pvae_dir(&self) -> PathBuf {
        self.root.join("pvae")
    }

    pub fn diffusion_ckpt(&self) -> PathBuf {
        self.root.join("diffusion").join("model.ckpt")
    }

    pub fn adapter_ckpt(&self) -> PathBuf {
        self.root.join("controlnet").join("adapter.ckpt")
    }

    pub fn pairs_manifest(&self) -> PathBuf {
        self.data_dir().join("pairs.jsonl")
    }

    /// Default autoencoder: the joint-stage checkpoint if present, else stage 1.
    pub fn default_pvae(&self) -> PathBuf {
        let s2 = self.pvae_dir().join("stage2.ckpt");
        if s2.exists() {
            s2
        } else {
            self.pvae_dir().join("stage1.ckpt")
        }
    }
}

pub fn dispatch(ctx: &Ctx, cmd: &Command, m: &mut RunManifest) -> CliResult<()> {
    match cmd {
        Command::GenData { count, seed, families } => data::gen_data(ctx, *count, *seed, families.as_deref(), m),
        Command::TrainPvae { stage, init, resume, steps } => {
            pvae::train_pvae(ctx, *stage, init.as_deref(), resume.as_deref(), *steps, m)
        }
        Command::TrainDiffusion { pvae, resume, steps } => {
            diffusion::train_diffusion(ctx, pvae.as_deref(), resume.as_deref(), *steps, m)
        }
        Command::Sample { model, count, class, seed, out } => {
            diffusion::sample_cmd(ctx, model.as_deref(), *count, class.as_deref(), *seed, out.as_deref(), m)
        }
        Command::TrainControlnet { base, pairs, steps } => {
            control::train_controlnet(ctx, base.as_deref(), pairs.as_deref(), *steps, m)
        }
        Command::CondSample { adapter, base, pairs, cond, limit, seed, out } => control::cond_sample(
            ctx,
            control::CondSampleArgs {
                adapter: adapter.as_deref(),
                base: base.as_deref(),
                pairs: pairs.as_deref(),
                cond: cond.as_deref(),
                limit: *limit,
                seed: *seed,
                out: out.as_deref(),
            },
            m,
        ),
        Command::Evaluate { real, gen, metrics, out } => eval::evaluate(ctx, real, gen, metrics, out.as_deref(), m),
        Command::Reconstruct { pvae, input, out } => pvae::reconstruct(ctx, pvae.as_deref(), input, out, m),
    }
}

/// Fails with a usage error when a required input file is absent.
pub fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage!("{what} not found at {}", path.display()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataItem {
    /// File name inside the data directory.
    pub file: String,
    pub label_file: String,
    pub family: String,
    pub seed: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub families: Vec<String>,
    pub extent: [usize; 3],
    pub items: Vec<DataItem>,
    pub failed: Vec<String>,
}

pub const DATA_MANIFEST: &str = "manifest.json";

impl DataManifest {
    pub fn load(dir: &Path) -> CliResult<DataManifest> {
        let path = dir.join(DATA_MANIFEST);
        require(&path, "dataset manifest (run gen-data first)")?;
        Ok(serde_json::from_str(&std::fs::read_to_string(&path)?).with_context(|| format!("{}", path.display()))?)
    }

    pub fn volumes(&self, dir: &Path) -> CliResult<Vec<Volume>> {
        self.items
            .iter()
            .map(|it| Ok(load_volume(&dir.join(&it.file)).with_context(|| it.file.clone())?))
            .collect()
    }
}

/// Class index of a family or tag under the configured family order.
pub fn class_index(classes: &[String], name: &str) -> CliResult<usize> {
    if let Some(i) = classes.iter().position(|c| c == name) {
        return Ok(i);
    }
    if let Ok(i) = name.parse::<usize>() {
        if i < classes.len() {
            return Ok(i);
        }
    }
    Err(usage!("unknown class `{name}`; known classes: {}", describe_classes(classes)))
}

pub fn describe_classes(classes: &[String]) -> String {
    classes.iter().enumerate().map(|(i, c)| format!("{i}={c}")).collect::<Vec<_>>().join(", ")
}

/// Volume files in `dir`: the listed items of a generated dataset, else every
/// `.raw` file with a sidecar, sorted.
pub fn list_volumes(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(usage!("{} is not a directory", dir.display()));
    }
    if dir.join(DATA_MANIFEST).exists() {
        return Ok(DataManifest::load(dir)?.items.iter().map(|it| dir.join(&it.file)).collect());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "raw") && meddiff::volume::sidecar_path(p).exists())
        .collect();
    out.sort();
    Ok(out)
}

/// Appends CSV rows, writing the header only to a new file, and drops rows
/// at or beyond `from_step` left by an interrupted run.
pub struct LossLog {
    path: PathBuf,
}

impl LossLog {
    pub fn open(path: PathBuf, header: &str, from_step: u64) -> CliResult<LossLog> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let kept = if path.exists() && from_step > 0 {
            let text = std::fs::read_to_string(&path)?;
            let mut lines: Vec<&str> = text.lines().collect();
            lines.retain(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_none_or(|s| s < from_step));
            lines.join("\n") + "\n"
        } else {
            format!("{header}\n")
        };
        std::fs::write(&path, kept)?;
        Ok(LossLog { path })
    }

    pub fn append(&self, rows: &[String]) -> CliResult<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let mut f = std::fs::OpenOptions::new().append(true).open(&self.path)?;
        for r in rows {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
