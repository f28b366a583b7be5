//! Run directory plumbing: exclusive lock, per-run manifests, file hashes.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::{CliError, CliResult};

pub const LOCK_FILE: &str = ".lock";
pub const MANIFEST_DIR: &str = "manifests";

/// Exclusive claim on a run directory, released on drop. A lock left by a
/// process that no longer exists is taken over.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

fn pid_alive(pid: u32) -> bool {
    let proc_root = Path::new("/proc");
    !proc_root.exists() || proc_root.join(pid.to_string()).exists()
}

impl RunLock {
    pub fn acquire(root: &Path) -> CliResult<RunLock> {
        let path = root.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id())?;
                    return Ok(RunLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = std::fs::read_to_string(&path).unwrap_or_default();
                    match holder.trim().parse::<u32>() {
                        Ok(pid) if !pid_alive(pid) => {
                            log::warn!("removing stale lock of process {pid}");
                            std::fs::remove_file(&path)?;
                        }
                        _ => {
                            return Err(CliError::Runtime(anyhow::anyhow!(
                                "run directory {} is in use (lock held by process {}); use a distinct run directory",
                                root.display(),
                                holder.trim()
                            )))
                        }
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(CliError::Runtime(anyhow::anyhow!("could not lock {}", root.display())))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// SHA-256 of a file's bytes.
pub fn hash_file(path: &Path) -> CliResult<String> {
    Ok(meddiff_tensor::file_hash(path).with_context(|| format!("hashing {}", path.display()))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    /// Input checkpoint / manifest path → content hash.
    pub inputs: BTreeMap<String, String>,
    pub started: f64,
    pub finished: Option<f64>,
    pub outputs: Vec<String>,
    /// Command-specific facts such as hash checks.
    pub notes: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn start(command: &str, cfg: &ExperimentConfig) -> RunManifest {
        let started = unix_now();
        let config_hash = cfg.hash();
        RunManifest {
            run_id: format!("{command}-{}-{}", (started * 1e3) as u64, std::process::id()),
            command: command.into(),
            config_hash,
            inputs: BTreeMap::new(),
            started,
            finished: None,
            outputs: Vec::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<String> {
        let h = hash_file(path)?;
        self.inputs.insert(path.display().to_string(), h.clone());
        Ok(h)
    }

    pub fn output(&mut self, path: &Path) {
        let p = path.display().to_string();
        if !self.outputs.contains(&p) {
            self.outputs.push(p);
        }
    }

    pub fn note(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.notes.insert(key.into(), value.into());
    }

    /// Writes `manifests/<run_id>.json` and drops the same outputs from
    /// older manifests so each artifact has a single owner.
    pub fn finish(&mut self, root: &Path) -> CliResult<PathBuf> {
        self.finished = Some(unix_now());
        let dir = root.join(MANIFEST_DIR);
        std::fs::create_dir_all(&dir)?;
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let Ok(mut old) = serde_json::from_str::<RunManifest>(&std::fs::read_to_string(&path)?) else {
                continue;
            };
            let before = old.outputs.len();
            old.outputs.retain(|o| !self.outputs.contains(o));
            if old.outputs.len() != before {
                std::fs::write(&path, serde_json::to_string_pretty(&old)?)?;
            }
        }
        let path = dir.join(format!("{}.json", self.run_id));
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

/// All manifests in a run directory.
pub fn read_manifests(root: &Path) -> CliResult<Vec<RunManifest>> {
    let dir = root.join(MANIFEST_DIR);
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(&dir)? {
        let path = entry?.path();
        out.push(serde_json::from_str(&std::fs::read_to_string(&path)?).with_context(|| format!("{}", path.display()))?);
    }
    out.sort_by(|a: &RunManifest, b| a.started.total_cmp(&b.started));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(a);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn stale_lock_taken_over() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(LOCK_FILE), "4294967").unwrap();
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn outputs_have_one_owner() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let mut a = RunManifest::start("a", &cfg);
        a.run_id = "a".into();
        a.output(Path::new("x"));
        a.output(Path::new("y"));
        a.finish(dir.path()).unwrap();
        let mut b = RunManifest::start("b", &cfg);
        b.run_id = "b".into();
        b.output(Path::new("y"));
        b.finish(dir.path()).unwrap();
        let all = read_manifests(dir.path()).unwrap();
        let mut owners: BTreeMap<String, usize> = BTreeMap::new();
        for m in &all {
            for o in &m.outputs {
                *owners.entry(o.clone()).or_default() += 1;
            }
        }
        assert_eq!(owners.len(), 2);
        assert!(owners.values().all(|&n| n == 1));
    }
}
