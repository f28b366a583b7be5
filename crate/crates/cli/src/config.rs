//! Experiment configuration: one TOML file with a section per stage.

use std::path::{Path, PathBuf};

use meddiff::biflownet::BiFlowConfig;
use meddiff::diffusion::DiffusionConfig;
use meddiff::pvae::PvaeConfig;
use meddiff::synth::{Family, MaskKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{usage, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub pvae: PvaeConfig,
    pub diffusion: DiffusionConfig,
    pub biflownet: BiFlowSection,
    pub controlnet: ControlNetConfig,
    pub metrics: MetricsConfig,
    pub runtime: RuntimeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Phantom families; a family's position is its class index.
    pub families: Vec<String>,
    pub count: usize,
    pub extent: [usize; 3],
    /// Undersampling used to build condition/target pairs.
    pub mask: String,
    pub acceleration: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            families: Family::NAMES.iter().map(|s| s.to_string()).collect(),
            count: 20,
            extent: [32; 3],
            mask: "gaussian-1d".into(),
            acceleration: 8.0,
        }
    }
}

/// Estimator knobs; channels, latent patch and step count come from the
/// autoencoder and diffusion sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiFlowSection {
    pub token: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub depth: usize,
    pub unet_widths: Vec<usize>,
    pub cond_dim: usize,
    /// Defaults to the number of data families.
    pub num_classes: Option<usize>,
    pub unet_only: bool,
    pub seed: u64,
}

impl Default for BiFlowSection {
    fn default() -> Self {
        let d = BiFlowConfig::default();
        BiFlowSection {
            token: d.token,
            embed_dim: d.embed_dim,
            heads: d.heads,
            mlp_ratio: d.mlp_ratio,
            depth: d.depth,
            unet_widths: d.unet_widths,
            cond_dim: d.cond_dim,
            num_classes: None,
            unet_only: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlNetConfig {
    pub steps: u64,
    pub lr: f64,
    pub lr_power: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ControlNetConfig {
    fn default() -> Self {
        ControlNetConfig { steps: 500, lr: 1e-4, lr_power: 0.9, batch: 1, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub extractor_seed: u64,
    pub data_range: f64,
    /// Cap on sample pairs for the diversity score.
    pub max_pairs: usize,
    /// Covariance regularizer for the Fréchet distance.
    pub frechet_eps: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { extractor_seed: 0x5eed, data_range: 2.0, max_pairs: 100, frechet_eps: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    pub seed: u64,
    pub device: String,
    /// Output root, overridden by `MEDDIFF_RUN_DIR`.
    pub checkpoint_dir: PathBuf,
    pub log_interval: u64,
    pub checkpoint_every: u64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            seed: 0,
            device: "cpu".into(),
            checkpoint_dir: "runs".into(),
            log_interval: 50,
            checkpoint_every: 200,
        }
    }
}

pub const RUN_DIR_ENV: &str = "MEDDIFF_RUN_DIR";

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> CliResult<ExperimentConfig> {
        let cfg = match path {
            None => ExperimentConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| usage!("cannot read config {}: {e}", p.display()))?;
                toml::from_str(&text).map_err(|e| usage!("config {}: {e}", p.display()))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.families()?;
        self.mask_kind()?;
        if self.data.families.is_empty() || self.data.count == 0 {
            return Err(usage!("data.families and data.count must be non-empty"));
        }
        if self.runtime.device != "cpu" {
            return Err(usage!("device `{}` is not available; only `cpu` is supported", self.runtime.device));
        }
        if self.runtime.log_interval == 0 || self.runtime.checkpoint_every == 0 {
            return Err(usage!("runtime.log_interval and runtime.checkpoint_every must be positive"));
        }
        self.pvae.validate().map_err(|e| usage!("[pvae] {e}"))?;
        self.diffusion.schedule().map_err(|e| usage!("[diffusion] {e}"))?;
        self.biflow_config()?.validate().map_err(|e| usage!("[biflownet] {e}"))?;
        Ok(())
    }

    pub fn families(&self) -> CliResult<Vec<Family>> {
        self.data.families.iter().map(|f| f.parse::<Family>().map_err(|e| usage!("{e}"))).collect()
    }

    pub fn mask_kind(&self) -> CliResult<MaskKind> {
        self.data.mask.parse().map_err(|e| usage!("{e}"))
    }

    pub fn num_classes(&self) -> usize {
        self.biflownet.num_classes.unwrap_or(self.data.families.len())
    }

    pub fn biflow_config(&self) -> CliResult<BiFlowConfig> {
        let b = &self.biflownet;
        let cfg = BiFlowConfig {
            channels: self.pvae.latent_channels,
            latent_patch: self.pvae.latent_patch(),
            token: b.token,
            embed_dim: b.embed_dim,
            heads: b.heads,
            mlp_ratio: b.mlp_ratio,
            depth: b.depth,
            unet_widths: b.unet_widths.clone(),
            cond_dim: b.cond_dim,
            num_classes: self.num_classes(),
            timesteps: self.diffusion.timesteps,
            cosine_offset: self.diffusion.cosine_offset,
            unet_only: b.unet_only,
            seed: b.seed,
        };
        Ok(cfg)
    }

    pub fn control_diffusion(&self) -> DiffusionConfig {
        DiffusionConfig {
            lr: self.controlnet.lr,
            lr_power: self.controlnet.lr_power,
            steps: self.controlnet.steps,
            batch: self.controlnet.batch,
            seed: self.controlnet.seed,
            ..self.diffusion.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the fully resolved configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// `MEDDIFF_RUN_DIR` if set, else `runtime.checkpoint_dir`.
    pub fn run_root(&self) -> PathBuf {
        match std::env::var_os(RUN_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.runtime.checkpoint_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!((cfg.pvae.codebook_size, cfg.pvae.latent_channels, cfg.diffusion.timesteps), (8192, 8, 1000));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("[runtime]\nsed = 1\n").is_err());
        assert!(toml::from_str::<ExperimentConfig>("[bogus]\n").is_err());
        assert!(toml::from_str::<ExperimentConfig>("[pvae]\nbatch = 2\n").is_ok());
    }

    #[test]
    fn bad_family_names_valid_ones() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.families = vec!["blob".into()];
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("blob") && msg.contains("tube-vessel"), "{msg}");
    }

    #[test]
    fn derived_estimator_shape() {
        let cfg = ExperimentConfig::default();
        let b = cfg.biflow_config().unwrap();
        assert_eq!(b.channels, cfg.pvae.latent_channels);
        assert_eq!(b.latent_patch, [8; 3]);
        assert_eq!(b.num_classes, 4);
    }
}
