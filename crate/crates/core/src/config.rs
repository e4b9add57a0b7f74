//! The TOML run configuration. Every section is optional and defaults to the
//! built-in protocol; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::TrainConfig;
use crate::denoiser::{DenoiserConfig, PretrainConfig};
use crate::diffusion::ScheduleKind;
use crate::error::{invalid, Error, Result};
use crate::rng::derive_seed;
use crate::scene::{Domain, SplitConfig};
use crate::segmentation::SegConfig;
use crate::transfer::{InversionPrompt, TransferConfig, Variant};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the directory relative output paths are
/// resolved against.
pub const OUTPUT_ROOT_ENV: &str = "ZSDA_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub world: WorldSection,
    #[serde(default)]
    pub denoiser: DenoiserSection,
    #[serde(default)]
    pub transfer: TransferSection,
    #[serde(default)]
    pub trainer: TrainerSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub base_seed: u64,
    pub pretrain: u64,
    pub adapt: u64,
    pub eval_per_domain: u64,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            base_seed: 0,
            pretrain: 512,
            adapt: 256,
            eval_per_domain: 128,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    pub schedule: ScheduleKind,
    pub model: DenoiserConfig,
    pub training: PretrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    /// Used when no variant is given on the command line.
    pub variant: Option<Variant>,
    pub steps: Option<usize>,
    pub inversion_prompt: InversionPrompt,
    /// Per-domain strength overrides.
    pub strength: BTreeMap<Domain, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    /// One independent segmenter per entry.
    pub seeds: Vec<u64>,
    pub model: SegConfig,
    pub training: TrainConfig,
}

impl Default for TrainerSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            model: SegConfig::default(),
            training: TrainConfig::default(),
        }
    }
}

/// Stage tags mixed into the master seed.
pub mod stage {
    pub const DENOISER_INIT: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const TRANSFER: u64 = 3;
    pub const SEGMENTER: u64 = 4;
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            master_seed: 0,
            output_dir: default_output_dir(),
            world: WorldSection::default(),
            denoiser: DenoiserSection::default(),
            transfer: TransferSection::default(),
            trainer: TrainerSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing {
                what: "config file",
                path: path.to_path_buf(),
            });
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.split_config().validate()?;
        self.denoiser.model.validate()?;
        self.trainer.model.validate()?;
        if self.trainer.seeds.is_empty() {
            return Err(invalid!("trainer.seeds must not be empty"));
        }
        for (d, &s) in &self.transfer.strength {
            if *d == Domain::SOURCE {
                return Err(invalid!("strength given for the source domain"));
            }
            if !(0.0..=1.0).contains(&s) {
                return Err(invalid!("strength for {d} must be in [0, 1], got {s}"));
            }
        }
        Ok(())
    }

    pub fn split_config(&self) -> SplitConfig {
        let w = &self.world;
        SplitConfig::contiguous(w.base_seed, w.pretrain, w.adapt, w.eval_per_domain)
    }

    /// The run directory, resolved against `root` when relative.
    pub fn output_path(&self, root: Option<&Path>) -> PathBuf {
        crate::io::resolve(root, &self.output_dir)
    }

    pub fn stage_seed(&self, tag: u64) -> u64 {
        derive_seed(self.master_seed, tag)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.stage_seed(stage::PRETRAIN),
            ..self.denoiser.training.clone()
        }
    }

    pub fn transfer_config(
        &self,
        domain: Domain,
        strength: Option<f64>,
        variant: Option<Variant>,
    ) -> Result<TransferConfig> {
        let strength = strength
            .or_else(|| self.transfer.strength.get(&domain).copied())
            .unwrap_or_else(|| domain.default_strength());
        let variant = variant.or(self.transfer.variant).unwrap_or(Variant::Zodi);
        let mut cfg = TransferConfig::new(domain, strength, variant)?;
        cfg.steps = self.transfer.steps;
        cfg.inversion_prompt = self.transfer.inversion_prompt;
        Ok(cfg)
    }

    /// Training settings for the run with trainer seed `seed`.
    pub fn train_config(&self, seed: u64, lambda: f64) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.stage_seed(stage::SEGMENTER), seed),
            lambda,
            ..self.trainer.training.clone()
        }
    }

    pub fn segmenter_init_seed(&self, seed: u64) -> u64 {
        derive_seed(self.stage_seed(stage::SEGMENTER) ^ 0x5eed, seed)
    }
}
