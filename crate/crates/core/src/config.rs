//! Run configuration file (TOML) shared by every CLI command.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::heads::{ClsInput, LossConfig};
use crate::model::{CountNorm, ModelConfig};
use crate::train::{Precision, TrainConfig};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensitySection {
    /// Number of density levels K.
    pub levels: usize,
}

impl Default for DensitySection {
    fn default() -> Self {
        Self { levels: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub use_ldwa: bool,
    pub use_cls_head: bool,
    pub cls_input: ClsInput,
    pub count_norm: CountNorm,
}

impl Default for AblationSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            use_ldwa: m.use_ldwa,
            use_cls_head: m.use_cls_head,
            cls_input: m.cls_input,
            count_norm: m.count_norm,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub density: DensitySection,
    pub loss: LossConfig,
    pub ablation: AblationSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model().validate()?;
        self.train.validate()?;
        self.loss.validate()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            levels: self.density.levels,
            use_ldwa: self.ablation.use_ldwa,
            use_cls_head: self.ablation.use_cls_head,
            cls_input: self.ablation.cls_input,
            count_norm: self.ablation.count_norm,
        }
    }

    /// Inverse of [`RunConfig::model`], used when a checkpoint's model
    /// settings replace the file's.
    pub fn set_model(&mut self, m: &ModelConfig) {
        self.backbone = m.backbone.clone();
        self.density.levels = m.levels;
        self.ablation = AblationSection {
            use_ldwa: m.use_ldwa,
            use_cls_head: m.use_cls_head,
            cls_input: m.cls_input,
            count_norm: m.count_norm,
        };
    }

    /// Applies command-line overrides; the seed drives both data synthesis
    /// and training.
    pub fn apply_overrides(&mut self, seed: Option<u64>, precision: Option<Precision>) {
        if let Some(s) = seed {
            self.synth.seed = s;
            self.train.seed = s;
        }
        if let Some(p) = precision {
            self.train.precision = p;
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    /// Writes `resolved_config.toml` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }
}
