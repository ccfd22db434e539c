//! Run configuration: a TOML file with a top-level seed and one table per
//! component. Unknown keys are rejected and errors name the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::PretrainConfig;
use crate::error::{Error, Result};
use crate::trainer::{LossConfig, PatchConfig, SynthParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Governs every random choice of every subcommand.
    pub seed: u64,
    /// Where subcommands write their files.
    pub out: PathBuf,
    /// Where `pretrain` and `train` read a generated dataset; `out` if unset.
    pub data: Option<PathBuf>,
    pub dataset: SynthParams,
    pub contrastive: PretrainConfig,
    pub loss: LossConfig,
    pub patch: PatchConfig,
    pub check: CheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            data: None,
            dataset: SynthParams::default(),
            contrastive: PretrainConfig::default(),
            loss: LossConfig::default(),
            patch: PatchConfig::default(),
            check: CheckConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    /// Only run checks whose name contains this string.
    pub filter: Option<String>,
    /// Deliberately corrupt one analytic quantity to prove the harness
    /// notices. Never set this outside of tests.
    pub inject_fault: Option<crate::check::Fault>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<root>", e.message().to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::config(if key == "." { "<root>".to_string() } else { key }, e.inner().message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn data_dir(&self) -> &Path {
        self.data.as_deref().unwrap_or(&self.out)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.contrastive.validate()?;
        self.dataset.validate()?;
        if let Some(d) = self.patch.dims {
            if d.contains(&0) {
                return Err(Error::config("patch.dims", "must be positive"));
            }
        }
        if let Some(s) = self.patch.stride {
            if s.contains(&0) {
                return Err(Error::config("patch.stride", "must be positive"));
            }
        }
        Ok(())
    }
}
