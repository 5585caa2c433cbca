//! Single-file run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::error::Result;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Every tunable of a run; omitted sections and fields take their defaults,
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    /// Dataset file used when no path is given on the command line.
    pub dataset: Option<PathBuf>,
    /// Output directory used when none is given on the command line.
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.synthetic.validate()
    }
}
