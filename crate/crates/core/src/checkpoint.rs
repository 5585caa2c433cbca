//! JSON checkpoints: model configuration plus named, row-major tensors.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, DatasetMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;

const FORMAT: &str = "vastsum-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub mode: DatasetMode,
    pub epoch: Option<usize>,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCheckpoint {
    format: String,
    version: u32,
    mode: DatasetMode,
    epoch: Option<usize>,
    model: ModelConfig,
    params: Vec<RawTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTensor {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let raw = RawCheckpoint {
            format: FORMAT.to_owned(),
            version: VERSION,
            mode: self.mode,
            epoch: self.epoch,
            model: self.model.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| RawTensor {
                    name: name.to_owned(),
                    shape: [t.nrows(), t.ncols()],
                    values: t.iter().copied().collect(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string(&raw)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses and checks tensors against the layout the stored config implies.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawCheckpoint = serde_json::from_str(text)?;
        if raw.format != FORMAT || raw.version != VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint format {} v{}",
                raw.format, raw.version
            )));
        }
        raw.model.validate()?;
        let mut params = ParamStore::new();
        for t in raw.params {
            let tensor = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.values)
                .map_err(|_| Error::config(format!("tensor `{}` does not match its shape", t.name)))?;
            params.insert(t.name, tensor);
        }
        params.check_layout(&raw.model.layout())?;
        Ok(Self {
            model: raw.model,
            mode: raw.mode,
            epoch: raw.epoch,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
