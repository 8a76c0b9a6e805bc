//! JSON checkpoint files: `{"version":1, "config":{…}, "tensors":{name:{"shape","data"}}}`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Module, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn new(config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            version: CHECKPOINT_VERSION,
            config: serde_json::to_value(config)?,
            tensors: BTreeMap::new(),
        })
    }

    /// Store every parameter of `module` under `prefix.name`.
    pub fn insert_module<T: Scalar, M: Module<T>>(&mut self, prefix: &str, module: &M) {
        for (name, t) in module.params() {
            self.tensors.insert(
                format!("{prefix}.{name}"),
                TensorRecord {
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|v| v.f64()).collect(),
                },
            );
        }
    }

    /// Overwrite the parameters of `module` from tensors stored under `prefix`.
    pub fn load_module<T: Scalar, M: Module<T>>(&self, prefix: &str, module: &mut M) -> Result<()> {
        for (name, t) in module.params_mut() {
            let key = format!("{prefix}.{name}");
            let rec = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if rec.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {:?}, model expects {:?}",
                    rec.shape,
                    t.shape()
                )));
            }
            let loaded = Tensor::from_vec(&rec.shape, rec.data.iter().map(|&v| T::of(v)).collect())
                .map_err(|e| Error::Checkpoint(format!("tensor {key}: {e}")))?;
            *t = loaded;
        }
        Ok(())
    }

    pub fn config<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Checkpoint(format!("bad config block: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "unsupported version {v}, expected {CHECKPOINT_VERSION}"
                )))
            }
            None => return Err(Error::Checkpoint("missing version field".into())),
        }
        serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&String::from_utf8_lossy(&text))
    }
}
