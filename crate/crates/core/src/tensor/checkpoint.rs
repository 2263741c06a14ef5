//! JSON parameter checkpoints.
//!
//! Layout: `{"format", "version", "params": {name: {shape, data}}, "state": {...}, "meta": ...}`.
//! `f64` values are written in shortest round-trip form and parsed exactly, so
//! a save/load cycle is value-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "siamtrack-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl StoredTensor {
    pub fn from_tensor(t: &Tensor) -> Self {
        StoredTensor {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub params: BTreeMap<String, StoredTensor>,
    /// Auxiliary tensors such as optimizer velocities.
    #[serde(default)]
    pub state: BTreeMap<String, StoredTensor>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            params: store
                .ids()
                .map(|id| (store.name(id).to_string(), StoredTensor::from_tensor(store.get(id))))
                .collect(),
            state: BTreeMap::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        let map = self
            .params
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.to_tensor()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        store.load_map(&map)
    }

    pub fn to_json(&self) -> Result<String> {
        for (name, t) in self.params.iter().chain(&self.state) {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
            }
        }
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        for (name, t) in ck.params.iter().chain(&ck.state) {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Checkpoint(format!("tensor {name}: shape/data length mismatch")));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = self.to_json()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
