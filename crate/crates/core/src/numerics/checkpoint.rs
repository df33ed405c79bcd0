//! JSON checkpoint format for named parameter maps.
//!
//! ```json
//! {
//!   "schema_version": "1",
//!   "kind": "critic",
//!   "params": [{"name": "embed.w", "shape": [36, 32], "values": [0.1, ...]}],
//!   "config": { ... }
//! }
//! ```
//!
//! Values are written as shortest round-trip decimals, so load after save is
//! bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

pub const CHECKPOINT_SCHEMA_VERSION: &str = "1";

pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    schema_version: String,
    kind: String,
    params: Vec<Entry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

/// A decoded checkpoint: parameters plus an optional embedded config block.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub params: ParamMap,
    pub config: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String, NumericsError> {
        let file = CheckpointFile {
            schema_version: CHECKPOINT_SCHEMA_VERSION.to_string(),
            kind: self.kind.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
            config: self.config.clone(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| NumericsError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, NumericsError> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
        if file.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(NumericsError::SchemaVersion {
                expected: CHECKPOINT_SCHEMA_VERSION,
                found: file.schema_version,
            });
        }
        let mut params = ParamMap::new();
        for e in file.params {
            let t = Tensor::new(e.shape, e.values)?;
            if params.insert(e.name.clone(), t).is_some() {
                return Err(NumericsError::Checkpoint(format!("duplicate parameter {}", e.name)));
            }
        }
        Ok(Self { kind: file.kind, params, config: file.config })
    }

    pub fn save(&self, path: &Path) -> Result<(), NumericsError> {
        std::fs::write(path, self.to_json()? + "\n")
            .map_err(|e| NumericsError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NumericsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NumericsError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
