use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ifer::TaskEmbeddingBank;
use crate::model::AdapterModel;

pub const CHECKPOINT_FORMAT: &str = "moecl-checkpoint-v1";

/// Model and task bank in one JSON document. Floats round-trip exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: AdapterModel,
    pub bank: TaskEmbeddingBank,
}

impl Checkpoint {
    pub fn new(model: AdapterModel, bank: TaskEmbeddingBank) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            model,
            bank,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!("unknown checkpoint format `{}`", c.format)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
