//! Fitted models on disk, with the data pipeline needed to use them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoreg::AutoregModel;
use crate::data::{NormStats, Schema, SplitIndices};
use crate::error::{Error, Result};
use crate::inference::ConditionalModel;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(clippy::large_enum_variant)]
pub enum Model {
    Conditional(ConditionalModel),
    Autoreg(AutoregModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: Model,
    pub stats: NormStats,
    pub schema: Schema,
    pub split: SplitIndices,
    pub data: String,
    pub data_sha256: String,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::numeric(format!("cannot serialise checkpoint: {}", e)))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: not a checkpoint ({})", path.display(), e)))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "{}: checkpoint format {} is not supported (expected {})",
                path.display(),
                ck.format_version,
                FORMAT_VERSION
            )));
        }
        Ok(ck)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
