//! Versioned JSON container for trained models.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::ingest::write_file;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedModel<M> {
    pub format_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub train_config: Option<TrainConfig>,
    pub initial_loss: Option<f64>,
    pub loss_trace: Vec<f64>,
    pub model: M,
}

impl<M: Serialize + DeserializeOwned> SavedModel<M> {
    pub fn new(kind: &str, config_hash: &str, model: M) -> Self {
        SavedModel {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            train_config: None,
            initial_loss: None,
            loss_trace: Vec::new(),
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::json(format!("{} model", self.kind), e))
    }

    pub fn from_json(text: &str, kind: &str) -> Result<Self> {
        let saved: SavedModel<M> = serde_json::from_str(text).map_err(|e| Error::json(format!("{kind} model"), e))?;
        if saved.format_version != FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "model format version {} is not supported (expected {FORMAT_VERSION})",
                saved.format_version
            )));
        }
        if saved.kind != kind {
            return Err(Error::InvalidInput(format!(
                "expected a {kind} model, found {}",
                saved.kind
            )));
        }
        Ok(saved)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_json()?)
    }

    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, kind)
    }
}
