//! Versioned model files.
//!
//! A model file is pretty-printed JSON holding the desired system (library
//! description, gate constants, coefficients, gate locations and `Q(0)`)
//! together with the epoch, loss and hash of the configuration that produced it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::DesiredSystem;
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "idapbc-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub epoch: usize,
    pub loss: f64,
    pub config_hash: String,
    pub controller: DesiredSystem,
}

impl ModelFile {
    pub fn new(controller: DesiredSystem, epoch: usize, loss: f64, config_hash: impl Into<String>) -> Self {
        Self {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            epoch,
            loss,
            config_hash: config_hash.into(),
            controller,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Model(e.to_string()))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Model(e.to_string()))?;
        if file.format != MODEL_FORMAT {
            return Err(Error::Model(format!("unexpected format tag {:?}", file.format)));
        }
        if file.version != MODEL_VERSION {
            return Err(Error::Model(format!(
                "unsupported model version {} (this build reads {MODEL_VERSION})",
                file.version
            )));
        }
        file.controller
            .validate()
            .map_err(|e| Error::Model(format!("invalid controller: {e}")))?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Model(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Model(m) => Error::Model(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
