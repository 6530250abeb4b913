use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::network::{init_params, ModelShape};
use super::Model;
use crate::error::{Error, Result};
use crate::numerics::ParamStore;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// On-disk form of a [`Model`]: JSON with the full config, its fingerprint,
/// the corpus shape and every parameter as shape plus row-major values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub fingerprint: String,
    pub seed: u64,
    pub config: RunConfig,
    pub shape: ModelShape,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            fingerprint: model.config.fingerprint(),
            seed: model.config.seed,
            config: model.config.clone(),
            shape: model.shape.clone(),
            params: model.params.clone(),
        }
    }

    /// Checks the version, the fingerprint and every parameter shape.
    pub fn into_model(self) -> Result<Model> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let fingerprint = self.config.fingerprint();
        if fingerprint != self.fingerprint {
            return Err(Error::Checkpoint(format!(
                "config fingerprint {fingerprint} does not match the recorded {}",
                self.fingerprint
            )));
        }
        if self.seed != self.config.seed {
            return Err(Error::Checkpoint(format!(
                "seed {} disagrees with the config's {}",
                self.seed, self.config.seed
            )));
        }
        let template = init_params(&self.config, &self.shape)?;
        template.check_compatible(&self.params)?;
        if let Some((name, _)) = self.params.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::Checkpoint(format!("parameter {name} holds non-finite values")));
        }
        Ok(Model {
            config: self.config,
            shape: self.shape,
            params: self.params,
        })
    }
}

impl Model {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(&Checkpoint::from_model(self))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        ckpt.into_model()
    }

    /// Like [`Model::load`], but also requires the stored config to equal
    /// `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &RunConfig) -> Result<Model> {
        let model = Self::load(path)?;
        if model.config != *expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint config {} does not match the requested config {}",
                model.config.fingerprint(),
                expected.fingerprint()
            )));
        }
        Ok(model)
    }
}
