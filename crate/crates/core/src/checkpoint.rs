//! JSON checkpoints of trained models.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Vocab;
use crate::error::{Error, Result};
use crate::model::FinalRepr;
use crate::training::{Params, TrainConfig, TrainedModel};

pub const MAGIC: &str = "MCREC-CKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    pub version: u32,
    pub label: String,
    pub config: TrainConfig,
    pub params: Params,
    /// Final representations used for ranking.
    pub repr: FinalRepr,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

impl Checkpoint {
    pub fn new(model: &TrainedModel, users: &Vocab, items: &Vocab) -> Result<Self> {
        let ckpt = Self {
            magic: MAGIC.into(),
            version: VERSION,
            label: model.label.clone(),
            config: model.config.clone(),
            params: model.params.clone(),
            repr: model.repr.clone(),
            user_ids: users.ids().to_vec(),
            item_ids: items.ids().to_vec(),
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {:?}", self.magic)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        if self.repr.n_users() != self.user_ids.len() || self.repr.n_items() != self.item_ids.len() {
            return Err(Error::Checkpoint(format!(
                "representation covers {} users / {} items but {} / {} ids are listed",
                self.repr.n_users(),
                self.repr.n_items(),
                self.user_ids.len(),
                self.item_ids.len()
            )));
        }
        if !self.repr.user.iter().chain(self.repr.item.iter()).all(|v| v.is_finite()) {
            return Err(Error::Checkpoint("non-finite values in representation".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let ckpt: Self = serde_json::from_slice(&bytes)?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn users(&self) -> Vocab {
        Vocab::from_ids(self.user_ids.clone())
    }

    pub fn items(&self) -> Vocab {
        Vocab::from_ids(self.item_ids.clone())
    }
}
