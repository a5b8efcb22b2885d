//! Trained-model artifacts.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::Network;
use super::train::{Algorithm, TrainConfig};
use super::TrainError;
use crate::tensor::{OptimizerState, ParamStore, TensorArchive};

/// Where the training frames came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetDescriptor {
    pub hours: f64,
    pub fraction: f64,
    pub offset_s: f64,
    pub seed: u64,
}

/// Hex SHA-256 of the JSON serialization of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("configs serialize to JSON");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    pub network: Network,
    pub optimizer: Option<OptimizerState>,
    pub teacher: Option<ParamStore<f32>>,
    pub center: Option<Vec<f32>>,
    pub epoch: usize,
    pub subset: SubsetDescriptor,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    config_hash: String,
    architecture: super::network::Architecture,
    center: Option<Vec<f32>>,
    epoch: usize,
    subset: SubsetDescriptor,
}

impl Checkpoint {
    /// Network used for evaluation: the teacher for self-distillation, the
    /// trained model otherwise.
    pub fn eval_network(&self) -> Result<Network, TrainError> {
        match (&self.config.algorithm, &self.teacher) {
            (Algorithm::Dino, Some(t)) => {
                Ok(Network::from_params(self.network.arch.clone(), t.clone())?)
            }
            _ => Ok(self.network.clone()),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let expected = config_hash(&self.config);
        if expected != self.config_hash {
            return Err(TrainError::Checkpoint(format!(
                "config hash {} does not match its config ({expected})",
                self.config_hash
            )));
        }
        if !(self.subset.hours > 0.0) {
            return Err(TrainError::Checkpoint(format!(
                "subset hours {} must be positive",
                self.subset.hours
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        self.validate()?;
        let meta = Meta {
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            architecture: self.network.arch.clone(),
            center: self.center.clone(),
            epoch: self.epoch,
            subset: self.subset.clone(),
        };
        let meta =
            serde_json::to_value(&meta).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let mut archive = TensorArchive::new(meta);
        archive.add_store("model", &self.network.params);
        if let Some(t) = &self.teacher {
            archive.add_store("teacher", t);
        }
        archive.optimizer = self.optimizer.clone();
        archive.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let archive = TensorArchive::load(path)?;
        let meta: Meta = serde_json::from_value(archive.meta.clone())
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let mut network = Network::new(meta.architecture.clone(), 0)?;
        archive.restore_store("model", &mut network.params)?;
        let teacher = if archive
            .tensors
            .iter()
            .any(|(n, _)| n.starts_with("teacher/"))
        {
            let mut t = network.params.detached();
            archive.restore_store("teacher", &mut t)?;
            Some(t)
        } else {
            None
        };
        let ckpt = Checkpoint {
            config: meta.config,
            config_hash: meta.config_hash,
            network,
            optimizer: archive.optimizer,
            teacher,
            center: meta.center,
            epoch: meta.epoch,
            subset: meta.subset,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}
