//! Checkpoint container: `checkpoint.json` plus little-endian f32 blobs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Architecture, NetworkConfig, ParamEntry};
use super::optim::{AdamWState, PlateauState};
use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::pipeline::{create_dir, read_f32, write_f32, write_json, DTYPE_TAG};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
const WEIGHTS_FILE: &str = "weights.f32";
const ADAM_M_FILE: &str = "adam_m.f32";
const ADAM_V_FILE: &str = "adam_v.f32";

/// Network weights and the full optimizer state after some epoch.
///
/// Random streams are derived from `train.seed` and the epoch number, so the
/// seed and epoch are the complete generator state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    pub scheduler: PlateauState,
    pub adam: AdamWState<f32>,
    pub params: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    dtype: String,
    network: NetworkConfig,
    train: TrainConfig,
    epoch: usize,
    best_val_loss: Option<f64>,
    scheduler: PlateauState,
    adam_step: u64,
    n_params: usize,
    weights: String,
    adam_m: String,
    adam_v: String,
    tensors: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(&self.network)
    }

    /// Fresh initialization for the given configs.
    pub fn initial(network: &NetworkConfig, train: &TrainConfig) -> Result<Self> {
        let arch = Architecture::new(network)?;
        let tree = crate::seed::SeedTree::new(train.seed);
        Ok(Self {
            network: network.clone(),
            train: train.clone(),
            epoch: 0,
            best_val_loss: None,
            scheduler: PlateauState::new(train.optimizer.lr),
            adam: AdamWState::new(arch.n_params()),
            params: arch.init_params(&mut tree.rng("init", 0)),
        })
    }

    /// Entry and values of the tensor called `name`.
    pub fn tensor(&self, name: &str) -> Option<(ParamEntry, &[f32])> {
        let arch = self.architecture().ok()?;
        let entry = arch.entries().iter().find(|e| e.name == name)?.clone();
        let values = self.params.get(entry.range())?;
        Some((entry, values))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let arch = self.architecture()?;
        if self.params.len() != arch.n_params() || self.adam.m.len() != arch.n_params() || self.adam.v.len() != arch.n_params() {
            return Err(Error::ShapeMismatch { expected: vec![arch.n_params()], got: vec![self.params.len()] });
        }
        create_dir(dir)?;
        write_f32(&dir.join(WEIGHTS_FILE), &self.params)?;
        write_f32(&dir.join(ADAM_M_FILE), &self.adam.m)?;
        write_f32(&dir.join(ADAM_V_FILE), &self.adam.v)?;
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            dtype: DTYPE_TAG.into(),
            network: self.network.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            best_val_loss: self.best_val_loss,
            scheduler: self.scheduler,
            adam_step: self.adam.step,
            n_params: arch.n_params(),
            weights: WEIGHTS_FILE.into(),
            adam_m: ADAM_M_FILE.into(),
            adam_v: ADAM_V_FILE.into(),
            tensors: arch.entries().to_vec(),
        };
        write_json(&dir.join(CHECKPOINT_FILE), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: m.version, expected: CHECKPOINT_VERSION });
        }
        if m.dtype != DTYPE_TAG {
            return Err(Error::Corrupt(format!("unsupported dtype {}", m.dtype)));
        }
        let arch = Architecture::new(&m.network)?;
        if m.tensors != arch.entries() || m.n_params != arch.n_params() {
            return Err(Error::Corrupt("tensor table does not match the network config".into()));
        }
        let n = arch.n_params();
        for f in [&m.weights, &m.adam_m, &m.adam_v] {
            if f.contains(['/', '\\']) {
                return Err(Error::Corrupt(format!("blob name {f} is not a plain file name")));
            }
        }
        Ok(Self {
            params: read_f32(&dir.join(&m.weights), n)?,
            adam: AdamWState {
                m: read_f32(&dir.join(&m.adam_m), n)?,
                v: read_f32(&dir.join(&m.adam_v), n)?,
                step: m.adam_step,
            },
            network: m.network,
            train: m.train,
            epoch: m.epoch,
            best_val_loss: m.best_val_loss,
            scheduler: m.scheduler,
        })
    }
}
