//! Run configuration: one JSON document layered over a built-in profile.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use rvsb_core::eval::SweepConfig;
use rvsb_core::gait_sim::GaitConfig;
use rvsb_core::pipeline::{DatasetConfig, SegmentSettings};
use rvsb_core::vaenet::{NetworkConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 128 x 128 images and the full-size network.
    #[default]
    Full,
    /// 32 x 32 pooled images and the reduced network.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Single interference signal for `simulate`.
    pub gait: GaitConfig,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Full => Self::default(),
            Profile::Desk => Self {
                dataset: DatasetConfig { segment: SegmentSettings::desk(), ..DatasetConfig::default() },
                network: NetworkConfig::desk(),
                ..Self::default()
            },
        }
    }

    /// The profile defaults with `overrides` merged on top; unknown keys are
    /// rejected.
    pub fn from_value(profile: Profile, overrides: Value) -> Result<Self, CliError> {
        let mut base = serde_json::to_value(Self::profile(profile)).expect("config serializes");
        merge(&mut base, overrides);
        serde_json::from_value(base).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: Option<&Path>, profile: Profile) -> Result<Self, CliError> {
        let overrides = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        Self::from_value(profile, overrides)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
