//! Run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::head::LossConfig;
use crate::model::ModelConfig;
use crate::sim::{Drop, SimConfig};
use crate::tracker::TrackerConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataLayout {
    /// Consecutive frames of one sequence.
    #[default]
    Sequence,
    /// Unrelated scenes, one seed each.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub frames: usize,
    pub layout: DataLayout,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            layout: DataLayout::Sequence,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustConfig {
    /// Drop patterns evaluated besides the clean baseline.
    pub patterns: Vec<Drop>,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            patterns: vec![
                Drop::Cameras(vec![0]),
                Drop::Cameras(vec![1]),
                Drop::Cameras(vec![0, 1]),
                Drop::Radar,
            ],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub tracker: TrackerConfig,
    pub data: DataConfig,
    pub robust: RobustConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.sim.validate()?;
        self.tracker.validate()?;
        if self.sim.classes.len() != self.model.num_classes {
            return Err(Error::Config(format!(
                "{} simulated classes vs {} model classes",
                self.sim.classes.len(),
                self.model.num_classes
            )));
        }
        if self.sim.cameras.feature_stride != self.model.feature_stride() {
            return Err(Error::Config(format!(
                "camera feature stride {} vs backbone stride {}",
                self.sim.cameras.feature_stride,
                self.model.feature_stride()
            )));
        }
        if self.sim.range != self.model.range {
            return Err(Error::Config("simulation and model world ranges differ".into()));
        }
        let cams = self.sim.cameras.yaws.len();
        for p in &self.robust.patterns {
            if let Drop::Cameras(ids) = p {
                if ids.iter().any(|&i| i >= cams) {
                    return Err(Error::Config(format!("drop pattern {ids:?} names a missing camera")));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
