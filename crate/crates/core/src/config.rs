//! The JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::density::KernelPolicy;
use crate::error::{DenetError, Result};
use crate::fusion::FusionConfig;
use crate::loss::LossConfig;
use crate::model::EnetConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

/// Settings of the stand-in detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockConfig {
    pub recall: f64,
    pub box_h: usize,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig { recall: 0.5, box_h: 8 }
    }
}

/// `train.seed` seeds every random choice of a run, not only training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: EnetConfig,
    pub loss: LossConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub kernel: KernelPolicy,
    pub mock: MockConfig,
    pub synth: SynthConfig,
    /// Directory of `<id>.json` annotations with `<id>.png` or `<id>.pgm` images.
    pub dataset: Option<PathBuf>,
    /// Directory of `<id>.json` detection sets.
    pub detections: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        crate::error::from_json(text).map_err(DenetError::Config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DenetError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| DenetError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.fusion.validate()?;
        self.train.validate()?;
        self.kernel.validate()?;
        self.synth.validate()?;
        if !(0.0..=1.0).contains(&self.mock.recall) {
            return Err(DenetError::Config(format!("mock.recall must be in [0, 1], got {}", self.mock.recall)));
        }
        if self.mock.box_h == 0 {
            return Err(DenetError::Config("mock.box_h must be positive".into()));
        }
        Ok(())
    }
}
