//! Experiment description read from JSON. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::navigation::{DecayMode, TemperatureSchedule};
use crate::rng::RngState;
use crate::training::{Dataset, SyntheticVideoSpec, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NavigationConfig {
    pub tau_start: f64,
    pub tau_end: f64,
    pub decay: DecayMode,
}

impl Default for NavigationConfig {
    fn default() -> Self {
        Self { tau_start: 1.0, tau_end: 0.01, decay: DecayMode::Exponential }
    }
}

impl NavigationConfig {
    /// Length is fixed by the trainer from the epoch count.
    pub fn schedule(&self) -> TemperatureSchedule {
        TemperatureSchedule { tau_start: self.tau_start, tau_end: self.tau_end, total_steps: 0, mode: self.decay }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub synthetic: SyntheticVideoSpec,
    pub train_size: usize,
    pub eval_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub training: TrainConfig,
    #[serde(default)]
    pub navigation: NavigationConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Drives initialisation, data, shuffling and sampling.
    #[serde(default)]
    pub seed: u64,
}

/// Stream indices of [`RngState::derive`] for each consumer of the seed.
const MODEL_STREAM: u64 = 11;
const TRAIN_DATA_STREAM: u64 = 12;
const EVAL_DATA_STREAM: u64 = 13;

impl ExperimentConfig {
    /// Compact model on the salient-frame task, sized for one CPU core.
    pub fn desk() -> Self {
        let model = ModelConfig::compact();
        Self {
            dataset: DatasetConfig {
                synthetic: SyntheticVideoSpec {
                    classes: model.classes,
                    frames: model.frames,
                    salient: 2,
                    noise: 3.5,
                    resolution: model.resolution,
                    channels: model.in_channels,
                    distractor: 1.0,
                    template_cells: 8,
                    template_seed: 0,
                    marker: 1.0,
                    marker_cells: 1,
                },
                train_size: 256,
                eval_size: 128,
            },
            model,
            training: TrainConfig { epochs: 8, batch_size: 16, lr: 0.1, ..TrainConfig::default() },
            navigation: NavigationConfig::default(),
            output_dir: None,
            seed: 0,
        }
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("{origin}:{}:{}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.dataset.synthetic.validate().map_err(|e| Error::Config(format!("dataset: {e}")))?;
        let (m, d) = (&self.model, &self.dataset.synthetic);
        let pairs = [("frames", m.frames, d.frames), ("resolution", m.resolution, d.resolution), ("channels", m.in_channels, d.channels)];
        for (name, a, b) in pairs {
            if a != b {
                return Err(Error::Config(format!("dataset.synthetic.{name} = {b} disagrees with model ({a})")));
            }
        }
        if d.classes != m.classes {
            return Err(Error::Config(format!("dataset.synthetic.classes = {} disagrees with model.classes = {}", d.classes, m.classes)));
        }
        let n = &self.navigation;
        if !(n.tau_start > 0.0 && n.tau_end > 0.0 && n.tau_end <= n.tau_start) {
            return Err(Error::Config(format!("navigation: need 0 < tau_end <= tau_start, got {} and {}", n.tau_end, n.tau_start)));
        }
        Ok(())
    }

    /// Training settings with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.training.clone() }
    }

    pub fn model_rng(&self) -> RngState {
        RngState::derive(self.seed, MODEL_STREAM)
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.dataset;
        Ok((
            Dataset::generate(&d.synthetic, d.train_size, crate::rng::splitmix64(self.seed ^ TRAIN_DATA_STREAM))?,
            Dataset::generate(&d.synthetic, d.eval_size, crate::rng::splitmix64(self.seed ^ EVAL_DATA_STREAM))?,
        ))
    }
}
