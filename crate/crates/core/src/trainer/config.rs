use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::DatasetSpec;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, PositiveSelection};
use crate::model::ModelConfig;
use crate::multiqueue::MemoryKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    #[default]
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub crop_size: usize,
    pub flip_prob: f64,
    pub batch_size: usize,
    pub wrl_epochs: usize,
    pub crr_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub schedule: ScheduleKind,
    pub positive_selection: PositiveSelection,
    pub memory: MemoryKind,
    /// Keys per weather class held by the memory.
    pub queue_len: usize,
    /// `false` trains the encoder and head on the count loss alone.
    pub contrastive: bool,
    pub train_head_in_crr: bool,
    pub seed: u64,
    /// Dataset used when a command is not given one explicitly.
    pub data_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            crop_size: 64,
            flip_prob: 0.5,
            batch_size: 16,
            wrl_epochs: 30,
            crr_epochs: 15,
            lr: 1e-4,
            weight_decay: 1e-3,
            optimizer: OptimizerKind::AdamW,
            schedule: ScheduleKind::Cosine,
            positive_selection: PositiveSelection::SameImage,
            memory: MemoryKind::MultiQueue,
            queue_len: 256,
            contrastive: true,
            train_head_in_crr: true,
            seed: 0,
            data_dir: None,
        }
    }
}

/// Everything one pipeline run needs, as read from a single TOML file with
/// `[data]`, `[model]`, `[loss]` and `[train]` tables. Missing keys take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = Self::from_toml(&text).map_err(|source| Error::Toml { path: path.to_path_buf(), source })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks the training, model and loss sections. The `[data]` section is
    /// checked by the generator when it is used.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if t.crop_size == 0 || t.crop_size % self.model.stride != 0 {
            return Err(Error::Config(format!(
                "train.crop_size {} is not a positive multiple of the encoder stride {}",
                t.crop_size, self.model.stride
            )));
        }
        if t.batch_size < 2 {
            return Err(Error::Config(format!("train.batch_size must be at least 2, got {}", t.batch_size)));
        }
        if !(0.0..=1.0).contains(&t.flip_prob) {
            return Err(Error::Config(format!("train.flip_prob {} outside [0, 1]", t.flip_prob)));
        }
        if !(t.lr > 0.0) || t.weight_decay < 0.0 {
            return Err(Error::Config("train.lr must be > 0 and train.weight_decay >= 0".into()));
        }
        if t.queue_len == 0 {
            return Err(Error::Config("train.queue_len must be positive".into()));
        }
        Ok(())
    }
}
