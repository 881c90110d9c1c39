use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, PipelineError, Result};
use crate::loss::LossConfig;
use crate::resunet::ResUNetConfig;
use crate::synth::SynthSpec;
use crate::volume::Axis;

/// Auxiliary denoising run that produces the transferable encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Number of (noisy, clean) slice pairs.
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { samples: 128, epochs: 5, batch_size: 8, learning_rate: 1e-3 }
    }
}

/// Everything a run needs; written back out next to its results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory of case folders. When absent, cases come from `synth`.
    pub data_root: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub axes: Vec<Axis>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of the non-test cases used for training.
    pub split_ratio: f64,
    /// Trailing cases held out from both training and validation.
    pub test_cases: usize,
    pub seed: u64,
    /// Encoder weights from `pretrain`.
    pub pretrained: Option<PathBuf>,
    pub freeze_encoder: bool,
    /// With `pretrained`, also train one scratch epoch per axis and log its validation loss.
    pub compare_scratch: bool,
    pub synth_cases: usize,
    pub model: ResUNetConfig,
    pub loss: LossConfig,
    pub synth: SynthSpec,
    pub pretrain: PretrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_root: None,
            out_dir: PathBuf::from("run"),
            axes: Axis::ALL.to_vec(),
            epochs: 200,
            batch_size: 4,
            learning_rate: 1e-4,
            split_ratio: 0.8,
            test_cases: 0,
            seed: 0,
            pretrained: None,
            freeze_encoder: false,
            compare_scratch: false,
            synth_cases: 20,
            model: ResUNetConfig::default(),
            loss: LossConfig::default(),
            synth: SynthSpec::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small synthetic profile that trains all three axes in minutes on one core.
    pub fn desk() -> Self {
        RunConfig {
            epochs: 12,
            learning_rate: 2e-3,
            model: ResUNetConfig { depth: 3, base_channels: 8, ..ResUNetConfig::default() },
            loss: LossConfig { class_weights: Some(vec![1.0, 3.0]), ..LossConfig::default() },
            ..RunConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies the keys in `text` on top of `base`; tables merge key by key.
    pub fn overlay(base: &RunConfig, text: &str) -> Result<Self> {
        let cfg_err = |e: &dyn std::fmt::Display| PipelineError::Config(e.to_string());
        let mut merged = toml::Table::try_from(base).map_err(|e| cfg_err(&e))?;
        let patch: toml::Table = toml::from_str(text).map_err(|e| cfg_err(&e))?;
        merge(&mut merged, patch);
        let cfg: RunConfig = merged.try_into().map_err(|e| cfg_err(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::overlay_file(&RunConfig::default(), path)
    }

    pub fn overlay_file(base: &RunConfig, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::overlay(base, &text).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PipelineError::Serialize(e.to_string()))
    }

    /// Sets the run seed and everything derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio {} must lie in (0, 1)", self.split_ratio));
        }
        if self.axes.is_empty() {
            return bad("at least one axis is required".into());
        }
        let mut axes = self.axes.clone();
        axes.sort();
        axes.dedup();
        if axes.len() != self.axes.len() {
            return bad(format!("duplicate axes in {:?}", self.axes));
        }
        if self.pretrain.samples == 0 || self.pretrain.epochs == 0 || self.pretrain.batch_size == 0 {
            return bad("pretrain samples, epochs and batch_size must be at least 1".into());
        }
        if !(self.pretrain.learning_rate > 0.0) {
            return bad("pretrain learning_rate must be positive".into());
        }
        if self.freeze_encoder && self.pretrained.is_none() {
            log::warn!("freeze_encoder is set without pretrained weights; the frozen encoder stays at its random init");
        }
        self.model.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.loss.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.data_root.is_none() {
            self.synth.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
            if self.synth.sequences != self.model.in_channels {
                return bad(format!("synth has {} sequences, model expects {}", self.synth.sequences, self.model.in_channels));
            }
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
