use std::path::Path;

use repcount_nn::SgdConfig;
use serde::{Deserialize, Serialize};

use crate::datasets::synth::SyntheticDatasetConfig;
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::pipeline::infer::InferenceConfig;
use crate::reliability::ReliabilityConfig;
use crate::sight::SightConfig;
use crate::sound::SoundConfig;
use crate::stride::StrideConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TrainSight,
    TrainSound,
    TrainStride,
    TrainReliability,
    Infer,
    Evaluate,
    Synth,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train_sight" | "sight" => Stage::TrainSight,
            "train_sound" | "sound" => Stage::TrainSound,
            "train_stride" | "stride" => Stage::TrainStride,
            "train_reliability" | "reliability" => Stage::TrainReliability,
            "infer" => Stage::Infer,
            "evaluate" => Stage::Evaluate,
            "synth" => Stage::Synth,
            other => return Err(Error::Config(format!("unknown stage {other:?}"))),
        })
    }
}

/// Optimizer schedule for one stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Learning rate in the last epoch as a fraction of the initial one,
    /// reached by cosine annealing. 1.0 keeps it constant.
    pub final_lr_fraction: f64,
}

impl Default for StreamTraining {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 8,
            sgd: SgdConfig::default(),
            final_lr_fraction: 1.0,
        }
    }
}

impl StreamTraining {
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let lr = self.sgd.learning_rate;
        if self.epochs <= 1 {
            return lr;
        }
        let t = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        let floor = self.final_lr_fraction;
        lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SightSection {
    pub model: SightConfig,
    pub train: StreamTraining,
}

impl Default for SightSection {
    fn default() -> Self {
        Self {
            model: SightConfig::full(),
            train: StreamTraining::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoundSection {
    pub model: SoundConfig,
    pub train: StreamTraining,
}

impl Default for SoundSection {
    fn default() -> Self {
        Self {
            model: SoundConfig::full(),
            train: StreamTraining {
                epochs: 20,
                ..Default::default()
            },
        }
    }
}

/// Everything a run needs. Defaults reproduce the published full-scale
/// recipe; [`RunConfig::desk`] is a CPU-sized variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub sight: SightSection,
    pub sound: SoundSection,
    pub stride: StrideConfig,
    pub reliability: ReliabilityConfig,
    pub inference: InferenceConfig,
    pub synth: SyntheticDatasetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sight: SightSection::default(),
            sound: SoundSection::default(),
            stride: StrideConfig::default(),
            reliability: ReliabilityConfig::default(),
            inference: InferenceConfig::default(),
            synth: SyntheticDatasetConfig::default(),
        }
    }
}

impl RunConfig {
    /// Tiny backbones with schedules that converge in minutes on one core.
    pub fn desk() -> Self {
        let fast = |epochs, lr| StreamTraining {
            epochs,
            batch_size: 8,
            sgd: SgdConfig {
                learning_rate: lr,
                momentum: 0.9,
                weight_decay: 0.0,
                clip_norm: Some(5.0),
            },
            final_lr_fraction: 0.05,
        };
        let small_head = |h: HeadConfig| HeadConfig {
            num_classes: 8,
            lambda2: 0.1,
            ..h
        };
        let mut sight = SightConfig::tiny();
        sight.head = small_head(sight.head);
        let mut sound = SoundConfig::tiny();
        sound.head = small_head(sound.head);
        Self {
            sight: SightSection {
                model: sight,
                train: fast(30, 3e-3),
            },
            sound: SoundSection {
                model: sound,
                train: fast(30, 3e-3),
            },
            stride: StrideConfig {
                epochs: 30,
                sgd: SgdConfig {
                    learning_rate: 1e-2,
                    momentum: 0.9,
                    weight_decay: 0.0,
                    clip_norm: Some(5.0),
                },
                width: 16,
                ..Default::default()
            },
            reliability: ReliabilityConfig {
                epochs: 40,
                sgd: SgdConfig {
                    learning_rate: 1e-2,
                    momentum: 0.9,
                    weight_decay: 0.0,
                    clip_norm: Some(5.0),
                },
                width: 16,
                ..Default::default()
            },
            synth: SyntheticDatasetConfig {
                n_test: 64,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.sight.model.head.validate().map_err(cfg)?;
        self.sound.model.head.validate().map_err(cfg)?;
        self.sound.model.spectrogram.validate().map_err(cfg)?;
        self.stride.validate().map_err(cfg)?;
        self.reliability.validate().map_err(cfg)?;
        self.inference.validate().map_err(cfg)?;
        for (name, t) in [("sight", &self.sight.train), ("sound", &self.sound.train)] {
            if t.batch_size == 0 {
                return Err(Error::Config(format!("{name} batch size must be positive")));
            }
            if !(t.final_lr_fraction > 0.0 && t.final_lr_fraction <= 1.0) {
                return Err(Error::Config(format!("{name} final_lr_fraction must be in (0, 1]")));
            }
        }
        if self.sight.model.clip_len < 2 || self.sight.model.resolution == 0 || self.sound.model.n_segments == 0 {
            return Err(Error::Config("clip length, resolution and segment count must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_recipe() {
        let c = RunConfig::default();
        assert_eq!((c.sight.train.epochs, c.sight.train.batch_size), (8, 8));
        assert_eq!(c.sight.train.sgd.learning_rate, 1e-4);
        assert_eq!(c.sight.train.sgd.momentum, 0.0);
        assert_eq!(c.sound.train.epochs, 20);
        assert_eq!((c.stride.epochs, c.stride.sgd.learning_rate), (5, 1e-3));
        assert_eq!((c.stride.sk_train, c.stride.sk_infer, c.inference.sk), (8, 5, 5));
        assert_eq!((c.stride.margin, c.stride.theta_s), (2.9, 0.29));
        assert_eq!((c.reliability.theta_r_v, c.reliability.theta_r_a), (0.36, 0.40));
        assert_eq!((c.reliability.epochs, c.reliability.sgd.learning_rate), (20, 1e-4));
        assert_eq!((c.sight.model.head.num_classes, c.sound.model.head.num_classes), (41, 43));
        assert_eq!((c.sight.model.head.lambda1, c.sight.model.head.lambda2), (10.0, 10.0));
        assert_eq!((c.sight.model.clip_len, c.sight.model.resolution), (64, 112));
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = RunConfig::desk();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        let partial = RunConfig::from_toml("seed = 7\n[stride]\nmargin = 1.5\n").unwrap();
        assert_eq!((partial.seed, partial.stride.margin, partial.stride.theta_s), (7, 1.5, 0.29));
        assert!(matches!(RunConfig::from_toml("[stride]\ntheta_s = 2.0\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("seed = \"x\""), Err(Error::Config(_))));
    }
}
