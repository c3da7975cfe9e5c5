//! Visual counting stream over fixed-length RGB clips.

use rand::Rng;
use repcount_nn::{ConvBlock, ConvBlockSpec, Init, Tensor};
use serde::{Deserialize, Serialize};

use crate::datasets::VideoClip;
use crate::error::{argument, Result};
use crate::head::{CountingHead, HeadConfig, HEAD_INIT};
use crate::metrics::Modality;
use crate::stream::{Backbone, CountingStream, Layer, StreamOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SightVariant {
    /// Separable 3D conv stack of the S3D class with a 512-d feature.
    Full,
    /// Four small conv blocks for CPU training at desk scale.
    Tiny,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SightConfig {
    pub variant: SightVariant,
    pub clip_len: usize,
    pub resolution: usize,
    pub head: HeadConfig,
    /// Instance-normalize every block except the last.
    pub instance_norm: bool,
}

impl Default for SightConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl SightConfig {
    pub fn full() -> Self {
        Self {
            variant: SightVariant::Full,
            clip_len: 64,
            resolution: 112,
            head: HeadConfig::sight(),
            instance_norm: false,
        }
    }

    pub fn tiny() -> Self {
        Self {
            variant: SightVariant::Tiny,
            clip_len: 64,
            resolution: 16,
            head: HeadConfig {
                feature_dim: 64,
                ..HeadConfig::sight()
            },
            instance_norm: true,
        }
    }

    /// Block layout and the index of the tapped block.
    pub fn blocks(&self) -> (Vec<ConvBlockSpec>, usize) {
        let spec = |i, o, kernel, stride, separable, pool| ConvBlockSpec {
            in_channels: i,
            out_channels: o,
            kernel,
            stride,
            separable,
            pool,
            instance_norm: self.instance_norm,
        };
        let f = self.head.feature_dim;
        let (mut blocks, tap) = match self.variant {
            SightVariant::Full => (
                vec![
                    spec(3, 64, [3, 7, 7], [2, 2, 2], true, [1, 2, 2]),
                    spec(64, 192, [3, 3, 3], [1, 1, 1], true, [1, 2, 2]),
                    spec(192, 480, [3, 3, 3], [1, 1, 1], true, [2, 2, 2]),
                    spec(480, 832, [3, 3, 3], [1, 1, 1], true, [2, 2, 2]),
                    spec(832, f, [3, 3, 3], [1, 1, 1], true, [1, 1, 1]),
                ],
                2,
            ),
            SightVariant::Tiny => (
                vec![
                    spec(3, 8, [3, 3, 3], [1, 2, 2], false, [2, 2, 2]),
                    spec(8, 16, [3, 3, 3], [1, 1, 1], false, [2, 1, 1]),
                    spec(16, 16, [3, 3, 3], [1, 1, 1], false, [2, 2, 2]),
                    spec(16, f, [3, 3, 3], [1, 1, 1], false, [1, 1, 1]),
                ],
                2,
            ),
        };
        if let Some(last) = blocks.last_mut() {
            last.instance_norm = false;
        }
        (blocks, tap)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SightStream {
    pub config: SightConfig,
    pub net: CountingStream,
}

impl SightStream {
    pub fn new<R: Rng + ?Sized>(config: SightConfig, init: Init, rng: &mut R) -> Result<Self> {
        let (specs, tap) = config.blocks();
        let layers = specs
            .into_iter()
            .map(|s| Ok(Layer::Conv(ConvBlock::new(s, init, rng)?)))
            .collect::<Result<Vec<_>>>()?;
        let shape = vec![3, config.clip_len, config.resolution, config.resolution];
        let backbone = Backbone::new(layers, tap, shape)?;
        let head_init = if init == Init::Zeros { Init::Zeros } else { HEAD_INIT };
        let head = CountingHead::new(config.head, head_init, rng)?;
        Ok(Self {
            net: CountingStream::new(Modality::Sight, backbone, head)?,
            config,
        })
    }

    fn check(&self, clip: &VideoClip) -> Result<()> {
        let c = &self.config;
        if clip.frames.shape() != [3, c.clip_len, c.resolution, c.resolution] {
            return Err(argument(format!(
                "clip shape {:?} does not match {}x{}x{} RGB",
                clip.frames.shape(),
                c.clip_len,
                c.resolution,
                c.resolution
            )));
        }
        Ok(())
    }

    /// Final feature vector and the tapped mid-level feature map.
    pub fn extract_visual_features(&self, clip: &VideoClip) -> Result<(Vec<f32>, Tensor)> {
        self.check(clip)?;
        self.net.backbone.forward(&clip.frames)
    }

    pub fn sight_count(&self, clip: &VideoClip) -> Result<StreamOutput> {
        self.check(clip)?;
        self.net.run(&clip.frames)
    }

    pub fn tap(&self, clip: &VideoClip) -> Result<Tensor> {
        self.check(clip)?;
        self.net.backbone.tap(&clip.frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::extract_clip;
    use crate::datasets::Frames;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use repcount_nn::{Sgd, SgdConfig};

    fn clip_of(config: &SightConfig, fill: impl Fn(usize) -> u8) -> VideoClip {
        let r = config.resolution;
        let data: Vec<u8> = (0..config.clip_len * r * r * 3).map(&fill).collect();
        let frames = Frames::new(25.0, r, r, data).unwrap();
        extract_clip(&frames, 0, 1, config.clip_len, r, config.clip_len - 1).unwrap()
    }

    #[test]
    fn zero_model_counts_zero() {
        let cfg = SightConfig::tiny();
        let model = SightStream::new(cfg.clone(), Init::Zeros, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let out = model.sight_count(&clip_of(&cfg, |_| 0)).unwrap();
        assert!(out.feature.iter().all(|&v| v == 0.0));
        assert_eq!(out.prediction.value, 0.0);
        assert_eq!(out.tap.shape(), &[16, 8, 2, 2]);
    }

    #[test]
    fn deterministic_and_nonnegative() {
        let cfg = SightConfig::tiny();
        let model = SightStream::new(cfg.clone(), Init::HE, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let clip = clip_of(&cfg, |i| (i * 31 % 251) as u8);
        let a = model.sight_count(&clip).unwrap();
        let b = model.sight_count(&clip).unwrap();
        assert_eq!(a.prediction, b.prediction);
        assert!(a.prediction.value >= 0.0 && a.prediction.value.is_finite());
        assert_eq!(a.feature.len(), 64);
    }

    #[test]
    fn rejects_wrong_shape() {
        let cfg = SightConfig::tiny();
        let model = SightStream::new(cfg.clone(), Init::HE, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut small = cfg.clone();
        small.clip_len = 8;
        assert!(matches!(model.sight_count(&clip_of(&small, |_| 1)), Err(crate::Error::Argument(_))));
    }

    #[test]
    fn full_variant_feature_is_512() {
        let mut cfg = SightConfig::full();
        cfg.clip_len = 8;
        cfg.resolution = 32;
        let model = SightStream::new(cfg.clone(), Init::HE, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (feat, tap) = model.extract_visual_features(&clip_of(&cfg, |i| (i % 200) as u8)).unwrap();
        assert_eq!(feat.len(), 512);
        assert_eq!(tap.shape()[0], 480);
    }

    #[test]
    fn small_step_decreases_batch_loss() {
        let cfg = SightConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = SightStream::new(cfg.clone(), Init::HE, &mut rng).unwrap();
        let clips: Vec<Tensor> = (0..4).map(|k| clip_of(&cfg, |i| ((i * (k + 3)) % 256) as u8).frames).collect();
        let labels = [2.0, 3.0, 4.0, 5.0];
        let before = model.net.batch_loss(&clips, &labels, None).unwrap().total;
        let opt = Sgd::new(SgdConfig {
            learning_rate: 1e-4,
            ..Default::default()
        });
        model.net.train_batch(&clips, &labels, None, &opt).unwrap();
        let after = model.net.batch_loss(&clips, &labels, None).unwrap().total;
        assert!(after < before, "{after} >= {before}");
    }
}
