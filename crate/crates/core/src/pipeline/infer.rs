use repcount_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::datasets::{extract_clip, segment_frames, VideoData};
use crate::error::{argument, Error, Result};
use crate::metrics::{CountPrediction, Modality};
use crate::reliability::{fuse, ReliabilityGate};
use crate::sight::SightStream;
use crate::sound::SoundStream;
use crate::stride::{select_stride, StrideFeatures, StrideScorer};

/// How clip counts become a video count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Sum over consecutive full clips, scaled by segment span over covered
    /// span. A segment shorter than one clip gets a single padded clip.
    Sum,
    /// First clip's count scaled by segment span over clip span.
    SingleClip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Largest candidate stride.
    pub sk: usize,
    pub aggregation: Aggregation,
    /// Skip stride scoring and always use this stride.
    pub fixed_stride: Option<usize>,
    /// Ignore audio and report the sight count.
    pub no_audio: bool,
    /// Replace the learned gate with a constant.
    pub gamma_override: Option<f64>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            sk: 5,
            aggregation: Aggregation::Sum,
            fixed_stride: None,
            no_audio: false,
            gamma_override: None,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sk == 0 || self.fixed_stride == Some(0) {
            return Err(argument("strides must be positive"));
        }
        if let Some(g) = self.gamma_override {
            if !(0.0..=1.0).contains(&g) {
                return Err(argument(format!("gamma override {g} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// The four trainable parts. Only the sight stream is mandatory; what else
/// is needed depends on the inference mode.
#[derive(Clone, Debug)]
pub struct Models {
    pub sight: SightStream,
    pub sound: Option<SoundStream>,
    pub stride: Option<StrideScorer>,
    pub gate: Option<ReliabilityGate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub video_id: String,
    pub fused: CountPrediction,
    pub sight: CountPrediction,
    pub sound: Option<CountPrediction>,
    pub gamma: f64,
    pub stride: usize,
    pub label: f64,
}

/// Sight count of a whole segment at a given stride.
pub fn sight_video_count(sight: &SightStream, video: &VideoData, stride: usize, aggregation: Aggregation) -> Result<f64> {
    let (s, e) = segment_frames(&video.record, video.frames.len())?;
    let c = &sight.config;
    let span = c.clip_len * stride;
    let clip_at = |start| extract_clip(&video.frames, start, stride, c.clip_len, c.resolution, e - 1);
    match aggregation {
        Aggregation::Sum => {
            let n_full = (e - s) / span;
            if n_full == 0 {
                return Ok(sight.sight_count(&clip_at(s)?)?.prediction.value);
            }
            let mut total = 0.0;
            for i in 0..n_full {
                total += sight.sight_count(&clip_at(s + i * span)?)?.prediction.value;
            }
            Ok(total * (e - s) as f64 / (n_full * span) as f64)
        }
        Aggregation::SingleClip => {
            let first = sight.sight_count(&clip_at(s)?)?.prediction.value;
            Ok(first * (e - s) as f64 / span.min(e - s) as f64)
        }
    }
}

/// Tapped features for one stride: the sight tap of the clip starting at the
/// segment start and, when a sound stream is given, the sound tap of the
/// audio under that clip's time window.
pub fn stride_features(
    video: &VideoData,
    sight: &SightStream,
    sound: Option<&SoundStream>,
    stride: usize,
) -> Result<StrideFeatures> {
    let (s, e) = segment_frames(&video.record, video.frames.len())?;
    let c = &sight.config;
    let clip = extract_clip(&video.frames, s, stride, c.clip_len, c.resolution, e - 1)?;
    let visual = sight.tap(&clip)?;
    let audio = match (sound, &video.audio) {
        (Some(snd), Some(wave)) => {
            let fps = video.frames.fps;
            let t0 = s as f64 / fps;
            let t1 = (s + c.clip_len * stride).min(e) as f64 / fps;
            let win = wave.window(t0, t1);
            let segs = snd.segments(&pad_to_window(win, snd.config.spectrogram.fft_size))?;
            Some(snd.tap(&segs[0])?)
        }
        _ => None,
    };
    Ok(StrideFeatures { stride, visual, audio })
}

fn pad_to_window(mut w: crate::datasets::Waveform, n: usize) -> crate::datasets::Waveform {
    if w.samples.len() < n {
        w.samples.resize(n, 0.0);
    }
    w
}

/// Scores strides `1..=sk` and picks the best.
pub fn choose_stride(video: &VideoData, models: &Models, sk: usize, use_audio: bool) -> Result<(usize, f64)> {
    let scorer = models
        .stride
        .as_ref()
        .ok_or_else(|| Error::Dependency("stride scorer weights (needed unless a fixed stride is set)".into()))?;
    let sound = if scorer.audio_enabled() && use_audio {
        models.sound.as_ref()
    } else {
        None
    };
    let mut scores = Vec::with_capacity(sk);
    for k in 1..=sk {
        let f = stride_features(video, &models.sight, sound, k)?;
        let audio = match (&scorer.audio, f.audio) {
            (None, _) => None,
            (Some(_), Some(a)) => Some(a),
            // sight-only inference with an audio-trained scorer: a silent map
            (Some(block), None) => Some(Tensor::zeros(&[block.conv1.in_channels, 1, 1, 1])),
        };
        scores.push(scorer.score(&f.visual, audio.as_ref())?);
    }
    select_stride(&scores)
}

/// Full inference for one video: stride selection, sight and sound counts,
/// and gated fusion.
pub fn infer_video(video: &VideoData, models: &Models, config: &InferenceConfig) -> Result<VideoPrediction> {
    config.validate()?;
    let use_audio = !config.no_audio && video.audio.is_some() && models.sound.is_some();
    let stride = match config.fixed_stride {
        Some(s) => s,
        None => choose_stride(video, models, config.sk, use_audio)?.0,
    };
    let sight_value = sight_video_count(&models.sight, video, stride, config.aggregation)?;
    let sight = CountPrediction::clamped(sight_value, Modality::Sight);
    let label = video.record.count.value();
    let id = video.record.video_id.clone();
    let (Some(sound_model), Some(wave), true) = (&models.sound, video.segment_audio(), use_audio) else {
        return Ok(VideoPrediction {
            video_id: id,
            fused: CountPrediction {
                value: sight.value,
                modality: Modality::Fused,
            },
            sight,
            sound: None,
            gamma: 0.0,
            stride,
            label,
        });
    };
    let segments = sound_model.segments(&pad_to_window(wave, sound_model.config.spectrogram.fft_size))?;
    let sound_out = sound_model.sound_count(&segments)?;
    let gamma = match (config.gamma_override, &models.gate) {
        (Some(g), _) => g,
        (None, Some(gate)) => {
            let (s, e) = segment_frames(&video.record, video.frames.len())?;
            let c = &models.sight.config;
            let clip = extract_clip(&video.frames, s, stride, c.clip_len, c.resolution, e - 1)?;
            let (feature, _) = models.sight.extract_visual_features(&clip)?;
            gate.gate(&feature, &sound_out.tap)?
        }
        (None, None) => return Err(Error::Dependency("reliability gate weights (or a gamma override)".into())),
    };
    Ok(VideoPrediction {
        video_id: id,
        fused: fuse(sight, sound_out.prediction, gamma)?,
        sight,
        sound: Some(sound_out.prediction),
        gamma,
        stride,
        label,
    })
}
