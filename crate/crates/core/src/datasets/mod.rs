//! Dataset records, manifests, media access, clip sampling and the synthetic
//! audiovisual repetition generator.

mod manifest;
pub mod media;
mod sampler;
pub mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};
use crate::metrics::CountLabel;

pub use manifest::{load_manifest, parse_manifest, DatasetManifest};
pub use media::{load_video, Frames, VideoData, Waveform};
pub use synth::{generate_dataset, materialize, SyntheticDatasetConfig, SyntheticVideo};
pub use sampler::{clip_frame_indices, clip_sampler, extract_clip, scaled_label, segment_frames, VideoClip, LABEL_FLOOR};

pub const DEFAULT_FPS: f64 = 25.0;

/// The seven vision challenges of the extreme evaluation subset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChallengeTag {
    CameraViewpointChanges,
    ClutteredBackground,
    LowIllumination,
    FastMotion,
    DisappearingActivity,
    ScaleVariation,
    LowResolution,
}

impl ChallengeTag {
    pub const ALL: [ChallengeTag; 7] = [
        ChallengeTag::CameraViewpointChanges,
        ChallengeTag::ClutteredBackground,
        ChallengeTag::LowIllumination,
        ChallengeTag::FastMotion,
        ChallengeTag::DisappearingActivity,
        ChallengeTag::ScaleVariation,
        ChallengeTag::LowResolution,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ChallengeTag::CameraViewpointChanges => "camera_viewpoint_changes",
            ChallengeTag::ClutteredBackground => "cluttered_background",
            ChallengeTag::LowIllumination => "low_illumination",
            ChallengeTag::FastMotion => "fast_motion",
            ChallengeTag::DisappearingActivity => "disappearing_activity",
            ChallengeTag::ScaleVariation => "scale_variation",
            ChallengeTag::LowResolution => "low_resolution",
        }
    }
}

impl fmt::Display for ChallengeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChallengeTag {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        ChallengeTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| argument(format!("unknown challenge tag {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| argument(format!("unknown split {s:?}")))
    }
}

/// One annotated video. Paths are resolved relative to the manifest's
/// directory when they are not absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub media_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<PathBuf>,
    pub split: Split,
    pub count: CountLabel,
    /// Annotated repetition segment `[start_s, end_s]` in seconds.
    pub segment: (f64, f64),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_class: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub challenge_tags: BTreeSet<ChallengeTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
}

impl VideoRecord {
    pub fn validate(&self) -> Result<()> {
        if self.video_id.is_empty() {
            return Err(argument("empty video_id"));
        }
        let (s, e) = self.segment;
        if !(s.is_finite() && e.is_finite() && s >= 0.0 && e > s) {
            return Err(argument(format!("segment [{s}, {e}] must satisfy 0 <= start < end")));
        }
        if let Some(fps) = self.fps {
            if !(fps > 0.0 && fps.is_finite()) {
                return Err(argument(format!("fps {fps} must be positive")));
            }
        }
        Ok(())
    }

    pub fn fps(&self) -> f64 {
        self.fps.unwrap_or(DEFAULT_FPS)
    }

    pub fn segment_seconds(&self) -> f64 {
        self.segment.1 - self.segment.0
    }

    /// Mean repetition period in frames, assuming uniform repetitions.
    pub fn mean_period_frames(&self) -> f64 {
        self.segment_seconds() * self.fps() / self.count.value()
    }
}
