use rand::Rng;
use repcount_nn::Tensor;

use crate::datasets::{Frames, VideoData, VideoRecord};
use crate::error::{argument, domain, Result};

/// Smallest clip label handed to the relative-error loss.
pub const LABEL_FLOOR: f64 = 0.1;

/// Fixed-length clip of RGB frames as a `[3, T, H, W]` tensor in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub stride: usize,
    /// First and last sampled source frame (before boundary clamping).
    pub source_span: (usize, usize),
}

/// Annotated segment as a half-open frame range, clamped to the video.
pub fn segment_frames(record: &VideoRecord, n_frames: usize) -> Result<(usize, usize)> {
    let fps = record.fps();
    let start = ((record.segment.0 * fps).round() as usize).min(n_frames);
    let end = ((record.segment.1 * fps).round() as usize).min(n_frames);
    if end <= start {
        return Err(domain(format!("segment of {} covers no frames", record.video_id)));
    }
    Ok((start, end))
}

/// Frame indices `start, start + s, ...`, clamped to `last`.
pub fn clip_frame_indices(start: usize, stride: usize, clip_len: usize, last: usize) -> Vec<usize> {
    (0..clip_len).map(|t| (start + t * stride).min(last)).collect()
}

pub fn extract_clip(
    frames: &Frames,
    start: usize,
    stride: usize,
    clip_len: usize,
    resolution: usize,
    last: usize,
) -> Result<VideoClip> {
    if stride == 0 || clip_len == 0 || resolution == 0 {
        return Err(argument("stride, clip length and resolution must be positive"));
    }
    if frames.is_empty() {
        return Err(domain("video has no frames"));
    }
    let last = last.min(frames.len() - 1);
    let plane = resolution * resolution;
    let mut data = vec![0.0f32; 3 * clip_len * plane];
    for (t, idx) in clip_frame_indices(start, stride, clip_len, last).into_iter().enumerate() {
        let px = frames.frame_at_size(idx, resolution);
        for (p, rgb) in px.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[(c * clip_len + t) * plane + p] = rgb[c] as f32 / 255.0;
            }
        }
    }
    Ok(VideoClip {
        frames: Tensor::new(vec![3, clip_len, resolution, resolution], data)?,
        stride,
        source_span: (start, start + (clip_len - 1) * stride),
    })
}

/// Count attributed to a clip spanning `span` frames from `clip_start`,
/// proportional to its overlap with the segment.
pub fn scaled_label(count: f64, segment: (usize, usize), clip_start: usize, span: usize) -> f64 {
    let (s, e) = segment;
    let lo = clip_start.max(s);
    let hi = (clip_start + span).min(e);
    let overlap = hi.saturating_sub(lo) as f64;
    (count * overlap / (e - s) as f64).max(LABEL_FLOOR)
}

/// Draws a training clip at a random offset inside the segment, with its
/// proportionally scaled label.
pub fn clip_sampler<R: Rng + ?Sized>(
    video: &VideoData,
    stride: usize,
    clip_len: usize,
    resolution: usize,
    rng: &mut R,
) -> Result<(VideoClip, f64)> {
    let seg = segment_frames(&video.record, video.frames.len())?;
    let span = clip_len * stride;
    let latest = seg.1.saturating_sub(span).max(seg.0);
    let start = rng.random_range(seg.0..=latest);
    let clip = extract_clip(&video.frames, start, stride, clip_len, resolution, seg.1 - 1)?;
    Ok((clip, scaled_label(video.record.count.value(), seg, start, span)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn label_examples() {
        assert_eq!(scaled_label(6.0, (0, 100), 0, 100), 6.0);
        assert_eq!(scaled_label(6.0, (0, 100), 0, 640), 6.0);
        assert_eq!(scaled_label(6.0, (0, 100), 25, 50), 3.0);
        assert_eq!(scaled_label(6.0, (0, 100), 100, 50), LABEL_FLOOR);
    }

    #[test]
    fn clip_layout_and_clamping() {
        // frame i has every byte equal to i
        let data: Vec<u8> = (0..10u8).flat_map(|i| std::iter::repeat(i).take(2 * 2 * 3)).collect();
        let frames = Frames::new(25.0, 2, 2, data).unwrap();
        let clip = extract_clip(&frames, 2, 3, 4, 2, 9).unwrap();
        assert_eq!(clip.frames.shape(), &[3, 4, 2, 2]);
        assert_eq!(clip.source_span, (2, 11));
        let firsts: Vec<f32> = (0..4).map(|t| clip.frames.data()[t * 4] * 255.0).collect();
        assert_eq!(firsts, vec![2.0, 5.0, 8.0, 9.0]);
    }

    proptest! {
        #[test]
        fn stride_indices_match_direct_selection(start in 0usize..50, stride in 1usize..9, len in 1usize..70) {
            // resample at stride s, then take consecutive frames
            let resampled: Vec<usize> = (start..10_000).step_by(stride).collect();
            let direct = clip_frame_indices(start, stride, len, usize::MAX);
            prop_assert_eq!(&resampled[..len], &direct[..]);
            prop_assert_eq!(direct[len - 1] - direct[0], (len - 1) * stride);
        }

        #[test]
        fn label_is_bounded(count in 0.5f64..20.0, s in 0usize..50, len in 1usize..500, off in 0usize..600, span in 1usize..600) {
            let l = scaled_label(count, (s, s + len), off, span);
            prop_assert!(l >= LABEL_FLOOR && l <= count.max(LABEL_FLOOR) + 1e-12);
        }
    }
}
