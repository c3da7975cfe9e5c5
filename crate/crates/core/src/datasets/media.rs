//! Decoded media: RGB frame stacks and mono waveforms, plus the on-disk
//! formats the pipeline reads and writes (frame directories and PCM WAV).

use std::path::Path;
use std::process::Command;

use image::imageops::FilterType;
use image::RgbImage;

use crate::datasets::{DatasetManifest, VideoRecord};
use crate::error::{argument, Error, Result};

/// Frame stack stored as interleaved RGB bytes, `[N, H, W, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frames {
    pub fps: f64,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Frames {
    pub fn new(fps: f64, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        let frame = height * width * 3;
        if !(fps > 0.0) || frame == 0 || data.len() % frame != 0 {
            return Err(argument("frame buffer is not a whole number of HxWx3 frames"));
        }
        Ok(Self {
            fps,
            height,
            width,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len() / (self.height * self.width * 3)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.height * self.width * 3;
        &self.data[i * n..(i + 1) * n]
    }

    /// Frame `i` resampled to `size x size` when needed.
    pub fn frame_at_size(&self, i: usize, size: usize) -> Vec<u8> {
        if self.height == size && self.width == size {
            return self.frame(i).to_vec();
        }
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, self.frame(i).to_vec())
            .expect("frame buffer length checked at construction");
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle).into_raw()
    }
}

/// Mono audio with samples nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(argument("sample rate must be positive"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Samples between two times, clamped to the recording.
    pub fn window(&self, start_s: f64, end_s: f64) -> Waveform {
        let idx = |t: f64| ((t * self.sample_rate as f64).round().max(0.0) as usize).min(self.samples.len());
        let (a, b) = (idx(start_s), idx(end_s));
        Waveform {
            samples: self.samples[a..b.max(a)].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    /// Band-limited resampling to `rate`.
    pub fn resampled(&self, rate: u32) -> Result<Waveform> {
        if rate == self.sample_rate {
            return Ok(self.clone());
        }
        Waveform::new(crate::sound::resample(&self.samples, self.sample_rate, rate)?, rate)
    }
}

/// A record together with its decoded media.
#[derive(Clone, Debug)]
pub struct VideoData {
    pub record: VideoRecord,
    pub frames: Frames,
    pub audio: Option<Waveform>,
}

impl VideoData {
    /// Segment audio, if any.
    pub fn segment_audio(&self) -> Option<Waveform> {
        let (s, e) = self.record.segment;
        self.audio.as_ref().map(|a| a.window(s, e))
    }
}

fn media_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Media(format!("{}: {e}", path.display()))
}

/// Reads every PNG in `dir` in lexicographic file-name order.
pub fn read_frame_dir(dir: &Path, fps: f64) -> Result<Frames> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| media_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(media_err(dir, "no frames"));
    }
    let mut data = Vec::new();
    let mut dims = None;
    for p in &paths {
        let img = image::open(p).map_err(|e| media_err(p, e))?.to_rgb8();
        let d = img.dimensions();
        if *dims.get_or_insert(d) != d {
            return Err(media_err(p, "frame size differs from the first frame"));
        }
        data.extend_from_slice(img.as_raw());
    }
    let (w, h) = dims.unwrap();
    Frames::new(fps, h as usize, w as usize, data)
}

pub fn write_frame_dir(frames: &Frames, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for i in 0..frames.len() {
        let img = RgbImage::from_raw(frames.width as u32, frames.height as u32, frames.frame(i).to_vec())
            .expect("frame buffer length checked at construction");
        let path = dir.join(format!("{i:06}.png"));
        img.save(&path).map_err(|e| media_err(&path, e))?;
    }
    Ok(())
}

/// Reads a PCM WAV file, averaging channels to mono.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| media_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>(),
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
        }
    }
    .map_err(|e| media_err(path, e))?;
    let mono = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f32>() / channels as f32)
        .collect();
    Waveform::new(mono, spec.sample_rate)
}

/// Writes 16-bit mono PCM.
pub fn write_wav(wave: &Waveform, path: &Path) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| media_err(path, e))?;
    for &s in &wave.samples {
        w.write_sample((s * 32768.0).round().clamp(i16::MIN as f32, i16::MAX as f32) as i16)
            .map_err(|e| media_err(path, e))?;
    }
    w.finalize().map_err(|e| media_err(path, e))
}

fn find_decoder() -> Option<std::path::PathBuf> {
    let name = std::env::var_os("REPCOUNT_DECODER").unwrap_or_else(|| "ffmpeg".into());
    let candidate = Path::new(&name);
    if candidate.components().count() > 1 {
        return candidate.is_file().then(|| candidate.to_path_buf());
    }
    std::env::split_paths(&std::env::var_os("PATH")?)
        .map(|d| d.join(&name))
        .find(|p| p.is_file())
}

fn run_decoder(path: &Path, args: &[&str]) -> Result<Vec<u8>> {
    let decoder = find_decoder().ok_or_else(|| {
        Error::Dependency(format!(
            "no external media decoder found for {} (install ffmpeg or set REPCOUNT_DECODER)",
            path.display()
        ))
    })?;
    let out = Command::new(decoder)
        .args(["-v", "error", "-i"])
        .arg(path)
        .args(args)
        .output()
        .map_err(|e| media_err(path, e))?;
    if !out.status.success() {
        return Err(media_err(path, String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(out.stdout)
}

/// Decodes a container file to `size x size` RGB frames at `fps`.
pub fn decode_video(path: &Path, fps: f64, size: usize) -> Result<Frames> {
    let filter = format!("fps={fps},scale={size}:{size}");
    let data = run_decoder(path, &["-vf", &filter, "-f", "rawvideo", "-pix_fmt", "rgb24", "-"])?;
    Frames::new(fps, size, size, data).map_err(|e| media_err(path, e))
}

/// Decodes the audio track of a container file to mono at `rate`.
pub fn decode_audio(path: &Path, rate: u32) -> Result<Waveform> {
    let rate_s = rate.to_string();
    let data = run_decoder(path, &["-vn", "-ac", "1", "-ar", &rate_s, "-f", "s16le", "-"])?;
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
        .collect();
    Waveform::new(samples, rate)
}

/// Loads a record's media. Frame directories and WAV files are read
/// directly; anything else goes through the external decoder.
pub fn load_video(manifest: &DatasetManifest, record: &VideoRecord, size: usize, sample_rate: u32) -> Result<VideoData> {
    let media = manifest.resolve(&record.media_path);
    let fps = record.fps();
    let frames = if media.is_dir() {
        read_frame_dir(&media, fps)?
    } else if media.is_file() {
        decode_video(&media, fps, size)?
    } else {
        return Err(media_err(&media, "media not found"));
    };
    let audio = match &record.audio_path {
        Some(p) => {
            let p = manifest.resolve(p);
            let is_wav = p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav"));
            Some(if is_wav { read_wav(&p)? } else { decode_audio(&p, sample_rate)? }.resampled(sample_rate)?)
        }
        None => None,
    };
    Ok(VideoData {
        record: record.clone(),
        frames,
        audio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u8> = (0..3 * 4 * 5 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let frames = Frames::new(25.0, 4, 5, data).unwrap();
        write_frame_dir(&frames, dir.path()).unwrap();
        assert_eq!(read_frame_dir(dir.path(), 25.0).unwrap(), frames);
    }

    #[test]
    fn wav_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new((0..400).map(|i| (i as f32 * 0.05).sin() * 0.8).collect(), 16000).unwrap();
        write_wav(&w, &path).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.sample_rate, 16000);
        assert!(w.samples.iter().zip(&r.samples).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn window_clamps() {
        let w = Waveform::new(vec![0.0; 100], 10).unwrap();
        assert_eq!(w.window(2.0, 3.0).samples.len(), 10);
        assert_eq!(w.window(9.5, 20.0).samples.len(), 5);
        assert!(w.window(20.0, 30.0).samples.is_empty());
    }

    #[test]
    fn missing_media_is_a_media_error() {
        let m = DatasetManifest::default();
        let r: VideoRecord = serde_json::from_str(
            r#"{"video_id":"x","media_path":"/nonexistent/x","split":"test","count":2,"segment":[0,1]}"#,
        )
        .unwrap();
        assert!(matches!(load_video(&m, &r, 16, 16000), Err(Error::Media(_))));
    }
}
