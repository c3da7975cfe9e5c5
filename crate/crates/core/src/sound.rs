//! Audio counting stream: STFT front end, time-axis resizing into fixed
//! segments, and a 2D residual network with the shared counting head.

use std::f64::consts::PI;

use rand::Rng;
use repcount_nn::{ConvBlock, ConvBlockSpec, Init, ResidualBlock, Tensor};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::datasets::Waveform;
use crate::error::{argument, domain, Result};
use crate::head::{CountingHead, HeadConfig, HeadOutput, HEAD_INIT};
use crate::metrics::{CountPrediction, Modality};
use crate::stream::{Backbone, CountingStream, Layer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Hann,
    Rectangular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub window: WindowKind,
    pub hop: usize,
    pub log_compression: bool,
    pub segment_frames: usize,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            fft_size: 512,
            window: WindowKind::Hann,
            hop: 250,
            log_compression: true,
            segment_frames: 500,
        }
    }
}

impl SpectrogramConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.fft_size < 2 || self.hop == 0 || self.segment_frames == 0 {
            return Err(argument("spectrogram sizes must be positive"));
        }
        Ok(())
    }
}

/// Magnitudes laid out frequency-major, `[bins][frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<f32>,
}

impl Spectrogram {
    pub fn at(&self, bin: usize, frame: usize) -> f32 {
        self.data[bin * self.frames + frame]
    }

    /// Single-channel `[1, 1, bins, frames]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.bins, self.frames], self.data.clone()).expect("data length matches dims")
    }
}

fn window(kind: WindowKind, n: usize) -> Vec<f64> {
    match kind {
        WindowKind::Hann => (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect(),
        WindowKind::Rectangular => vec![1.0; n],
    }
}

/// One-sided STFT magnitudes, optionally `log(1 + x)` compressed. The
/// waveform is resampled first if its rate differs from the config.
pub fn stft_spectrogram(wave: &Waveform, config: &SpectrogramConfig) -> Result<Spectrogram> {
    config.validate()?;
    let wave = wave.resampled(config.sample_rate)?;
    let n = config.fft_size;
    if wave.samples.len() < n {
        return Err(domain(format!(
            "waveform of {} samples is shorter than one {n}-sample window",
            wave.samples.len()
        )));
    }
    let frames = (wave.samples.len() - n) / config.hop + 1;
    let bins = config.bins();
    let win = window(config.window, n);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut data = vec![0.0f32; bins * frames];
    for f in 0..frames {
        let off = f * config.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(wave.samples[off + i] as f64 * win[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            let m = buf[k].norm();
            data[k * frames + f] = if config.log_compression { m.ln_1p() } else { m } as f32;
        }
    }
    Ok(Spectrogram { bins, frames, data })
}

/// Linearly resamples the time axis to `n_segments * segment_frames` frames
/// (endpoints aligned) and cuts it into consecutive segments.
pub fn segment_and_resize(spec: &Spectrogram, n_segments: usize, segment_frames: usize) -> Result<Vec<Spectrogram>> {
    if n_segments == 0 || segment_frames == 0 {
        return Err(argument("need at least one segment of at least one frame"));
    }
    if spec.frames == 0 || spec.bins == 0 {
        return Err(domain("empty spectrogram"));
    }
    let total = n_segments * segment_frames;
    let scale = if total > 1 {
        (spec.frames - 1) as f64 / (total - 1) as f64
    } else {
        0.0
    };
    let src: Vec<(usize, usize, f32)> = (0..total)
        .map(|j| {
            let x = j as f64 * scale;
            let lo = (x.floor() as usize).min(spec.frames - 1);
            let hi = (lo + 1).min(spec.frames - 1);
            (lo, hi, (x - lo as f64) as f32)
        })
        .collect();
    Ok((0..n_segments)
        .map(|s| {
            let mut data = Vec::with_capacity(spec.bins * segment_frames);
            for k in 0..spec.bins {
                let row = &spec.data[k * spec.frames..(k + 1) * spec.frames];
                for &(lo, hi, w) in &src[s * segment_frames..(s + 1) * segment_frames] {
                    data.push(row[lo] + (row[hi] - row[lo]) * w);
                }
            }
            Spectrogram {
                bins: spec.bins,
                frames: segment_frames,
                data,
            }
        })
        .collect())
}

/// Band-limited resampling with a Hann-windowed sinc kernel evaluated on a
/// fixed grid of fractional phases.
pub fn resample(samples: &[f32], from: u32, to: u32) -> Result<Vec<f32>> {
    if from == 0 || to == 0 {
        return Err(argument("sample rates must be positive"));
    }
    if from == to || samples.is_empty() {
        return Ok(samples.to_vec());
    }
    const HALF_TAPS: isize = 16;
    const PHASES: usize = 256;
    let ratio = to as f64 / from as f64;
    let cutoff = ratio.min(1.0);
    let span = HALF_TAPS as f64 / cutoff;
    let kernel = |d: f64| -> f64 {
        if d.abs() >= span {
            return 0.0;
        }
        let x = d * cutoff;
        let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
        let w = 0.5 + 0.5 * (PI * d / span).cos();
        cutoff * sinc * w
    };
    let reach = span.ceil() as isize;
    let table: Vec<Vec<f64>> = (0..PHASES)
        .map(|p| {
            let frac = p as f64 / PHASES as f64;
            (-reach..=reach).map(|k| kernel(k as f64 - frac)).collect()
        })
        .collect();
    let out_len = ((samples.len() as f64) * ratio).round() as usize;
    let n = samples.len() as isize;
    Ok((0..out_len)
        .map(|j| {
            let t = j as f64 / ratio;
            let base = t.floor() as isize;
            let phase = (((t - base as f64) * PHASES as f64).round() as usize).min(PHASES - 1);
            let taps = &table[phase];
            let mut acc = 0.0;
            for (i, k) in (-reach..=reach).enumerate() {
                let idx = base + k;
                if (0..n).contains(&idx) {
                    acc += samples[idx as usize] as f64 * taps[i];
                }
            }
            acc as f32
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoundVariant {
    /// ResNet-18 layout: 64/128/256/512 channels, two blocks per stage.
    Full,
    /// One narrow residual block per stage.
    Tiny,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoundConfig {
    pub variant: SoundVariant,
    pub spectrogram: SpectrogramConfig,
    /// Segments the counted interval is resized into.
    pub n_segments: usize,
    pub head: HeadConfig,
}

impl Default for SoundConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl SoundConfig {
    pub fn full() -> Self {
        Self {
            variant: SoundVariant::Full,
            spectrogram: SpectrogramConfig::default(),
            n_segments: 1,
            head: HeadConfig::sound(),
        }
    }

    pub fn tiny() -> Self {
        Self {
            variant: SoundVariant::Tiny,
            head: HeadConfig {
                feature_dim: 64,
                ..HeadConfig::sound()
            },
            ..Self::full()
        }
    }
}

/// Output for one recording: the summed count over its segments.
#[derive(Clone, Debug)]
pub struct SoundOutput {
    pub prediction: CountPrediction,
    pub heads: Vec<HeadOutput>,
    /// Tapped feature map of the first segment.
    pub tap: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoundStream {
    pub config: SoundConfig,
    pub net: CountingStream,
}

impl SoundStream {
    pub fn new<R: Rng + ?Sized>(config: SoundConfig, init: Init, rng: &mut R) -> Result<Self> {
        config.spectrogram.validate()?;
        let f = config.head.feature_dim;
        let stem = |o, k, pool: [usize; 3], rng: &mut R| -> Result<Layer> {
            let spec = ConvBlockSpec {
                in_channels: 1,
                out_channels: o,
                kernel: [1, k, k],
                stride: [1, 2, 2],
                separable: false,
                pool,
                instance_norm: false,
            };
            Ok(Layer::Conv(ConvBlock::new(spec, init, rng)?))
        };
        let res = |i, o, s: usize, rng: &mut R| -> Result<Layer> {
            Ok(Layer::Residual(ResidualBlock::new(i, o, [1, 3, 3], [1, s, s], init, rng)?))
        };
        let (layers, tap) = match config.variant {
            SoundVariant::Tiny => (
                vec![
                    stem(8, 3, [1, 8, 2], rng)?,
                    res(8, 8, 1, rng)?,
                    res(8, 16, 2, rng)?,
                    res(16, 32, 2, rng)?,
                    res(32, f, 2, rng)?,
                ],
                3,
            ),
            SoundVariant::Full => (
                vec![
                    stem(64, 7, [1, 2, 2], rng)?,
                    res(64, 64, 1, rng)?,
                    res(64, 64, 1, rng)?,
                    res(64, 128, 2, rng)?,
                    res(128, 128, 1, rng)?,
                    res(128, 256, 2, rng)?,
                    res(256, 256, 1, rng)?,
                    res(256, 512, 2, rng)?,
                    res(512, f, 1, rng)?,
                ],
                6,
            ),
        };
        let shape = vec![1, 1, config.spectrogram.bins(), config.spectrogram.segment_frames];
        let backbone = Backbone::new(layers, tap, shape)?;
        let head_init = if init == Init::Zeros { Init::Zeros } else { HEAD_INIT };
        let head = CountingHead::new(config.head, head_init, rng)?;
        Ok(Self {
            net: CountingStream::new(Modality::Sound, backbone, head)?,
            config,
        })
    }

    /// Spectrogram segments of a waveform as network inputs.
    pub fn segments(&self, wave: &Waveform) -> Result<Vec<Tensor>> {
        let spec = stft_spectrogram(wave, &self.config.spectrogram)?;
        Ok(segment_and_resize(&spec, self.config.n_segments, self.config.spectrogram.segment_frames)?
            .iter()
            .map(Spectrogram::to_tensor)
            .collect())
    }

    /// Sums per-segment counts into one sound prediction.
    pub fn sound_count(&self, segments: &[Tensor]) -> Result<SoundOutput> {
        let first = segments.first().ok_or_else(|| argument("no spectrogram segments"))?;
        let tap = self.net.backbone.tap(first)?;
        let mut total = 0.0;
        let mut heads = Vec::with_capacity(segments.len());
        for s in segments {
            let out = self.net.run(s)?;
            total += out.prediction.value;
            heads.push(out.head);
        }
        Ok(SoundOutput {
            prediction: CountPrediction::clamped(total, Modality::Sound),
            heads,
            tap,
        })
    }

    pub fn tap(&self, segment: &Tensor) -> Result<Tensor> {
        self.net.backbone.tap(segment)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, n: usize, rate: u32) -> Waveform {
        Waveform::new(
            (0..n).map(|i| (2.0 * PI * freq * i as f64 / rate as f64).sin() as f32 * 0.5).collect(),
            rate,
        )
        .unwrap()
    }

    #[test]
    fn bin_centred_sine_has_one_dominant_row() {
        let cfg = SpectrogramConfig::default();
        // bin 40 of a 512-point transform at 16 kHz
        let spec = stft_spectrogram(&sine(40.0 * 16000.0 / 512.0, 4000, 16000), &cfg).unwrap();
        assert_eq!(spec.bins, 257);
        for f in 0..spec.frames {
            let best = (0..spec.bins).max_by(|&a, &b| spec.at(a, f).total_cmp(&spec.at(b, f))).unwrap();
            assert_eq!(best, 40);
        }
    }

    #[test]
    fn zero_wave_and_frame_count() {
        let cfg = SpectrogramConfig::default();
        let zero = stft_spectrogram(&Waveform::new(vec![0.0; 3000], 16000).unwrap(), &cfg).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = Waveform::new((0..16000).map(|_| rng.random_range(-1.0..1.0)).collect(), 16000).unwrap();
        let spec = stft_spectrogram(&noise, &cfg).unwrap();
        // frame-count oracle: windows that fit when stepping by the hop
        let oracle = (0..).take_while(|f| f * 250 + 512 <= 16000).count();
        assert_eq!(spec.frames, oracle);
        assert_eq!(spec.frames, 62);
        assert!(matches!(
            stft_spectrogram(&Waveform::new(vec![0.0; 100], 16000).unwrap(), &cfg),
            Err(crate::Error::Domain(_))
        ));
    }

    #[test]
    fn magnitudes_scale_linearly_before_compression() {
        let cfg = SpectrogramConfig {
            log_compression: false,
            ..Default::default()
        };
        let w = sine(1234.0, 2000, 16000);
        let w3 = Waveform::new(w.samples.iter().map(|s| s * 3.0).collect(), 16000).unwrap();
        let a = stft_spectrogram(&w, &cfg).unwrap();
        let b = stft_spectrogram(&w3, &cfg).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((3.0 * x - y).abs() <= 1e-4 * y.abs().max(1.0));
        }
    }

    fn ramp(frames: usize) -> Spectrogram {
        Spectrogram {
            bins: 2,
            frames,
            data: (0..2 * frames).map(|i| (i % frames) as f32).collect(),
        }
    }

    #[test]
    fn resize_examples() {
        let s = ramp(500);
        assert_eq!(segment_and_resize(&s, 1, 500).unwrap()[0], s);
        let c = Spectrogram {
            bins: 1,
            frames: 250,
            data: vec![2.5; 250],
        };
        let r = segment_and_resize(&c, 1, 500).unwrap();
        assert!(r[0].data.iter().all(|&v| v == 2.5));
        let r = segment_and_resize(&ramp(1000), 1, 500).unwrap();
        assert_eq!(r[0].at(0, 0), 0.0);
        assert_eq!(r[0].at(1, 499), 999.0);
        for j in 1..500 {
            let step = r[0].at(0, j) - r[0].at(0, j - 1);
            assert!((step - 999.0 / 499.0).abs() < 1e-3);
        }
        let empty = Spectrogram {
            bins: 1,
            frames: 0,
            data: vec![],
        };
        assert!(segment_and_resize(&empty, 1, 500).is_err());
    }

    #[test]
    fn resample_preserves_low_tones() {
        let w = sine(440.0, 8000, 8000);
        let up = resample(&w.samples, 8000, 16000).unwrap();
        assert_eq!(up.len(), 16000);
        let expect = sine(440.0, 16000, 16000);
        let err = up[100..15900]
            .iter()
            .zip(&expect.samples[100..15900])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 0.01, "max error {err}");
    }

    #[test]
    fn zero_model_and_summation() {
        let cfg = SoundConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = SoundStream::new(cfg.clone(), Init::Zeros, &mut rng).unwrap();
        let seg = Tensor::zeros(&[1, 1, 257, 500]);
        let out = model.sound_count(&[seg.clone()]).unwrap();
        assert_eq!(out.prediction.value, 0.0);
        assert_eq!(out.tap.shape(), &[32, 1, 4, 32]);

        let model = SoundStream::new(cfg, Init::HE, &mut rng).unwrap();
        let a = model.net.run(&seg).unwrap().prediction.value;
        let mut seg2 = seg.clone();
        seg2.data_mut()[7] = 3.0;
        let b = model.net.run(&seg2).unwrap().prediction.value;
        let both = model.sound_count(&[seg, seg2]).unwrap().prediction.value;
        assert!((both - (a + b)).abs() < 1e-9);
    }

    #[test]
    fn full_variant_shapes() {
        let mut cfg = SoundConfig::full();
        cfg.spectrogram.fft_size = 128;
        cfg.spectrogram.segment_frames = 64;
        let model = SoundStream::new(cfg, Init::HE, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (feat, tap) = model.net.backbone.forward(&Tensor::zeros(&[1, 1, 65, 64])).unwrap();
        assert_eq!(feat.len(), 512);
        assert_eq!(tap.shape()[0], 256);
    }

    proptest! {
        #[test]
        fn resize_always_gives_segment_frames(frames in 1usize..900, n in 1usize..4) {
            let s = ramp(frames);
            let out = segment_and_resize(&s, n, 500).unwrap();
            prop_assert_eq!(out.len(), n);
            prop_assert!(out.iter().all(|seg| seg.frames == 500 && seg.data.len() == 1000));
        }
    }
}
