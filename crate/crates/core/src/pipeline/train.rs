use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use repcount_nn::{Init, Sgd, SgdConfig, Tensor};
use serde::{Deserialize, Serialize};

use crate::datasets::{clip_sampler, extract_clip, segment_frames, VideoData};
use crate::error::{argument, Error, Result};
use crate::head::{HeadConfig, Supervision};
use crate::metrics::{mae, Modality};
use crate::pipeline::config::{RunConfig, Stage, StreamTraining};
use crate::pipeline::infer::{choose_stride, sight_video_count, stride_features, Aggregation, Models};
use crate::reliability::{train_gate, EmpiricalPredictionTable, EpochEvent, GateSample, ReliabilityGate};
use crate::sight::SightStream;
use crate::sound::SoundStream;
use crate::stream::CountingStream;
use crate::stride::{mine_from_predictions, positive_stride, train_scorer, StrideMiningResult, StrideSample, StrideScorer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rel_mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub epochs: Vec<EpochRecord>,
    /// Videos left out of the stage, with the reason.
    #[serde(default)]
    pub skipped: Vec<String>,
}

impl StageRecord {
    fn new(stage: Stage) -> Self {
        Self {
            stage,
            epochs: Vec::new(),
            skipped: Vec::new(),
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

/// Smallest stride whose clip spans two mean periods, or `sk` if none does.
pub fn oracle_stride(video: &VideoData, clip_len: usize, sk: usize) -> usize {
    positive_stride(clip_len, video.record.mean_period_frames(), sk).unwrap_or(sk)
}

/// Action-class indices for cross-entropy supervision, sorted by name.
fn action_labels(videos: &[&VideoData], head: &HeadConfig) -> Result<Option<Vec<usize>>> {
    if head.supervision != Supervision::ActionClassCe {
        return Ok(None);
    }
    let mut names: Vec<&str> = Vec::new();
    for v in videos {
        let name = v
            .record
            .action_class
            .as_deref()
            .ok_or_else(|| argument(format!("{} has no action class", v.record.video_id)))?;
        names.push(name);
    }
    let mut classes = names.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() > head.num_classes {
        return Err(argument(format!(
            "{} action classes exceed {} repetition classes",
            classes.len(),
            head.num_classes
        )));
    }
    Ok(Some(names.iter().map(|n| classes.binary_search(n).unwrap()).collect()))
}

struct FitHooks<'a, M, S, V, P> {
    net: fn(&mut M) -> &mut CountingStream,
    sample: S,
    validate: V,
    predict_train: P,
    modality: Modality,
    theta: f64,
    events: &'a mut Vec<EpochEvent>,
}

/// Shared epoch loop for both streams: shuffled mini-batches, per-epoch
/// validation, and training-set predictions for the empirical table in
/// epochs that qualify (and always in the last one).
fn fit_stream<M, R, S, V, P>(
    model: &mut M,
    n_train: usize,
    train: &StreamTraining,
    action: Option<&[usize]>,
    rng: &mut R,
    mut hooks: FitHooks<'_, M, S, V, P>,
    record: &mut StageRecord,
) -> Result<()>
where
    R: Rng + ?Sized,
    S: FnMut(usize, &mut R) -> Result<(Tensor, f64)>,
    V: FnMut(&M) -> Result<Option<f64>>,
    P: FnMut(&M) -> Result<BTreeMap<String, f64>>,
{
    if n_train == 0 {
        return Err(argument("no training videos"));
    }
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 0..train.epochs {
        order.shuffle(rng);
        let opt = Sgd::new(SgdConfig {
            learning_rate: train.learning_rate(epoch),
            ..train.sgd
        });
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size) {
            let mut xs = Vec::with_capacity(batch.len());
            let mut ls = Vec::with_capacity(batch.len());
            for &i in batch {
                let (x, l) = (hooks.sample)(i, rng)?;
                xs.push(x);
                ls.push(l);
            }
            let acts: Option<Vec<usize>> = action.map(|a| batch.iter().map(|&i| a[i]).collect());
            let loss = (hooks.net)(model).train_batch(&xs, &ls, acts.as_deref(), &opt)?;
            if !loss.total.is_finite() {
                return Err(Error::Domain(format!("{:?} loss diverged in epoch {epoch}", hooks.modality)));
            }
            total += loss.total * batch.len() as f64;
        }
        let val = (hooks.validate)(model)?;
        let is_final = epoch + 1 == train.epochs;
        let qualifies = val.is_some_and(|v| v < hooks.theta);
        let predictions = if qualifies || is_final {
            Some((hooks.predict_train)(model)?)
        } else {
            None
        };
        let train_loss = total / n_train as f64;
        log::info!(
            "{:?} epoch {epoch}: loss {train_loss:.4} val rel-MAE {}",
            hooks.modality,
            val.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
        hooks.events.push(EpochEvent {
            modality: hooks.modality,
            epoch,
            val_rel_mae: val.unwrap_or(f64::INFINITY),
            predictions,
            is_final,
        });
        record.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_rel_mae: val,
        });
    }
    Ok(())
}

fn labels(videos: &[&VideoData]) -> Vec<f64> {
    videos.iter().map(|v| v.record.count.value()).collect()
}

/// Video-level sight counts at each video's oracle stride.
pub fn sight_oracle_counts(model: &SightStream, videos: &[&VideoData], sk: usize) -> Result<Vec<f64>> {
    videos
        .iter()
        .map(|v| sight_video_count(model, v, oracle_stride(v, model.config.clip_len, sk), Aggregation::Sum))
        .collect()
}

/// Trains the sight stream on clips drawn at each video's oracle stride.
pub fn train_sight<R: Rng + ?Sized>(
    train: &[&VideoData],
    val: &[&VideoData],
    cfg: &RunConfig,
    rng: &mut R,
    events: &mut Vec<EpochEvent>,
) -> Result<(SightStream, StageRecord)> {
    let mc = cfg.sight.model.clone();
    let sk = cfg.stride.sk_train;
    let mut model = SightStream::new(mc.clone(), Init::HE, rng)?;
    let action = action_labels(train, &mc.head)?;
    let strides: Vec<usize> = train.iter().map(|v| oracle_stride(v, mc.clip_len, sk)).collect();
    let val_labels = labels(val);
    let mut record = StageRecord::new(Stage::TrainSight);
    let hooks = FitHooks {
        net: |m: &mut SightStream| &mut m.net,
        sample: |i: usize, rng: &mut R| {
            let (clip, label) = clip_sampler(train[i], strides[i], mc.clip_len, mc.resolution, rng)?;
            Ok((clip.frames, label))
        },
        validate: |m: &SightStream| -> Result<Option<f64>> {
            if val.is_empty() {
                return Ok(None);
            }
            Ok(Some(mae(&sight_oracle_counts(m, val, sk)?, &val_labels)?))
        },
        predict_train: |m: &SightStream| -> Result<BTreeMap<String, f64>> {
            let counts = sight_oracle_counts(m, train, sk)?;
            Ok(train.iter().map(|v| v.record.video_id.clone()).zip(counts).collect())
        },
        modality: Modality::Sight,
        theta: cfg.reliability.theta_r_v,
        events,
    };
    fit_stream(&mut model, train.len(), &cfg.sight.train, action.as_deref(), rng, hooks, &mut record)?;
    Ok((model, record))
}

/// Spectrogram segments for a video's annotated interval.
pub fn sound_inputs(model: &SoundStream, video: &VideoData) -> Result<Vec<Tensor>> {
    let wave = video
        .segment_audio()
        .ok_or_else(|| Error::Media(format!("{} has no audio track", video.record.video_id)))?;
    let mut wave = wave;
    let n = model.config.spectrogram.fft_size;
    if wave.samples.len() < n {
        wave.samples.resize(n, 0.0);
    }
    model.segments(&wave)
}

pub fn sound_counts(model: &SoundStream, inputs: &[Vec<Tensor>]) -> Result<Vec<f64>> {
    inputs.iter().map(|s| Ok(model.sound_count(s)?.prediction.value)).collect()
}

/// Trains the sound stream on every segment of every training video, each
/// labelled with its share of the count.
pub fn train_sound<R: Rng + ?Sized>(
    train: &[&VideoData],
    val: &[&VideoData],
    cfg: &RunConfig,
    rng: &mut R,
    events: &mut Vec<EpochEvent>,
) -> Result<(SoundStream, StageRecord)> {
    let mc = cfg.sound.model.clone();
    let mut model = SoundStream::new(mc.clone(), Init::HE, rng)?;
    let mut record = StageRecord::new(Stage::TrainSound);
    let with_audio: Vec<&VideoData> = train
        .iter()
        .copied()
        .filter(|v| {
            let ok = v.audio.is_some();
            if !ok {
                record.skipped.push(format!("{}: no audio", v.record.video_id));
            }
            ok
        })
        .collect();
    let val: Vec<&VideoData> = val.iter().copied().filter(|v| v.audio.is_some()).collect();
    let train_in = with_audio.iter().map(|v| sound_inputs(&model, v)).collect::<Result<Vec<_>>>()?;
    let val_in = val.iter().map(|v| sound_inputs(&model, v)).collect::<Result<Vec<_>>>()?;
    let n_seg = mc.n_segments;
    let mut segments = Vec::new();
    let mut seg_videos = Vec::new();
    for (vi, segs) in train_in.iter().enumerate() {
        for s in segs {
            segments.push(s.clone());
            seg_videos.push(vi);
        }
    }
    let seg_labels: Vec<f64> = seg_videos
        .iter()
        .map(|&vi| with_audio[vi].record.count.value() / n_seg as f64)
        .collect();
    let action = action_labels(&with_audio, &mc.head)?.map(|a| seg_videos.iter().map(|&vi| a[vi]).collect::<Vec<_>>());
    let val_labels = labels(&val);
    let hooks = FitHooks {
        net: |m: &mut SoundStream| &mut m.net,
        sample: |i: usize, _: &mut R| Ok((segments[i].clone(), seg_labels[i])),
        validate: |m: &SoundStream| -> Result<Option<f64>> {
            if val.is_empty() {
                return Ok(None);
            }
            Ok(Some(mae(&sound_counts(m, &val_in)?, &val_labels)?))
        },
        predict_train: |m: &SoundStream| -> Result<BTreeMap<String, f64>> {
            let counts = sound_counts(m, &train_in)?;
            Ok(with_audio.iter().map(|v| v.record.video_id.clone()).zip(counts).collect())
        },
        modality: Modality::Sound,
        theta: cfg.reliability.theta_r_a,
        events,
    };
    fit_stream(&mut model, segments.len(), &cfg.sound.train, action.as_deref(), rng, hooks, &mut record)?;
    Ok((model, record))
}

/// Predicts `C^k` for `k = 1..=sk_train` with the trained sight stream and
/// applies the mining rule.
pub fn mine_strides(video: &VideoData, sight: &SightStream, cfg: &RunConfig) -> Result<Option<StrideMiningResult>> {
    let sk = cfg.stride.sk_train;
    let clip_len = sight.config.clip_len;
    let period = video.record.mean_period_frames();
    if positive_stride(clip_len, period, sk).is_none() {
        return Ok(None);
    }
    let mut counts = BTreeMap::new();
    for k in 1..=sk {
        counts.insert(k, sight_video_count(sight, video, k, Aggregation::Sum)?);
    }
    Ok(mine_from_predictions(
        &video.record.video_id,
        &counts,
        clip_len,
        period,
        sk,
        cfg.stride.theta_s,
    ))
}

/// Builds ranking samples from mining results.
pub fn stride_samples(
    videos: &[&VideoData],
    mined: &[StrideMiningResult],
    sight: &SightStream,
    sound: Option<&SoundStream>,
) -> Result<Vec<StrideSample>> {
    let by_id: BTreeMap<&str, &VideoData> = videos.iter().map(|v| (v.record.video_id.as_str(), *v)).collect();
    let mut out = Vec::with_capacity(mined.len());
    for m in mined {
        let Some(video) = by_id.get(m.video_id.as_str()) else {
            continue;
        };
        let positive = stride_features(video, sight, sound, m.positive_stride)?;
        let negatives = m
            .negative_strides
            .iter()
            .map(|&k| stride_features(video, sight, sound, k))
            .collect::<Result<Vec<_>>>()?;
        out.push(StrideSample {
            video_id: m.video_id.clone(),
            positive,
            negatives,
        });
    }
    Ok(out)
}

pub fn run_mining(videos: &[&VideoData], sight: &SightStream, cfg: &RunConfig, record: &mut StageRecord) -> Result<Vec<StrideMiningResult>> {
    let mut mined = Vec::new();
    for v in videos {
        match mine_strides(v, sight, cfg)? {
            Some(m) => mined.push(m),
            None => {
                log::warn!("{}: no stride up to {} spans two repetitions; skipped", v.record.video_id, cfg.stride.sk_train);
                record.skipped.push(format!("{}: no covering stride", v.record.video_id));
            }
        }
    }
    Ok(mined)
}

/// Trains the stride scorer from mining results on frozen stream features.
pub fn train_stride<R: Rng + ?Sized>(
    train: &[&VideoData],
    mined: &[StrideMiningResult],
    sight: &SightStream,
    sound: Option<&SoundStream>,
    cfg: &RunConfig,
    rng: &mut R,
    record: &mut StageRecord,
) -> Result<StrideScorer> {
    let sc = &cfg.stride;
    let sound = if sc.audio_enabled { sound } else { None };
    if sc.audio_enabled && sound.is_none() {
        return Err(Error::Dependency("sound stream weights (stride scorer uses audio; disable audio_enabled for visual-only)".into()));
    }
    let samples = stride_samples(train, mined, sight, sound)?;
    let first = samples.first().ok_or_else(|| argument("no mined videos to train the stride scorer"))?;
    let v_ch = first.positive.visual.shape()[0];
    let a_ch = first.positive.audio.as_ref().map(|a| a.shape()[0]);
    let mut scorer = StrideScorer::new(v_ch, a_ch, sc.width, Init::HE, rng)?;
    for (epoch, loss) in train_scorer(&mut scorer, &samples, sc, rng)?.into_iter().enumerate() {
        log::info!("stride epoch {epoch}: ranking loss {loss:.4}");
        record.epochs.push(EpochRecord {
            epoch,
            train_loss: loss,
            val_rel_mae: None,
        });
    }
    Ok(scorer)
}

/// Gate inputs for one video: the sight feature of the first clip at the
/// chosen stride and the sound tap of the first segment.
pub fn gate_inputs(video: &VideoData, models: &Models, cfg: &RunConfig) -> Result<(Vec<f32>, Tensor, usize)> {
    let sound = models
        .sound
        .as_ref()
        .ok_or_else(|| Error::Dependency("sound stream weights".into()))?;
    let stride = match cfg.inference.fixed_stride {
        Some(s) => s,
        None => choose_stride(video, models, cfg.inference.sk, true)?.0,
    };
    let (s, e) = segment_frames(&video.record, video.frames.len())?;
    let c = &models.sight.config;
    let clip = extract_clip(&video.frames, s, stride, c.clip_len, c.resolution, e - 1)?;
    let (feature, _) = models.sight.extract_visual_features(&clip)?;
    let segs = sound_inputs(sound, video)?;
    Ok((feature, sound.tap(&segs[0])?, stride))
}

/// Trains the reliability gate on the empirical prediction table.
pub fn train_reliability<R: Rng + ?Sized>(
    train: &[&VideoData],
    table: &EmpiricalPredictionTable,
    models: &Models,
    cfg: &RunConfig,
    rng: &mut R,
    record: &mut StageRecord,
) -> Result<ReliabilityGate> {
    let mut samples = Vec::new();
    for v in train {
        let Some(entry) = table.per_video.get(&v.record.video_id) else {
            record.skipped.push(format!("{}: not in empirical table", v.record.video_id));
            continue;
        };
        if v.audio.is_none() {
            record.skipped.push(format!("{}: no audio", v.record.video_id));
            continue;
        }
        let (visual, audio_tap, _) = gate_inputs(v, models, cfg)?;
        samples.push(GateSample {
            visual,
            audio_tap,
            sight: entry.avg_sight,
            sound: entry.avg_sound,
            label: v.record.count.value(),
        });
    }
    let first = samples.first().ok_or_else(|| argument("no gate training samples"))?;
    let mut gate = ReliabilityGate::new(first.visual.len(), first.audio_tap.shape()[0], cfg.reliability.width, Init::HE, rng)?;
    for (epoch, loss) in train_gate(&mut gate, &samples, &cfg.reliability, rng)?.into_iter().enumerate() {
        log::info!("gate epoch {epoch}: fused rel-MAE {loss:.4}");
        record.epochs.push(EpochRecord {
            epoch,
            train_loss: loss,
            val_rel_mae: None,
        });
    }
    Ok(gate)
}

pub fn stage_record(stage: Stage) -> StageRecord {
    StageRecord::new(stage)
}
