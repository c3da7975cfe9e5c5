use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datasets::{load_video, DatasetManifest, Split, VideoData};
use crate::error::{Error, Result};
use crate::metrics::Modality;
use crate::pipeline::config::{RunConfig, Stage};
use crate::pipeline::infer::Models;
use crate::pipeline::train::{
    run_mining, stage_record, train_reliability, train_sight, train_sound, train_stride, StageRecord,
};
use crate::reliability::{collect_empirical_predictions, EmpiricalPredictionTable, EpochEvent, ReliabilityGate};
use crate::sight::SightStream;
use crate::sound::SoundStream;
use crate::stride::{load_mining, save_mining, StrideMiningResult, StrideScorer};

/// Independent random stream per stage, so rerunning one stage does not
/// depend on which stages ran before it.
pub fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64 + 1);
    rng
}

/// Everything produced by training all four parts in memory.
#[derive(Clone, Debug)]
pub struct TrainedPipeline {
    pub models: Models,
    pub records: Vec<StageRecord>,
    pub events: Vec<EpochEvent>,
    pub mined: Vec<StrideMiningResult>,
    pub table: EmpiricalPredictionTable,
}

/// Sight and sound streams, then the stride scorer on frozen streams, then
/// the reliability gate on empirical predictions.
pub fn train_pipeline(cfg: &RunConfig, train: &[&VideoData], val: &[&VideoData]) -> Result<TrainedPipeline> {
    cfg.validate()?;
    let mut events = Vec::new();
    let (sight, r_sight) = train_sight(train, val, cfg, &mut stage_rng(cfg.seed, Stage::TrainSight), &mut events)?;
    let (sound, r_sound) = train_sound(train, val, cfg, &mut stage_rng(cfg.seed, Stage::TrainSound), &mut events)?;
    let mut r_stride = stage_record(Stage::TrainStride);
    let mined = run_mining(train, &sight, cfg, &mut r_stride)?;
    let stride = train_stride(
        train,
        &mined,
        &sight,
        Some(&sound),
        cfg,
        &mut stage_rng(cfg.seed, Stage::TrainStride),
        &mut r_stride,
    )?;
    let mut models = Models {
        sight,
        sound: Some(sound),
        stride: Some(stride),
        gate: None,
    };
    let table = collect_empirical_predictions(&events, &cfg.reliability);
    let mut r_gate = stage_record(Stage::TrainReliability);
    let gate = train_reliability(
        train,
        &table,
        &models,
        cfg,
        &mut stage_rng(cfg.seed, Stage::TrainReliability),
        &mut r_gate,
    )?;
    models.gate = Some(gate);
    Ok(TrainedPipeline {
        models,
        records: vec![r_sight, r_sound, r_stride, r_gate],
        events,
        mined,
        table,
    })
}

/// Summary written next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: Option<RunConfig>,
    pub stages: Vec<StageRecord>,
}

/// Directory holding weights and intermediate products of one run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

pub const SIGHT_WEIGHTS: &str = "sight.json";
pub const SOUND_WEIGHTS: &str = "sound.json";
pub const STRIDE_WEIGHTS: &str = "stride.json";
pub const GATE_WEIGHTS: &str = "gate.json";
pub const EVENTS: &str = "events.jsonl";
pub const EMPIRICAL: &str = "empirical.jsonl";
pub const MINING: &str = "mining.jsonl";
pub const RUN_RECORD: &str = "run.json";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const REPORT: &str = "report.json";

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn has(&self, name: &str) -> bool {
        self.path(name).is_file()
    }

    pub fn save_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let tmp = self.path(&format!("{name}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec(value)?)?;
        std::fs::rename(&tmp, self.path(name))?;
        Ok(())
    }

    /// Loads an artifact an earlier stage should have produced.
    pub fn require<T: DeserializeOwned>(&self, name: &str, producer: &str) -> Result<T> {
        let p = self.path(name);
        if !p.is_file() {
            return Err(Error::Dependency(format!(
                "{} is missing; run the {producer} stage first",
                p.display()
            )));
        }
        Ok(serde_json::from_slice(&std::fs::read(&p)?)?)
    }

    pub fn optional<T: DeserializeOwned>(&self, name: &str) -> Result<Option<T>> {
        let p = self.path(name);
        if !p.is_file() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&std::fs::read(&p)?)?))
    }

    pub fn record(&self) -> Result<RunRecord> {
        Ok(self.optional(RUN_RECORD)?.unwrap_or_default())
    }

    /// Replaces any earlier record of the same stage.
    pub fn push_record(&self, cfg: &RunConfig, stage: StageRecord) -> Result<()> {
        let mut rec = self.record()?;
        rec.config = Some(cfg.clone());
        rec.stages.retain(|s| s.stage != stage.stage);
        rec.stages.push(stage);
        self.save_json(RUN_RECORD, &rec)
    }

    pub fn events(&self) -> Result<Vec<EpochEvent>> {
        let p = self.path(EVENTS);
        if !p.is_file() {
            return Ok(Vec::new());
        }
        std::fs::read_to_string(&p)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }

    /// Replaces the stored epoch events of one modality.
    pub fn replace_events(&self, modality: Modality, new: &[EpochEvent]) -> Result<()> {
        let mut all: Vec<EpochEvent> = self.events()?.into_iter().filter(|e| e.modality != modality).collect();
        all.extend_from_slice(new);
        let mut f = std::io::BufWriter::new(std::fs::File::create(self.path(EVENTS))?);
        for e in &all {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn sight(&self) -> Result<SightStream> {
        self.require(SIGHT_WEIGHTS, "train_sight")
    }

    pub fn sound(&self) -> Result<SoundStream> {
        self.require(SOUND_WEIGHTS, "train_sound")
    }

    /// Whatever models exist on disk; only the sight stream is mandatory.
    pub fn models(&self) -> Result<Models> {
        Ok(Models {
            sight: self.sight()?,
            sound: self.optional::<SoundStream>(SOUND_WEIGHTS)?,
            stride: self.optional::<StrideScorer>(STRIDE_WEIGHTS)?,
            gate: self.optional::<ReliabilityGate>(GATE_WEIGHTS)?,
        })
    }
}

/// Decodes every record of a split.
pub fn load_split(manifest: &DatasetManifest, split: Split, cfg: &RunConfig) -> Result<Vec<VideoData>> {
    let size = cfg.sight.model.resolution;
    let rate = cfg.sound.model.spectrogram.sample_rate;
    manifest.split(split).map(|r| load_video(manifest, r, size, rate)).collect()
}

/// Runs one training stage against a run directory, reading the outputs of
/// earlier stages from it and writing this stage's outputs back.
pub fn run_training_stage(stage: Stage, cfg: &RunConfig, manifest: &DatasetManifest, run: &RunDir) -> Result<StageRecord> {
    cfg.validate()?;
    let load = |split| load_split(manifest, split, cfg);
    let mut rng = stage_rng(cfg.seed, stage);
    let record = match stage {
        Stage::TrainSight | Stage::TrainSound => {
            let (train, val) = (load(Split::Train)?, load(Split::Val)?);
            let (train, val): (Vec<&VideoData>, Vec<&VideoData>) = (train.iter().collect(), val.iter().collect());
            let mut events = Vec::new();
            let record = if stage == Stage::TrainSight {
                let (m, r) = train_sight(&train, &val, cfg, &mut rng, &mut events)?;
                run.save_json(SIGHT_WEIGHTS, &m)?;
                run.replace_events(Modality::Sight, &events)?;
                r
            } else {
                let (m, r) = train_sound(&train, &val, cfg, &mut rng, &mut events)?;
                run.save_json(SOUND_WEIGHTS, &m)?;
                run.replace_events(Modality::Sound, &events)?;
                r
            };
            record
        }
        Stage::TrainStride => {
            let sight = run.sight()?;
            let sound = if cfg.stride.audio_enabled { Some(run.sound()?) } else { None };
            let train = load(Split::Train)?;
            let train: Vec<&VideoData> = train.iter().collect();
            let mut record = stage_record(stage);
            let mined = run_mining(&train, &sight, cfg, &mut record)?;
            save_mining(&mined, &run.path(MINING))?;
            let scorer = train_stride(&train, &mined, &sight, sound.as_ref(), cfg, &mut rng, &mut record)?;
            run.save_json(STRIDE_WEIGHTS, &scorer)?;
            record
        }
        Stage::TrainReliability => {
            let mut models = run.models()?;
            if models.sound.is_none() {
                models.sound = Some(run.sound()?);
            }
            if models.stride.is_none() && cfg.inference.fixed_stride.is_none() {
                return Err(Error::Dependency(format!(
                    "{} is missing; run the train_stride stage first or set a fixed stride",
                    run.path(STRIDE_WEIGHTS).display()
                )));
            }
            let events = run.events()?;
            for m in [Modality::Sight, Modality::Sound] {
                if !events.iter().any(|e| e.modality == m) {
                    return Err(Error::Dependency(format!(
                        "no {m:?} epoch records in {}; train that stream first",
                        run.path(EVENTS).display()
                    )));
                }
            }
            let table = collect_empirical_predictions(&events, &cfg.reliability);
            table.save(&run.path(EMPIRICAL))?;
            let train = load(Split::Train)?;
            let train: Vec<&VideoData> = train.iter().collect();
            let mut record = stage_record(stage);
            let gate = train_reliability(&train, &table, &models, cfg, &mut rng, &mut record)?;
            run.save_json(GATE_WEIGHTS, &gate)?;
            record
        }
        other => return Err(Error::Config(format!("{other:?} is not a training stage"))),
    };
    run.push_record(cfg, record.clone())?;
    Ok(record)
}

pub fn load_mined(run: &RunDir) -> Result<Vec<StrideMiningResult>> {
    load_mining(&run.path(MINING))
}
