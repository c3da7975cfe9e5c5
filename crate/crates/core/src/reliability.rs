//! Sound-reliability gate, count fusion, and the empirical prediction table
//! the gate is trained on.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use repcount_nn::{
    global_avg_pool, global_avg_pool_backward, Init, Linear, Module, ParamVisitor, ResidualBlock, ResidualBlockCache,
    Sgd, SgdConfig, Tensor,
};
use serde::{Deserialize, Serialize};

use crate::error::{argument, domain, Result};
use crate::metrics::{CountPrediction, Modality};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReliabilityConfig {
    pub theta_r_v: f64,
    pub theta_r_a: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Channels of the audio residual block.
    pub width: usize,
}

impl Default for ReliabilityConfig {
    fn default() -> Self {
        Self {
            theta_r_v: 0.36,
            theta_r_a: 0.40,
            epochs: 20,
            batch_size: 8,
            sgd: SgdConfig::default(),
            width: 32,
        }
    }
}

impl ReliabilityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_r_v > 0.0 && self.theta_r_a > 0.0) {
            return Err(argument("reliability thresholds must be positive"));
        }
        if self.batch_size == 0 {
            return Err(argument("batch size must be positive"));
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `(1 - gamma) * c_v + gamma * c_a`.
pub fn fuse(c_v: CountPrediction, c_a: CountPrediction, gamma: f64) -> Result<CountPrediction> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(argument(format!("gamma {gamma} outside [0, 1]")));
    }
    let value = if gamma == 0.0 {
        c_v.value
    } else if gamma == 1.0 {
        c_a.value
    } else {
        (1.0 - gamma) * c_v.value + gamma * c_a.value
    };
    let (lo, hi) = if c_v.value <= c_a.value {
        (c_v.value, c_a.value)
    } else {
        (c_a.value, c_v.value)
    };
    Ok(CountPrediction {
        value: value.clamp(lo, hi),
        modality: Modality::Fused,
    })
}

/// Mean relative absolute error of fused counts.
pub fn reliability_loss(fused: &[f64], labels: &[f64]) -> Result<f64> {
    crate::metrics::mae(fused, labels)
}

/// Loss of gated fusion and its gradient w.r.t. each gamma.
pub fn reliability_loss_grad(c_v: &[f64], c_a: &[f64], gammas: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = labels.len();
    if n == 0 || c_v.len() != n || c_a.len() != n || gammas.len() != n {
        return Err(argument("reliability batch components must have equal non-zero length"));
    }
    if let Some(bad) = labels.iter().find(|l| !(**l > 0.0)) {
        return Err(domain(format!("label {bad} is not positive")));
    }
    let nf = n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let c = (1.0 - gammas[i]) * c_v[i] + gammas[i] * c_a[i];
        let e = c - labels[i];
        loss += e.abs() / labels[i] / nf;
        grad.push(e.signum() * (c_a[i] - c_v[i]) / labels[i] / nf);
    }
    Ok((loss, grad))
}

/// Sigmoid gate over the visual feature and a residual summary of the audio
/// feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityGate {
    pub visual_dim: usize,
    pub audio: ResidualBlock,
    pub fc: Linear,
}

pub struct GateCache {
    audio: ResidualBlockCache,
    audio_shape: Vec<usize>,
    input: Vec<f32>,
    gamma: f64,
}

impl ReliabilityGate {
    pub fn new<R: Rng + ?Sized>(visual_dim: usize, audio_channels: usize, width: usize, init: Init, rng: &mut R) -> Result<Self> {
        let fc_init = if init == Init::Zeros { Init::Zeros } else { Init::Uniform { gain: 0.5 } };
        Ok(Self {
            visual_dim,
            audio: ResidualBlock::new(audio_channels, width, [1, 3, 3], [1, 1, 1], init, rng)?,
            fc: Linear::new(visual_dim + width, 1, fc_init, rng)?,
        })
    }

    fn check(&self, visual: &[f32]) -> Result<()> {
        if visual.len() != self.visual_dim {
            return Err(argument(format!(
                "visual feature has {} dims, gate expects {}",
                visual.len(),
                self.visual_dim
            )));
        }
        Ok(())
    }

    /// Sound confidence in `(0, 1)`.
    pub fn gate(&self, visual: &[f32], audio_tap: &Tensor) -> Result<f64> {
        self.check(visual)?;
        let mut input = visual.to_vec();
        input.extend(global_avg_pool(&self.audio.forward(audio_tap)?));
        let z = self.fc.forward(&input)?[0] as f64;
        Ok(sigmoid(z).clamp(f64::EPSILON, 1.0 - f64::EPSILON))
    }

    pub fn gate_cached(&self, visual: &[f32], audio_tap: &Tensor) -> Result<(f64, GateCache)> {
        self.check(visual)?;
        let (a, ac) = self.audio.forward_cached(audio_tap)?;
        let mut input = visual.to_vec();
        input.extend(global_avg_pool(&a));
        let gamma = sigmoid(self.fc.forward(&input)?[0] as f64);
        Ok((
            gamma,
            GateCache {
                audio: ac,
                audio_shape: a.shape().to_vec(),
                input,
                gamma,
            },
        ))
    }

    pub fn backward(&mut self, cache: &GateCache, grad_gamma: f64) -> Result<()> {
        let gz = grad_gamma * cache.gamma * (1.0 - cache.gamma);
        let g = self.fc.backward(&cache.input, &[gz as f32])?;
        let ga = global_avg_pool_backward(&cache.audio_shape, &g[self.visual_dim..])?;
        self.audio.backward(&cache.audio, &ga)?;
        Ok(())
    }
}

impl Module for ReliabilityGate {
    fn visit_params(&mut self, v: &mut dyn ParamVisitor) {
        self.audio.visit_params(v);
        self.fc.visit_params(v);
    }
}

/// What a stream's training loop reports at the end of an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEvent {
    pub modality: Modality,
    pub epoch: usize,
    pub val_rel_mae: f64,
    /// Per-training-video predictions, present when recorded.
    pub predictions: Option<BTreeMap<String, f64>>,
    pub is_final: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalEntry {
    pub video_id: String,
    pub avg_sight: f64,
    pub avg_sound: f64,
    pub n_recordings_v: usize,
    pub n_recordings_a: usize,
    /// Set when the stream had no qualifying epoch and the final model's
    /// prediction was used instead.
    pub fallback_v: bool,
    pub fallback_a: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmpiricalPredictionTable {
    pub per_video: BTreeMap<String, EmpiricalEntry>,
}

impl EmpiricalPredictionTable {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in self.per_video.values() {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut per_video = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let e: EmpiricalEntry = serde_json::from_str(line)?;
            per_video.insert(e.video_id.clone(), e);
        }
        Ok(Self { per_video })
    }
}

/// Averages `(sum, n)` per video over the events that qualify; when none do,
/// takes the final event's predictions.
fn average_for(events: &[&EpochEvent], theta: f64) -> (BTreeMap<String, (f64, usize)>, bool) {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for e in events.iter().filter(|e| e.val_rel_mae < theta) {
        for (id, &p) in e.predictions.iter().flatten() {
            let slot = acc.entry(id.clone()).or_default();
            slot.0 += p;
            slot.1 += 1;
        }
    }
    if !acc.is_empty() {
        return (acc.into_iter().map(|(k, (s, n))| (k, (s / n as f64, n))).collect(), false);
    }
    let last = events
        .iter()
        .rev()
        .find(|e| e.predictions.is_some())
        .and_then(|e| e.predictions.clone())
        .unwrap_or_default();
    (last.into_iter().map(|(k, p)| (k, (p, 0))).collect(), true)
}

pub fn collect_empirical_predictions(events: &[EpochEvent], config: &ReliabilityConfig) -> EmpiricalPredictionTable {
    let by = |m: Modality| events.iter().filter(|e| e.modality == m).collect::<Vec<_>>();
    let (sight, sound) = (by(Modality::Sight), by(Modality::Sound));
    let mut table = EmpiricalPredictionTable::default();
    if events.is_empty() {
        return table;
    }
    let (v, fallback_v) = average_for(&sight, config.theta_r_v);
    let (a, fallback_a) = average_for(&sound, config.theta_r_a);
    if fallback_v && !sight.is_empty() {
        log::warn!("no sight epoch reached val rel-MAE < {}; using final-model predictions", config.theta_r_v);
    }
    if fallback_a && !sound.is_empty() {
        log::warn!("no sound epoch reached val rel-MAE < {}; using final-model predictions", config.theta_r_a);
    }
    for id in v.keys().chain(a.keys()) {
        let e = table.per_video.entry(id.clone()).or_insert_with(|| EmpiricalEntry {
            video_id: id.clone(),
            ..Default::default()
        });
        if let Some(&(p, n)) = v.get(id) {
            (e.avg_sight, e.n_recordings_v, e.fallback_v) = (p, n, fallback_v);
        }
        if let Some(&(p, n)) = a.get(id) {
            (e.avg_sound, e.n_recordings_a, e.fallback_a) = (p, n, fallback_a);
        }
    }
    table
}

/// One gate-training example.
#[derive(Clone, Debug)]
pub struct GateSample {
    pub visual: Vec<f32>,
    pub audio_tap: Tensor,
    pub sight: f64,
    pub sound: f64,
    pub label: f64,
}

/// Trains the gate on fused relative error. Returns per-epoch mean loss.
pub fn train_gate<R: Rng + ?Sized>(
    gate: &mut ReliabilityGate,
    samples: &[GateSample],
    config: &ReliabilityConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(argument("no gate training samples"));
    }
    let opt = Sgd::new(config.sgd);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut caches = Vec::with_capacity(batch.len());
            let (mut cv, mut ca, mut g, mut l) = (vec![], vec![], vec![], vec![]);
            for &i in batch {
                let s = &samples[i];
                let (gamma, cache) = gate.gate_cached(&s.visual, &s.audio_tap)?;
                caches.push(cache);
                cv.push(s.sight);
                ca.push(s.sound);
                g.push(gamma);
                l.push(s.label);
            }
            let (loss, grad) = reliability_loss_grad(&cv, &ca, &g, &l)?;
            for (c, &dg) in caches.iter().zip(&grad) {
                gate.backward(c, dg)?;
            }
            opt.step(&mut [gate]);
            total += loss * batch.len() as f64;
        }
        history.push(total / samples.len() as f64);
    }
    Ok(history)
}
