//! Temporal stride selection: mining positive/negative strides from a
//! trained sight stream, a two-branch scorer, and the max-margin ranking loss.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use repcount_nn::{
    global_avg_pool, global_avg_pool_backward, Init, Linear, Module, ParamVisitor, ResidualBlock, ResidualBlockCache,
    Sgd, SgdConfig, Tensor,
};
use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrideConfig {
    pub margin: f64,
    pub theta_s: f64,
    /// Largest stride considered while mining and training.
    pub sk_train: usize,
    /// Largest stride considered at inference.
    pub sk_infer: usize,
    pub audio_enabled: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Channels of the per-modality residual blocks.
    pub width: usize,
}

impl Default for StrideConfig {
    fn default() -> Self {
        Self {
            margin: 2.9,
            theta_s: 0.29,
            sk_train: 8,
            sk_infer: 5,
            audio_enabled: true,
            epochs: 5,
            batch_size: 8,
            sgd: SgdConfig {
                learning_rate: 1e-3,
                ..Default::default()
            },
            width: 32,
        }
    }
}

impl StrideConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !(self.theta_s > 0.0 && self.theta_s < 1.0) {
            return Err(argument("stride margin must be > 0 and theta_s in (0, 1)"));
        }
        if self.sk_train == 0 || self.sk_infer == 0 || self.batch_size == 0 {
            return Err(argument("stride limits and batch size must be positive"));
        }
        Ok(())
    }
}

/// Whether a clip of `clip_len` frames at `stride` spans two repetitions.
pub fn covers_two(clip_len: usize, stride: usize, mean_period: f64) -> bool {
    (clip_len.saturating_sub(1) * stride) as f64 >= 2.0 * mean_period
}

/// Smallest stride in `1..=sk` that spans two repetitions.
pub fn positive_stride(clip_len: usize, mean_period: f64, sk: usize) -> Option<usize> {
    (1..=sk).find(|&s| covers_two(clip_len, s, mean_period))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrideMiningResult {
    pub video_id: String,
    pub positive_stride: usize,
    pub negative_strides: BTreeSet<usize>,
    pub per_stride_counts: BTreeMap<usize, f64>,
    pub deviations: BTreeMap<usize, f64>,
}

/// Applies the mining rule to per-stride video counts `C^k` for `k = 1..=sk`.
/// Returns `None` when no stride spans two repetitions.
pub fn mine_from_predictions(
    video_id: &str,
    per_stride_counts: &BTreeMap<usize, f64>,
    clip_len: usize,
    mean_period: f64,
    sk: usize,
    theta_s: f64,
) -> Option<StrideMiningResult> {
    let pos = positive_stride(clip_len, mean_period, sk)?;
    let c_star = per_stride_counts.get(&pos).copied().unwrap_or(0.0);
    let mut deviations = BTreeMap::new();
    let mut negatives = BTreeSet::new();
    for k in 1..=sk {
        let ck = per_stride_counts.get(&k).copied().unwrap_or(0.0);
        let delta = if c_star > 0.0 { (c_star - ck) / c_star } else { 0.0 };
        deviations.insert(k, if k == pos { 0.0 } else { delta });
        if k != pos && (!covers_two(clip_len, k, mean_period) || delta > theta_s) {
            negatives.insert(k);
        }
    }
    Some(StrideMiningResult {
        video_id: video_id.to_string(),
        positive_stride: pos,
        negative_strides: negatives,
        per_stride_counts: per_stride_counts.clone(),
        deviations,
    })
}

pub fn save_mining(results: &[StrideMiningResult], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in results {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_mining(path: &Path) -> Result<Vec<StrideMiningResult>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// `(1/N) sum max(0, s- - s+ + m)`.
pub fn ranking_loss(neg: &[f64], pos: &[f64], margin: f64) -> Result<f64> {
    Ok(ranking_loss_grad(neg, pos, margin)?.0)
}

/// Loss with its gradients w.r.t. the negative and positive scores.
pub fn ranking_loss_grad(neg: &[f64], pos: &[f64], margin: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if neg.len() != pos.len() || neg.is_empty() {
        return Err(argument("ranking loss needs equal non-empty score batches"));
    }
    let n = neg.len() as f64;
    let mut loss = 0.0;
    let mut gn = vec![0.0; neg.len()];
    let mut gp = vec![0.0; neg.len()];
    for i in 0..neg.len() {
        let h = neg[i] - pos[i] + margin;
        if h > 0.0 {
            loss += h / n;
            gn[i] = 1.0 / n;
            gp[i] = -1.0 / n;
        }
    }
    Ok((loss, gn, gp))
}

/// Argmax over scores for strides `1..=len`, ties toward the smaller stride.
pub fn select_stride(scores: &[f64]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i + 1, s));
        }
    }
    best.ok_or_else(|| argument("no stride candidates"))
}

/// Two residual branches over the streams' tapped feature maps, pooled,
/// concatenated and mapped to a single score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrideScorer {
    pub visual: ResidualBlock,
    pub audio: Option<ResidualBlock>,
    pub fc: Linear,
}

pub struct ScorerCache {
    visual: ResidualBlockCache,
    visual_shape: Vec<usize>,
    audio: Option<(ResidualBlockCache, Vec<usize>)>,
    pooled: Vec<f32>,
}

impl StrideScorer {
    pub fn new<R: Rng + ?Sized>(
        visual_channels: usize,
        audio_channels: Option<usize>,
        width: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let visual = ResidualBlock::new(visual_channels, width, [3, 3, 3], [1, 1, 1], init, rng)?;
        let audio = audio_channels
            .map(|c| ResidualBlock::new(c, width, [1, 3, 3], [1, 1, 1], init, rng))
            .transpose()?;
        let inputs = width * if audio.is_some() { 2 } else { 1 };
        let fc_init = if init == Init::Zeros { Init::Zeros } else { Init::Uniform { gain: 1.0 } };
        Ok(Self {
            visual,
            audio,
            fc: Linear::new(inputs, 1, fc_init, rng)?,
        })
    }

    pub fn audio_enabled(&self) -> bool {
        self.audio.is_some()
    }

    fn check_audio<'a>(&self, audio_tap: Option<&'a Tensor>) -> Result<Option<&'a Tensor>> {
        match (&self.audio, audio_tap) {
            (Some(_), None) => Err(argument("stride scorer expects an audio feature map")),
            (None, _) => Ok(None),
            (Some(_), a) => Ok(a),
        }
    }

    pub fn score(&self, visual_tap: &Tensor, audio_tap: Option<&Tensor>) -> Result<f64> {
        let audio_tap = self.check_audio(audio_tap)?;
        let mut pooled = global_avg_pool(&self.visual.forward(visual_tap)?);
        if let (Some(block), Some(a)) = (&self.audio, audio_tap) {
            pooled.extend(global_avg_pool(&block.forward(a)?));
        }
        Ok(self.fc.forward(&pooled)?[0] as f64)
    }

    pub fn score_cached(&self, visual_tap: &Tensor, audio_tap: Option<&Tensor>) -> Result<(f64, ScorerCache)> {
        let audio_tap = self.check_audio(audio_tap)?;
        let (v, vc) = self.visual.forward_cached(visual_tap)?;
        let mut pooled = global_avg_pool(&v);
        let audio = match (&self.audio, audio_tap) {
            (Some(block), Some(a)) => {
                let (y, c) = block.forward_cached(a)?;
                pooled.extend(global_avg_pool(&y));
                Some((c, y.shape().to_vec()))
            }
            _ => None,
        };
        let s = self.fc.forward(&pooled)?[0] as f64;
        Ok((
            s,
            ScorerCache {
                visual: vc,
                visual_shape: v.shape().to_vec(),
                audio,
                pooled,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ScorerCache, grad_score: f64) -> Result<()> {
        let g = self.fc.backward(&cache.pooled, &[grad_score as f32])?;
        let w = self.visual.out_channels();
        let gv = global_avg_pool_backward(&cache.visual_shape, &g[..w])?;
        self.visual.backward(&cache.visual, &gv)?;
        if let (Some(block), Some((c, shape))) = (&mut self.audio, &cache.audio) {
            let ga = global_avg_pool_backward(shape, &g[w..])?;
            block.backward(c, &ga)?;
        }
        Ok(())
    }
}

impl Module for StrideScorer {
    fn visit_params(&mut self, v: &mut dyn ParamVisitor) {
        self.visual.visit_params(v);
        if let Some(a) = &mut self.audio {
            a.visit_params(v);
        }
        self.fc.visit_params(v);
    }
}

/// Tapped features of one stride candidate.
#[derive(Clone, Debug)]
pub struct StrideFeatures {
    pub stride: usize,
    pub visual: Tensor,
    pub audio: Option<Tensor>,
}

/// Ranking-training sample: the positive stride's features and every
/// mined negative's.
#[derive(Clone, Debug)]
pub struct StrideSample {
    pub video_id: String,
    pub positive: StrideFeatures,
    pub negatives: Vec<StrideFeatures>,
}

/// Trains the scorer with one randomly drawn negative per sample per epoch.
/// Returns the mean ranking loss of every epoch.
pub fn train_scorer<R: Rng + ?Sized>(
    scorer: &mut StrideScorer,
    samples: &[StrideSample],
    config: &StrideConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    config.validate()?;
    let usable: Vec<&StrideSample> = samples.iter().filter(|s| !s.negatives.is_empty()).collect();
    if usable.is_empty() {
        return Err(argument("no stride samples with negatives to train on"));
    }
    let opt = Sgd::new(config.sgd);
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut caches = Vec::with_capacity(batch.len() * 2);
            let (mut neg, mut pos) = (Vec::new(), Vec::new());
            for &i in batch {
                let s = usable[i];
                let n = &s.negatives[rng.random_range(0..s.negatives.len())];
                let (sp, cp) = scorer.score_cached(&s.positive.visual, s.positive.audio.as_ref())?;
                let (sn, cn) = scorer.score_cached(&n.visual, n.audio.as_ref())?;
                pos.push(sp);
                neg.push(sn);
                caches.push((cp, cn));
            }
            let (loss, gn, gp) = ranking_loss_grad(&neg, &pos, config.margin)?;
            for (k, (cp, cn)) in caches.iter().enumerate() {
                scorer.backward(cp, gp[k])?;
                scorer.backward(cn, gn[k])?;
            }
            opt.step(&mut [scorer]);
            total += loss * batch.len() as f64;
        }
        history.push(total / usable.len() as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ranking_examples() {
        assert_eq!(ranking_loss(&[0.1], &[3.5], 2.9).unwrap(), 0.0);
        assert!((ranking_loss(&[1.0], &[1.0], 2.9).unwrap() - 2.9).abs() < 1e-12);
        assert!((ranking_loss(&[1.0], &[2.0], 2.9).unwrap() - 1.9).abs() < 1e-12);
        assert!(ranking_loss(&[1.0], &[1.0, 2.0], 2.9).is_err());
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_stride(&[0.1, 0.9, 0.3]).unwrap().0, 2);
        assert_eq!(select_stride(&[0.5, 0.5, 0.5]).unwrap().0, 1);
        assert!(select_stride(&[]).is_err());
    }

    #[test]
    fn mining_examples() {
        // period 20 frames: stride 1 spans 63 >= 40, so S* = 1
        let counts: BTreeMap<usize, f64> = [(1, 10.0), (2, 7.0), (3, 8.0)].into_iter().collect();
        let r = mine_from_predictions("v", &counts, 64, 20.0, 3, 0.29).unwrap();
        assert_eq!(r.positive_stride, 1);
        assert!((r.deviations[&2] - 0.3).abs() < 1e-12);
        assert_eq!(r.negative_strides, [2].into_iter().collect());
        assert_eq!(r.deviations[&1], 0.0);
        // period 40: stride 1 spans 63 < 80 and is negative whatever it predicts
        let counts: BTreeMap<usize, f64> = [(1, 10.0), (2, 10.0)].into_iter().collect();
        let r = mine_from_predictions("v", &counts, 64, 40.0, 2, 0.29).unwrap();
        assert_eq!(r.positive_stride, 2);
        assert_eq!(r.negative_strides, [1].into_iter().collect());
        assert!(mine_from_predictions("v", &counts, 64, 400.0, 2, 0.29).is_none());
    }

    #[test]
    fn zero_scorer_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = StrideScorer::new(4, Some(3), 8, Init::Zeros, &mut rng).unwrap();
        let v = Tensor::zeros(&[4, 2, 2, 2]);
        let a = Tensor::zeros(&[3, 1, 2, 4]);
        assert_eq!(s.score(&v, Some(&a)).unwrap(), 0.0);
        assert!(matches!(s.score(&v, None), Err(crate::Error::Argument(_))));
        let visual_only = StrideScorer::new(4, None, 8, Init::HE, &mut rng).unwrap();
        let x = visual_only.score(&v, None).unwrap();
        assert_eq!(x, visual_only.score(&v, Some(&a)).unwrap());
    }

    #[test]
    fn scorer_learns_to_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut scorer = StrideScorer::new(2, Some(2), 4, Init::HE, &mut rng).unwrap();
        let feat = |level: f32, rng: &mut ChaCha8Rng| StrideFeatures {
            stride: 1,
            visual: Tensor::new(vec![2, 2, 2, 2], (0..16).map(|_| level + rng.random_range(0.0..0.1)).collect()).unwrap(),
            audio: Some(Tensor::new(vec![2, 1, 2, 2], (0..8).map(|_| level + rng.random_range(0.0..0.1)).collect()).unwrap()),
        };
        let samples: Vec<StrideSample> = (0..16)
            .map(|i| StrideSample {
                video_id: i.to_string(),
                positive: feat(1.0, &mut rng),
                negatives: vec![feat(0.0, &mut rng)],
            })
            .collect();
        let cfg = StrideConfig {
            epochs: 40,
            sgd: SgdConfig {
                learning_rate: 0.05,
                ..Default::default()
            },
            ..Default::default()
        };
        let hist = train_scorer(&mut scorer, &samples, &cfg, &mut rng).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);
        let wins = samples
            .iter()
            .filter(|s| {
                scorer.score(&s.positive.visual, s.positive.audio.as_ref()).unwrap()
                    > scorer.score(&s.negatives[0].visual, s.negatives[0].audio.as_ref()).unwrap()
            })
            .count();
        assert_eq!(wins, samples.len());
    }

    #[test]
    fn mining_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let counts: BTreeMap<usize, f64> = [(1, 4.0), (2, 3.0)].into_iter().collect();
        let r = mine_from_predictions("v", &counts, 64, 10.0, 2, 0.29).unwrap();
        let path = dir.path().join("mining.jsonl");
        save_mining(&[r.clone(), r.clone()], &path).unwrap();
        assert_eq!(load_mining(&path).unwrap(), vec![r.clone(), r]);
    }

    proptest! {
        #[test]
        fn ranking_nonnegative_and_zero_iff_margin_met(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..10), m in 0.1f64..4.0) {
            let (neg, pos): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let l = ranking_loss(&neg, &pos, m).unwrap();
            prop_assert!(l >= 0.0);
            let all_met = neg.iter().zip(&pos).all(|(n, p)| *p >= n + m);
            prop_assert_eq!(l == 0.0, all_met);
        }

        #[test]
        fn selection_shift_invariant(scores in prop::collection::vec(-3.0f64..3.0, 1..9), c in -10.0f64..10.0) {
            let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
            prop_assert_eq!(select_stride(&scores).unwrap().0, select_stride(&shifted).unwrap().0);
        }

        #[test]
        fn coverage_is_monotone(period in 1.0f64..300.0, s in 1usize..10) {
            if covers_two(64, s, period) {
                prop_assert!(covers_two(64, s + 1, period));
            }
        }
    }
}
