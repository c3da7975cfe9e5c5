use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::VideoData;
use crate::error::Result;
use crate::metrics::{evaluate_report, EvalReport};
use crate::pipeline::infer::{infer_video, InferenceConfig, Models, VideoPrediction};

/// Reports for the fused output and for each stream on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub fused: EvalReport,
    pub sight: EvalReport,
    /// Present when every video has a sound prediction.
    pub sound: Option<EvalReport>,
}

pub fn predict_all(videos: &[&VideoData], models: &Models, config: &InferenceConfig) -> Result<Vec<VideoPrediction>> {
    videos.iter().map(|v| infer_video(v, models, config)).collect()
}

/// Scores predictions; challenge tags are taken from `videos`, matched by
/// position.
pub fn evaluate_predictions(preds: &[VideoPrediction], videos: &[&VideoData]) -> Result<Evaluation> {
    let labels: Vec<f64> = preds.iter().map(|p| p.label).collect();
    let tagged = videos.iter().any(|v| !v.record.challenge_tags.is_empty());
    let tags: Vec<_> = videos.iter().map(|v| v.record.challenge_tags.clone()).collect();
    let tags = tagged.then_some(tags.as_slice());
    let fused: Vec<f64> = preds.iter().map(|p| p.fused.value).collect();
    let sight: Vec<f64> = preds.iter().map(|p| p.sight.value).collect();
    let sound: Option<Vec<f64>> = preds.iter().map(|p| p.sound.map(|s| s.value)).collect();
    Ok(Evaluation {
        fused: evaluate_report(&fused, &labels, tags)?,
        sight: evaluate_report(&sight, &labels, tags)?,
        sound: sound.map(|s| evaluate_report(&s, &labels, tags)).transpose()?,
    })
}

pub fn evaluate(videos: &[&VideoData], models: &Models, config: &InferenceConfig) -> Result<(Vec<VideoPrediction>, Evaluation)> {
    let preds = predict_all(videos, models, config)?;
    let eval = evaluate_predictions(&preds, videos)?;
    Ok((preds, eval))
}

pub fn save_predictions(preds: &[VideoPrediction], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in preds {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<VideoPrediction>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
