//! Count types and the two evaluation metrics: relative mean absolute error
//! and off-by-one accuracy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datasets::ChallengeTag;
use crate::error::{argument, domain, Result};

/// Ground-truth repetition count. Always strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct CountLabel(f64);

impl CountLabel {
    pub fn new(value: f64) -> Result<Self> {
        if !(value.is_finite() && value > 0.0) {
            return Err(domain(format!("count label must be positive and finite, got {value}")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for CountLabel {
    type Error = crate::Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CountLabel> for f64 {
    fn from(l: CountLabel) -> f64 {
        l.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Sight,
    Sound,
    Fused,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountPrediction {
    pub value: f64,
    pub modality: Modality,
}

impl CountPrediction {
    /// Wraps a raw network output, clamping it to be non-negative.
    pub fn clamped(raw: f64, modality: Modality) -> Self {
        Self {
            value: if raw.is_nan() { 0.0 } else { raw.max(0.0) },
            modality,
        }
    }
}

/// Anything that carries a scalar count.
pub trait Count {
    fn count(&self) -> f64;
}

impl Count for f64 {
    fn count(&self) -> f64 {
        *self
    }
}

impl Count for CountLabel {
    fn count(&self) -> f64 {
        self.0
    }
}

impl Count for CountPrediction {
    fn count(&self) -> f64 {
        self.value
    }
}

fn validate<P: Count, L: Count>(preds: &[P], gts: &[L]) -> Result<()> {
    if preds.is_empty() {
        return Err(argument("metrics need at least one prediction"));
    }
    if preds.len() != gts.len() {
        return Err(argument(format!(
            "{} predictions for {} labels",
            preds.len(),
            gts.len()
        )));
    }
    if let Some(bad) = gts.iter().map(Count::count).find(|l| !(*l > 0.0)) {
        return Err(domain(format!("ground-truth count {bad} is not positive")));
    }
    Ok(())
}

/// Mean of `|pred - gt| / gt`.
pub fn mae<P: Count, L: Count>(preds: &[P], gts: &[L]) -> Result<f64> {
    validate(preds, gts)?;
    let sum: f64 = preds
        .iter()
        .zip(gts)
        .map(|(p, l)| (p.count() - l.count()).abs() / l.count())
        .sum();
    Ok(sum / preds.len() as f64)
}

/// Fraction of predictions within one repetition of the ground truth.
/// Real-valued predictions are compared without rounding.
pub fn obo<P: Count, L: Count>(preds: &[P], gts: &[L]) -> Result<f64> {
    validate(preds, gts)?;
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, l)| (p.count() - l.count()).abs() <= 1.0)
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub obo: f64,
    pub n: usize,
    /// Per-challenge relative MAE. Challenge sets are evaluated with MAE only.
    pub per_tag_mae: BTreeMap<ChallengeTag, f64>,
    /// Whether the evaluated set carried challenge tags.
    #[serde(default)]
    pub tagged: bool,
}

pub fn evaluate_report<P: Count, L: Count>(
    preds: &[P],
    gts: &[L],
    tags: Option<&[BTreeSet<ChallengeTag>]>,
) -> Result<EvalReport> {
    let mae_all = mae(preds, gts)?;
    let obo_all = obo(preds, gts)?;
    let mut per_tag_mae = BTreeMap::new();
    if let Some(tags) = tags {
        if tags.len() != preds.len() {
            return Err(argument(format!(
                "{} tag sets for {} predictions",
                tags.len(),
                preds.len()
            )));
        }
        for tag in ChallengeTag::ALL {
            let (p, l): (Vec<f64>, Vec<f64>) = preds
                .iter()
                .zip(gts)
                .zip(tags)
                .filter(|(_, t)| t.contains(&tag))
                .map(|((p, l), _)| (p.count(), l.count()))
                .unzip();
            if !p.is_empty() {
                per_tag_mae.insert(tag, mae(&p, &l)?);
            }
        }
    }
    Ok(EvalReport {
        mae: mae_all,
        obo: obo_all,
        n: preds.len(),
        per_tag_mae,
        tagged: tags.is_some(),
    })
}

impl EvalReport {
    /// Flat `key value` table, one entry per line.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("n".into(), self.n.to_string()),
            ("mae".into(), format!("{:.6}", self.mae)),
            ("obo".into(), format!("{:.6}", self.obo)),
        ];
        if self.tagged {
            for tag in ChallengeTag::ALL {
                let v = self
                    .per_tag_mae
                    .get(&tag)
                    .map_or_else(|| "-".to_string(), |m| format!("{m:.6}"));
                rows.push((format!("mae[{}]", tag.as_str()), v));
            }
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v}");
        }
        out
    }
}
