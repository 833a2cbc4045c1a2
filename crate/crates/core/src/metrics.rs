//! Scores for probes and layer sweeps, plus first-token frequency tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::TokenLog;
use crate::pairs::CaseStudySplit;
use crate::prompts::Condition;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_pairs(predictions: &[u8], labels: &[u8]) -> Result<Self> {
        check_lengths(predictions, labels)?;
        let mut c = Self::default();
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p, l) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 0) => c.tn += 1,
                (0, 1) => c.fn_ += 1,
                _ => return Err(Error::Precondition(format!("non-binary pair ({p}, {l})"))),
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_lengths(predictions: &[u8], labels: &[u8]) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: predictions.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Precondition("no examples to score".into()));
    }
    Ok(())
}

pub fn accuracy(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    check_lengths(predictions, labels)?;
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// `2tp / (2tp + fp + fn)`, or 0 when that denominator is 0.
pub fn f1(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

/// Unweighted mean of per-category F1.
pub fn macro_f1(per_category: &[ConfusionCounts]) -> Result<f64> {
    if per_category.is_empty() {
        return Err(Error::Precondition("macro-F1 over zero categories".into()));
    }
    Ok(per_category.iter().map(f1).sum::<f64>() / per_category.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Accuracy,
    MacroF1,
}

impl MetricName {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Accuracy => "accuracy",
            MetricName::MacroF1 => "macro_f1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "accuracy" => Some(MetricName::Accuracy),
            "macro_f1" => Some(MetricName::MacroF1),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub layer: u16,
    pub score: f64,
}

/// Score per layer for one task and condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub task_tag: String,
    pub condition: Option<Condition>,
    pub metric_name: MetricName,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    /// Validates that layers strictly increase and scores are finite in `[0, 1]`.
    pub fn new(
        task_tag: impl Into<String>,
        condition: Option<Condition>,
        metric_name: MetricName,
        points: Vec<SweepPoint>,
    ) -> Result<Self> {
        if let Some(w) = points.windows(2).find(|w| w[0].layer >= w[1].layer) {
            return Err(Error::Invalid(format!(
                "sweep layers not strictly increasing at {} -> {}",
                w[0].layer, w[1].layer
            )));
        }
        if let Some(p) = points.iter().find(|p| !(0.0..=1.0).contains(&p.score)) {
            return Err(Error::Invalid(format!("layer {} score {} outside [0, 1]", p.layer, p.score)));
        }
        Ok(Self {
            task_tag: task_tag.into(),
            condition,
            metric_name,
            points,
        })
    }
}

/// Highest-scoring layer; the lowest layer wins ties.
pub fn best_layer(sweep: &SweepResult) -> Result<SweepPoint> {
    let mut iter = sweep.points.iter();
    let first = *iter
        .next()
        .ok_or_else(|| Error::Precondition(format!("sweep {} is empty", sweep.task_tag)))?;
    Ok(iter.fold(first, |best, p| if p.score > best.score { *p } else { best }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub layer: u16,
    pub delta: f64,
}

/// `withcat - nocat` on the layers the two sweeps share.
pub fn compare_conditions(withcat: &SweepResult, nocat: &SweepResult) -> Result<Vec<LayerDelta>> {
    if withcat.task_tag != nocat.task_tag || withcat.metric_name != nocat.metric_name {
        return Err(Error::Precondition(format!(
            "cannot compare {}/{} with {}/{}",
            withcat.task_tag,
            withcat.metric_name.as_str(),
            nocat.task_tag,
            nocat.metric_name.as_str()
        )));
    }
    let other: BTreeMap<u16, f64> = nocat.points.iter().map(|p| (p.layer, p.score)).collect();
    let deltas: Vec<LayerDelta> = withcat
        .points
        .iter()
        .filter_map(|p| {
            other.get(&p.layer).map(|s| LayerDelta {
                layer: p.layer,
                delta: p.score - s,
            })
        })
        .collect();
    if deltas.is_empty() {
        return Err(Error::Precondition("sweeps share no layers".into()));
    }
    Ok(deltas)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseSplit {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFrequency {
    pub token: String,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFrequencyTable {
    pub split: CaseSplit,
    pub condition: Option<Condition>,
    /// Total number of examples counted.
    pub total: u64,
    pub rows: Vec<TokenFrequency>,
    pub others_mass: f64,
}

fn frequency_table(
    tokens: &BTreeMap<u64, &str>,
    ids: &[u64],
    split: CaseSplit,
    condition: Option<Condition>,
    k: usize,
) -> Result<TokenFrequencyTable> {
    if ids.is_empty() {
        return Err(Error::Precondition(format!("{split:?} case-study split is empty")));
    }
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for id in ids {
        let token = tokens
            .get(id)
            .ok_or_else(|| Error::Alignment(format!("example {id} missing from token log")))?;
        *counts.entry(token).or_default() += 1;
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    // Stable sort keeps the lexicographic order of the map within equal counts.
    ranked.sort_by_key(|r| std::cmp::Reverse(r.1));
    let total = ids.len() as u64;
    let kept: u64 = ranked.iter().take(k).map(|r| r.1).sum();
    Ok(TokenFrequencyTable {
        split,
        condition,
        total,
        rows: ranked
            .iter()
            .take(k)
            .map(|&(token, c)| TokenFrequency {
                token: token.to_string(),
                frequency: c as f64 / total as f64,
            })
            .collect(),
        others_mass: (total - kept) as f64 / total as f64,
    })
}

/// Top-`k` first-token frequencies for the positive and negative halves of a
/// case study. Tokens are compared as exact, case-sensitive strings.
pub fn token_frequency(
    log: &TokenLog,
    case_split: &CaseStudySplit,
    condition: Option<Condition>,
    k: usize,
) -> Result<(TokenFrequencyTable, TokenFrequencyTable)> {
    let tokens = log.by_example()?;
    Ok((
        frequency_table(&tokens, &case_split.positive_ids, CaseSplit::Positive, condition, k)?,
        frequency_table(&tokens, &case_split.negative_ids, CaseSplit::Negative, condition, k)?,
    ))
}
