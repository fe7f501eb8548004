//! Per-case and aggregated Dice, cohort statistics and confusion counts.
//!
//! Per-case Dice applies the empty-reference conventions: an empty reference
//! scores 1 when the prediction is also empty and 0 otherwise. The aggregated
//! score sums intersections and volumes over the cohort before dividing, so
//! (empty, empty) cases drop out of both sums.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{overlap_counts, Label, LabelMask, LabelSet, OverlapCounts, VolumeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("case {case_id}: {source}")]
    Case { case_id: String, source: VolumeError },
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("aggregated Dice for label {label} is undefined: every reference and prediction is empty")]
    DegenerateCohort { label: Label },
    #[error("cannot summarize an empty list of values")]
    EmptyValues,
}

/// Reference (`A_i`) and predicted (`B_i`) masks for one case.
#[derive(Debug, Clone)]
pub struct CasePair {
    pub case_id: String,
    pub gt: LabelMask,
    pub pred: LabelMask,
}

impl CasePair {
    pub fn new(case_id: impl Into<String>, gt: LabelMask, pred: LabelMask) -> Result<Self, MetricsError> {
        let case_id = case_id.into();
        gt.geometry()
            .ensure_compatible(pred.geometry())
            .map_err(|source| MetricsError::Case { case_id: case_id.clone(), source })?;
        Ok(Self { case_id, gt, pred })
    }

    pub fn counts(&self, label: Label) -> Result<OverlapCounts, MetricsError> {
        overlap_counts(&self.gt, &self.pred, label)
            .map_err(|source| MetricsError::Case { case_id: self.case_id.clone(), source })
    }
}

/// True positives, false positives and false negatives for one label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn from_counts(c: OverlapCounts) -> Self {
        Self { tp: c.intersection, fp: c.candidate - c.intersection, fn_: c.reference - c.intersection }
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;
    fn add(self, o: Confusion) -> Confusion {
        Confusion { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

/// Per-case Dice from exact counts, with the empty-reference conventions.
pub fn dice_from_counts(c: OverlapCounts) -> f64 {
    match (c.reference, c.candidate) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        (a, b) => (2 * c.intersection) as f64 / (a + b) as f64,
    }
}

pub fn dice_case(pair: &CasePair, label: Label) -> Result<f64, MetricsError> {
    Ok(dice_from_counts(pair.counts(label)?))
}

/// Aggregated Dice over already-counted cases.
pub fn dice_agg_from_counts<'a>(
    counts: impl IntoIterator<Item = &'a OverlapCounts>,
    label: Label,
) -> Result<f64, MetricsError> {
    let (mut inter, mut denom) = (0u64, 0u64);
    for c in counts {
        inter += c.intersection;
        denom += c.reference + c.candidate;
    }
    if denom == 0 {
        return Err(MetricsError::DegenerateCohort { label });
    }
    Ok((2 * inter) as f64 / denom as f64)
}

/// `2 Σ|A_i ∩ B_i| / Σ(|A_i| + |B_i|)` over the cohort.
pub fn dice_agg(cohort: &[CasePair], label: Label) -> Result<f64, MetricsError> {
    if cohort.is_empty() {
        return Err(MetricsError::EmptyCohort);
    }
    let counts = cohort.iter().map(|p| p.counts(label)).collect::<Result<Vec<_>, _>>()?;
    dice_agg_from_counts(&counts, label)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub mean: f64,
    /// Sample standard deviation (n - 1 divisor); 0 for a single value.
    pub std: f64,
}

pub fn cohort_stats(values: &[f64]) -> Result<CohortStats, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyValues);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(CohortStats { mean, std })
}

pub fn confusion_counts(pair: &CasePair, label: Label) -> Result<Confusion, MetricsError> {
    Ok(Confusion::from_counts(pair.counts(label)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub case_id: String,
    pub dsc: f64,
    pub counts: OverlapCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: Label,
    pub dsc_agg: f64,
    pub per_case: Vec<CaseScore>,
    pub mean_dsc: f64,
    pub std_dsc: f64,
    pub confusion_totals: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortScore {
    pub labels: Vec<LabelScore>,
    /// Unweighted mean of the per-label aggregated Dice values.
    pub mean_dsc_agg: f64,
}

impl CohortScore {
    pub fn label(&self, label: Label) -> Option<&LabelScore> {
        self.labels.iter().find(|s| s.label == label)
    }
}

/// Unweighted mean of per-label scores.
pub fn mean_of_labels(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Scores every label over the cohort.
///
/// Case counting runs on the current rayon pool; results are collected in
/// cohort order and reduced sequentially, so the output does not depend on
/// the number of worker threads.
pub fn score_cohort(cohort: &[CasePair], labels: &LabelSet) -> Result<CohortScore, MetricsError> {
    if cohort.is_empty() {
        return Err(MetricsError::EmptyCohort);
    }
    let mut scores = Vec::with_capacity(labels.len());
    for label in labels.iter() {
        let counts: Vec<OverlapCounts> =
            cohort.par_iter().map(|p| p.counts(label)).collect::<Result<_, _>>()?;
        let dsc_agg = dice_agg_from_counts(&counts, label)?;
        let per_case: Vec<CaseScore> = cohort
            .iter()
            .zip(&counts)
            .map(|(p, &c)| CaseScore { case_id: p.case_id.clone(), dsc: dice_from_counts(c), counts: c })
            .collect();
        let dscs: Vec<f64> = per_case.iter().map(|c| c.dsc).collect();
        let stats = cohort_stats(&dscs)?;
        let confusion_totals = counts.iter().map(|&c| Confusion::from_counts(c)).fold(Confusion::default(), |a, b| a + b);
        scores.push(LabelScore { label, dsc_agg, per_case, mean_dsc: stats.mean, std_dsc: stats.std, confusion_totals });
    }
    let mean_dsc_agg = mean_of_labels(&scores.iter().map(|s| s.dsc_agg).collect::<Vec<_>>());
    Ok(CohortScore { labels: scores, mean_dsc_agg })
}
