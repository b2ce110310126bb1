//! Rank-based AUROC, accuracy, and the report returned by evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auroc,
    Accuracy,
    /// Mean squared error, used for regression targets.
    Mse,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Auroc => "auroc",
            Metric::Accuracy => "accuracy",
            Metric::Mse => "mse",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Mse)
    }

    /// Whether `candidate` beats `best`.
    pub fn improves(self, candidate: f64, best: f64) -> bool {
        if self.higher_is_better() {
            candidate > best
        } else {
            candidate < best
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auroc" => Ok(Metric::Auroc),
            "accuracy" => Ok(Metric::Accuracy),
            "mse" => Ok(Metric::Mse),
            _ => Err(Error::Config(format!(
                "unknown metric `{s}` (expected auroc, accuracy or mse)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metric_name: Metric,
    pub value: f64,
    pub n_samples: usize,
    /// Binary tasks only.
    pub positive_count: Option<usize>,
    /// Mean supervised loss over the evaluated rows.
    pub sup_loss: f64,
}

/// Area under the ROC curve via the Mann–Whitney rank statistic, with
/// mid-ranks for tied scores.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(
            "auroc",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auroc scores".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auroc needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start..end (0-based) share the mid-rank, 1-based
        let mid = (start + end + 1) as f64 / 2.0;
        let tied_pos = order[start..end].iter().filter(|&&i| labels[i]).count();
        pos_rank_sum += mid * tied_pos as f64;
        start = end;
    }
    let p = n_pos as f64;
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n_neg as f64))
}

/// Fraction of rows whose argmax equals the label; ties go to the lowest
/// class index.
pub fn accuracy(logits: &[f32], n_classes: usize, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || n_classes == 0 {
        return Err(Error::invalid("accuracy", "empty input"));
    }
    if logits.len() != labels.len() * n_classes {
        return Err(Error::invalid(
            "accuracy",
            format!(
                "{} logits for {} rows of {n_classes} classes",
                logits.len(),
                labels.len()
            ),
        ));
    }
    let correct = logits
        .chunks(n_classes)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn mse(predictions: &[f32], targets: &[f32]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(Error::invalid("mse", "empty or mismatched input"));
    }
    let s: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
        .sum();
    Ok(s / predictions.len() as f64)
}

/// Softmax probability of class 1 for each two-logit row.
pub fn positive_scores(logits: &[f32]) -> Vec<f64> {
    logits
        .chunks(2)
        .map(|r| 1.0 / (1.0 + (r[0] as f64 - r[1] as f64).exp()))
        .collect()
}
