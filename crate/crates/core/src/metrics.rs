//! Detection metrics with benign queries as the positive class.
//!
//! All detectors emit higher-is-malicious scores, so a query is predicted
//! positive (benign) when its score is at or below the threshold.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SentinelError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredQuery {
    pub score: f64,
    pub is_benign: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredStream {
    pub items: Vec<ScoredQuery>,
}

impl ScoredStream {
    pub fn from_scores(benign: &[f64], malicious: &[f64]) -> Self {
        let items = benign
            .iter()
            .map(|&score| ScoredQuery { score, is_benign: true })
            .chain(malicious.iter().map(|&score| ScoredQuery {
                score,
                is_benign: false,
            }))
            .collect();
        Self { items }
    }

    pub fn push(&mut self, score: f64, is_benign: bool) {
        self.items.push(ScoredQuery { score, is_benign });
    }

    fn split_sorted(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut benign = Vec::new();
        let mut malicious = Vec::new();
        for q in &self.items {
            if q.score.is_nan() {
                return Err(SentinelError::InvalidArgument("NaN score".into()));
            }
            if q.is_benign {
                benign.push(q.score);
            } else {
                malicious.push(q.score);
            }
        }
        if benign.is_empty() || malicious.is_empty() {
            return Err(SentinelError::MissingClass);
        }
        benign.sort_by(f64::total_cmp);
        malicious.sort_by(f64::total_cmp);
        Ok((benign, malicious))
    }
}

/// Number of entries `<= x` in an ascending slice.
fn count_le(sorted: &[f64], x: f64) -> usize {
    sorted.partition_point(|&v| v <= x)
}

fn count_lt(sorted: &[f64], x: f64) -> usize {
    sorted.partition_point(|&v| v < x)
}

/// Smallest `k` in `1..=n` with `k / n >= target`.
pub(crate) fn min_rank_for_rate(n: usize, target: f64) -> usize {
    let mut k = ((target * n as f64).ceil() as usize).clamp(1, n);
    while k > 1 && (k - 1) as f64 / n as f64 >= target {
        k -= 1;
    }
    while k < n && (k as f64 / n as f64) < target {
        k += 1;
    }
    k
}

/// Fraction of malicious queries accepted at the smallest threshold that
/// accepts at least `tpr_target` of benign queries.
pub fn fpr_at_tpr(stream: &ScoredStream, tpr_target: f64) -> Result<f64> {
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(SentinelError::InvalidArgument(format!(
            "tpr target {tpr_target} outside (0, 1]"
        )));
    }
    let (benign, malicious) = stream.split_sorted()?;
    let k = min_rank_for_rate(benign.len(), tpr_target);
    let threshold = benign[k - 1];
    Ok(count_le(&malicious, threshold) as f64 / malicious.len() as f64)
}

/// `P(benign < malicious)` with ties credited one half.
pub fn auroc(stream: &ScoredStream) -> Result<f64> {
    let (benign, malicious) = stream.split_sorted()?;
    let mut twice_wins: u128 = 0;
    for &m in &malicious {
        let lt = count_lt(&benign, m) as u128;
        let le = count_le(&benign, m) as u128;
        twice_wins += 2 * lt + (le - lt);
    }
    Ok(twice_wins as f64 / (2 * benign.len() as u128 * malicious.len() as u128) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub precision: f64,
}

/// One point per distinct score, thresholds ascending.
pub fn curve(stream: &ScoredStream) -> Result<Vec<CurvePoint>> {
    let (benign, malicious) = stream.split_sorted()?;
    let mut thresholds: Vec<f64> = benign.iter().chain(&malicious).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (p, n) = (benign.len() as f64, malicious.len() as f64);
    Ok(thresholds
        .into_iter()
        .map(|t| {
            let tp = count_le(&benign, t) as f64;
            let fp = count_le(&malicious, t) as f64;
            CurvePoint {
                threshold: t,
                tpr: tp / p,
                fpr: fp / n,
                precision: tp / (tp + fp),
            }
        })
        .collect())
}

/// Step-wise area under the precision-recall curve:
/// `sum_i (R_i - R_{i-1}) P_i` over distinct thresholds ascending.
pub fn aupr(stream: &ScoredStream) -> Result<f64> {
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for pt in curve(stream)? {
        area += (pt.tpr - prev_recall) * pt.precision;
        prev_recall = pt.tpr;
    }
    Ok(area)
}

/// `min(malicious) - max(benign)`; positive iff a threshold separates them.
pub fn separation_gap(benign: &[f64], malicious: &[f64]) -> Result<f64> {
    if benign.is_empty() || malicious.is_empty() {
        return Err(SentinelError::MissingClass);
    }
    let max_b = benign.iter().copied().max_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let min_m = malicious.iter().copied().min_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    Ok(min_m.expect("non-empty") - max_b.expect("non-empty"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub fpr_at_tpr95: f64,
    pub auroc: f64,
    pub aupr: f64,
}

pub fn summarize(stream: &ScoredStream) -> Result<MetricSummary> {
    Ok(MetricSummary {
        fpr_at_tpr95: fpr_at_tpr(stream, 0.95)?,
        auroc: auroc(stream)?,
        aupr: aupr(stream)?,
    })
}
