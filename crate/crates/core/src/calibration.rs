//! Threshold selection from a tolerated accuracy-dropping ratio.
//!
//! A benign, labelled stream is replayed once through an undefended engine on
//! a single account. Window contents and poison draws do not depend on the
//! threshold, so the defended accuracy at any candidate follows exactly from
//! that one trace.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SentinelError};
use crate::gateway::{Engine, ItemOutcome};

/// Account used for the calibration replay.
pub const CALIBRATION_ACCOUNT: &str = "calibration";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub gamma: f64,
    /// Undefended accuracy on the stream.
    pub acc_star: f64,
    pub target: f64,
    pub achieved_acc: f64,
    pub tau: f64,
    /// Smallest candidate meeting the target, before nudging upwards.
    pub tau_unnudged: f64,
    /// No finite candidate met the target; `tau` is infinite.
    pub unachievable: bool,
    pub queries: usize,
    pub sweep: Vec<SweepPoint>,
}

/// Whether the returned label of `o` matches `label`.
fn correct(o: &ItemOutcome, label: i64, poisoned: bool) -> bool {
    let returned = if poisoned { o.poison_class } else { o.predicted };
    returned as i64 == label
}

/// Accuracy of returned labels, as served.
pub fn defended_accuracy(outcomes: &[ItemOutcome], labels: &[i64]) -> f64 {
    let hits = outcomes
        .iter()
        .zip(labels)
        .filter(|(o, &l)| correct(o, l, o.poisoned))
        .count();
    hits as f64 / outcomes.len().max(1) as f64
}

/// Defended accuracy at every candidate threshold: each distinct score in
/// the trace plus `+inf`, ascending.
pub fn accuracy_sweep(outcomes: &[ItemOutcome], labels: &[i64]) -> Vec<SweepPoint> {
    let n = outcomes.len();
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| outcomes[a].score.total_cmp(&outcomes[b].score));
    // below every score all queries are poisoned
    let mut hits: i64 = outcomes
        .iter()
        .zip(labels)
        .filter(|(o, &l)| correct(o, l, true))
        .count() as i64;
    let mut sweep = Vec::new();
    let mut i = 0;
    while i < n {
        let tau = outcomes[order[i]].score;
        while i < n && outcomes[order[i]].score == tau {
            let j = order[i];
            hits += correct(&outcomes[j], labels[j], false) as i64 - correct(&outcomes[j], labels[j], true) as i64;
            i += 1;
        }
        if tau.is_finite() {
            sweep.push(SweepPoint {
                tau,
                accuracy: hits as f64 / n as f64,
            });
        }
    }
    sweep.push(SweepPoint {
        tau: f64::INFINITY,
        accuracy: hits as f64 / n as f64,
    });
    sweep
}

/// Picks the smallest candidate whose defended accuracy reaches
/// `acc_star * (1 - gamma)`, then moves to the next larger candidate when
/// `nudge` is set and that candidate still meets the target.
///
/// `engine` must have been built with an infinite threshold; its
/// configuration (window size, seed, variant) is what is being calibrated.
pub fn calibrate_tau(
    engine: &Engine,
    features: &[Vec<f32>],
    labels: &[i64],
    gamma: f64,
    nudge: bool,
) -> Result<CalibrationReport> {
    if features.is_empty() {
        return Err(SentinelError::EmptyStream);
    }
    if features.len() != labels.len() {
        return Err(SentinelError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(SentinelError::InvalidArgument(format!("gamma {gamma} outside [0, 1)")));
    }
    let k = engine.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l < 0 || l as usize >= k) {
        return Err(SentinelError::LabelOutOfRange { label: bad, classes: k });
    }
    if engine.detector().config().threshold != f64::INFINITY {
        return Err(SentinelError::InvalidArgument(
            "calibration needs an engine with an infinite threshold".into(),
        ));
    }

    let mut outcomes = Vec::with_capacity(features.len());
    for f in features {
        outcomes.extend(engine.process(CALIBRATION_ACCOUNT, std::slice::from_ref(f))?);
    }
    let acc_star = outcomes
        .iter()
        .zip(labels)
        .filter(|(o, &l)| o.predicted as i64 == l)
        .count() as f64
        / outcomes.len() as f64;
    let target = acc_star * (1.0 - gamma);
    let sweep = accuracy_sweep(&outcomes, labels);

    let first = sweep
        .iter()
        .position(|p| p.accuracy >= target)
        .expect("the infinite candidate reaches acc_star");
    let mut chosen = first;
    if nudge && first + 1 < sweep.len() && sweep[first + 1].accuracy >= target {
        chosen = first + 1;
    }
    Ok(CalibrationReport {
        gamma,
        acc_star,
        target,
        achieved_acc: sweep[chosen].accuracy,
        tau: sweep[chosen].tau,
        tau_unnudged: sweep[first].tau,
        unachievable: sweep[first].tau.is_infinite(),
        queries: outcomes.len(),
        sweep,
    })
}
