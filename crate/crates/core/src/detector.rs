//! Malicious scores over a window batch (ADD, EW, GDD) and over single-query
//! logits (MSP baseline, energy), plus thresholding into a verdict.
//!
//! Every score follows the same orientation: higher means more likely to come
//! from a model-stealing account.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SentinelError};
use crate::reference::ReferenceModel;
use crate::tensor_stats::{psd_sqrt_clamped, sum_sqrt_clamped, sym_eigenvalues, symmetrize, Moments};
use crate::windows::AccountWindow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Class-size weighted sum of class-wise distances.
    Add,
    /// Equal class weights.
    Ew,
    /// One distance between pooled window features and the pooled training set.
    Gdd,
    /// `1 - max softmax probability` of the current query.
    Msp,
    /// Energy of the current query's logits.
    Energy,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Add => "add",
            Variant::Ew => "ew",
            Variant::Gdd => "gdd",
            Variant::Msp => "msp",
            Variant::Energy => "energy",
        }
    }

    pub fn uses_window(self) -> bool {
        matches!(self, Variant::Add | Variant::Ew | Variant::Gdd)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = SentinelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "add" => Ok(Variant::Add),
            "ew" => Ok(Variant::Ew),
            "gdd" => Ok(Variant::Gdd),
            "msp" | "baseline" => Ok(Variant::Msp),
            "energy" => Ok(Variant::Energy),
            other => Err(SentinelError::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub variant: Variant,
    pub window_size: usize,
    /// `tau`; may be infinite in either direction.
    #[serde(with = "extended_float")]
    pub threshold: f64,
    /// Added to the reference covariances before any square root.
    pub epsilon: f64,
    /// Energy-score temperature.
    pub temperature: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Add,
            window_size: 64,
            threshold: f64::INFINITY,
            epsilon: 1e-6,
            temperature: 1.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 {
            return Err(SentinelError::Config("window size must be >= 1".into()));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(SentinelError::Config(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(SentinelError::Config(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        if self.threshold.is_nan() {
            return Err(SentinelError::Config("threshold is NaN".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub score: f64,
    #[serde(with = "extended_float")]
    pub threshold: f64,
    pub is_malicious: bool,
    pub variant: Variant,
    pub window_snapshot_len: usize,
}

/// JSON has no infinities: finite values stay numbers, the rest become the
/// strings `"inf"`, `"-inf"` and `"nan"`.
mod extended_float {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t
                .trim()
                .parse::<f64>()
                .map_err(|_| de::Error::custom(format!("expected a number, got {t:?}"))),
        }
    }
}

/// `score > tau` is malicious; a tie is benign.
pub fn apply_threshold(score: f64, config: &DetectorConfig) -> Verdict {
    Verdict {
        score,
        threshold: config.threshold,
        is_malicious: score > config.threshold,
        variant: config.variant,
        window_snapshot_len: 0,
    }
}

/// A reference Gaussian with the pieces every distance evaluation needs.
#[derive(Debug, Clone)]
struct CachedReference {
    mean: DVector<f64>,
    /// `Sigma_r + eps I`
    cov: DMatrix<f64>,
    /// `(Sigma_r + eps I)^{1/2}`
    sqrt_cov: DMatrix<f64>,
    trace: f64,
}

impl CachedReference {
    fn new(m: &Moments, eps: f64) -> Self {
        let cov = m.cov.regularized(eps).into_matrix();
        let sqrt_cov = psd_sqrt_clamped(&cov);
        let trace = cov.trace();
        Self {
            mean: m.mean.clone(),
            cov,
            sqrt_cov,
            trace,
        }
    }

    /// Squared Fréchet distance from this reference to the empirical Gaussian
    /// of `rows` (one sample per row, biased covariance).
    ///
    /// With `A` the centered rows, `tr[(R S_a)^{1/2}]` is taken from the
    /// `n x n` Gram form `A R A^T / n` when `n <= d` (same nonzero spectrum
    /// as `R^{1/2} S_a R^{1/2}`), otherwise from the `d x d` product.
    fn distance_to_rows(&self, mut rows: DMatrix<f64>) -> f64 {
        let n = rows.nrows();
        let d = rows.ncols();
        let mut mean = DVector::zeros(d);
        for j in 0..d {
            let mut acc = 0.0;
            for i in 0..n {
                acc += rows[(i, j)];
            }
            mean[j] = acc / n as f64;
        }
        for j in 0..d {
            for i in 0..n {
                rows[(i, j)] -= mean[j];
            }
        }
        let mean_term = (&self.mean - &mean).norm_squared();
        let trace_query = rows.norm_squared() / n as f64;
        let cross = if n == 1 {
            0.0
        } else if n <= d {
            let mut gram = (&rows * &self.cov) * rows.transpose();
            gram /= n as f64;
            symmetrize(&mut gram);
            // centered rows sum to zero, so the all-ones vector spans a null
            // direction; its rounding-noise eigenvalue would leak in via sqrt
            sum_sqrt_clamped(&sym_eigenvalues(&gram)[1..])
        } else {
            let mut cov_q = rows.tr_mul(&rows);
            cov_q /= n as f64;
            let mut prod = &self.sqrt_cov * cov_q * &self.sqrt_cov;
            symmetrize(&mut prod);
            sum_sqrt_clamped(&sym_eigenvalues(&prod))
        };
        (mean_term + self.trace + trace_query - 2.0 * cross).max(0.0)
    }
}

/// Per-class summary of one window evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassTerm {
    pub count: usize,
    pub distance: f64,
}

/// Scores windows against a frozen reference model.
///
/// The query side uses the exact empirical covariance; only the reference
/// covariances carry the `eps I` regularizer.
#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    reference: Arc<ReferenceModel>,
    classes: Vec<CachedReference>,
    global: CachedReference,
}

impl Detector {
    pub fn new(reference: Arc<ReferenceModel>, config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let classes = reference
            .classes()
            .iter()
            .map(|c| CachedReference::new(&c.stats, config.epsilon))
            .collect();
        let global = CachedReference::new(&reference.global_moments(), config.epsilon);
        Ok(Self {
            config,
            reference,
            classes,
            global,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn reference(&self) -> &Arc<ReferenceModel> {
        &self.reference
    }

    /// Same caches, different threshold.
    pub fn with_threshold(&self, threshold: f64) -> Self {
        let mut d = self.clone();
        d.config.threshold = threshold;
        d
    }

    fn check_window(&self, window: &AccountWindow) -> Result<()> {
        if window.dim() != self.reference.dim() {
            return Err(SentinelError::DimensionMismatch {
                expected: self.reference.dim(),
                actual: window.dim(),
            });
        }
        if window.is_empty() {
            return Err(SentinelError::InvalidArgument("cannot score an empty window".into()));
        }
        Ok(())
    }

    fn rows(window: &AccountWindow, idx: &[usize]) -> DMatrix<f64> {
        let d = window.dim();
        let mut rows = DMatrix::zeros(idx.len(), d);
        for (r, &i) in idx.iter().enumerate() {
            let (f, _) = window.get(i).expect("index from class_indices");
            for (j, &v) in f.iter().enumerate() {
                rows[(r, j)] = v as f64;
            }
        }
        rows
    }

    /// Class-wise distances `d_c` for every predicted class in the window.
    pub fn class_terms(&self, window: &AccountWindow) -> Result<BTreeMap<u32, ClassTerm>> {
        self.check_window(window)?;
        let groups = window.class_indices();
        let mut out = BTreeMap::new();
        for (class_id, idx) in groups {
            let cached = self
                .classes
                .get(class_id as usize)
                .ok_or(SentinelError::UnknownClassId(class_id))?;
            let distance = cached.distance_to_rows(Self::rows(window, &idx));
            out.insert(
                class_id,
                ClassTerm {
                    count: idx.len(),
                    distance,
                },
            );
        }
        Ok(out)
    }

    /// `sum_c |X_c| / N * d_c`, with `N` the window length.
    pub fn score_add(&self, window: &AccountWindow) -> Result<f64> {
        let terms = self.class_terms(window)?;
        let n = window.len() as f64;
        Ok(terms
            .values()
            .map(|t| t.count as f64 / n * t.distance)
            .sum())
    }

    /// `sum_c d_c`
    pub fn score_ew(&self, window: &AccountWindow) -> Result<f64> {
        Ok(self.class_terms(window)?.values().map(|t| t.distance).sum())
    }

    /// Distance between the pooled window and the pooled training set.
    pub fn score_gdd(&self, window: &AccountWindow) -> Result<f64> {
        self.check_window(window)?;
        let idx: Vec<usize> = (0..window.len()).collect();
        Ok(self.global.distance_to_rows(Self::rows(window, &idx)))
    }

    /// Score under the configured variant. `logits` are those of the most
    /// recent query and are only read by MSP and energy.
    pub fn score(&self, window: &AccountWindow, logits: &[f64]) -> Result<f64> {
        match self.config.variant {
            Variant::Add => self.score_add(window),
            Variant::Ew => self.score_ew(window),
            Variant::Gdd => self.score_gdd(window),
            Variant::Msp => score_msp(&softmax(logits)),
            Variant::Energy => Ok(score_energy(logits, self.config.temperature)),
        }
    }

    pub fn verdict(&self, score: f64, window_len: usize) -> Verdict {
        Verdict {
            window_snapshot_len: window_len,
            ..apply_threshold(score, &self.config)
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `1 - max_k p_k`
pub fn score_msp(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(SentinelError::NotADistribution("empty vector".into()));
    }
    if probs.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
        return Err(SentinelError::NotADistribution("negative or non-finite entry".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(SentinelError::NotADistribution(format!("sums to {total}")));
    }
    let max = probs.iter().copied().fold(0.0, f64::max);
    Ok(1.0 - max)
}

/// `-T log sum_k exp(logit_k / T)`, shifted by the max logit for stability.
pub fn score_energy(logits: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    -temperature * lse
}
