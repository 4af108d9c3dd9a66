//! The defended query pipeline.
//!
//! Each query feature is classified, pushed into its account's window, the
//! updated window is scored, and the response is either the honest one or a
//! randomly chosen label when the score exceeds the threshold.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::Mutex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{Classification, Classifier, GaussianDiscriminant};
use crate::detector::{softmax, Detector, DetectorConfig, Verdict};
use crate::error::{Result, SentinelError};
use crate::reference::ReferenceModel;
use crate::rng;
use crate::windows::{AccountWindow, SeedEntry, StoreConfig, WindowStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseMode {
    #[default]
    Hard,
    Soft,
}

impl fmt::Display for ResponseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResponseMode::Hard => "hard",
            ResponseMode::Soft => "soft",
        })
    }
}

impl FromStr for ResponseMode {
    type Err = SentinelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hard" => Ok(ResponseMode::Hard),
            "soft" => Ok(ResponseMode::Soft),
            other => Err(SentinelError::Config(format!("unknown response mode {other:?}"))),
        }
    }
}

/// What a flagged query receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoisonMode {
    /// One-hot of a uniformly random class, in both response modes.
    #[default]
    OneHot,
    /// Uniform probability vector in soft mode; one-hot random label in hard mode.
    UniformSoft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub detector: DetectorConfig,
    pub response_mode: ResponseMode,
    pub poison_mode: PoisonMode,
    pub seed: u64,
    pub max_accounts: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            response_mode: ResponseMode::Hard,
            poison_mode: PoisonMode::OneHot,
            seed: 0,
            max_accounts: 16_384,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub account_id: String,
    pub features: Vec<Vec<f32>>,
    /// Overrides the engine's default response mode when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_mode: Option<ResponseMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    /// One length-K probability vector per query feature.
    pub labels: Vec<Vec<f64>>,
    pub poisoned: Vec<bool>,
    /// Class each response points at (argmax, lowest id on ties).
    pub classes: Vec<u32>,
    /// Malicious score of the window right after each feature was pushed.
    pub scores: Vec<f64>,
    /// Verdict of the last feature in the batch.
    pub verdict: Verdict,
    pub latency_micros: u64,
}

/// Full record of one processed feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemOutcome {
    pub predicted: u32,
    pub logits: Vec<f64>,
    pub score: f64,
    /// Label this query would receive if poisoned; drawn for every query so
    /// the draw sequence does not depend on the threshold.
    pub poison_class: u32,
    pub poisoned: bool,
}

impl ItemOutcome {
    pub fn returned_class(&self) -> u32 {
        if self.poisoned {
            self.poison_class
        } else {
            self.predicted
        }
    }
}

/// Honest response of the bare classifier.
pub fn honest_response(c: &Classification, mode: ResponseMode) -> Vec<f64> {
    match mode {
        ResponseMode::Soft => softmax(&c.logits),
        ResponseMode::Hard => one_hot(c.logits.len(), c.class_id),
    }
}

fn one_hot(k: usize, class_id: u32) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[class_id as usize] = 1.0;
    v
}

#[derive(Debug)]
pub struct AccountState {
    poison_rng: ChaCha8Rng,
    queries: u64,
}

/// Ring of recent per-query processing latencies in nanoseconds.
#[derive(Debug)]
struct LatencyRing {
    samples: Vec<u64>,
    next: usize,
    cap: usize,
}

impl LatencyRing {
    fn new(cap: usize) -> Self {
        Self {
            samples: Vec::with_capacity(cap),
            next: 0,
            cap,
        }
    }

    fn record(&mut self, nanos: u64) {
        if self.samples.len() < self.cap {
            self.samples.push(nanos);
        } else {
            self.samples[self.next] = nanos;
        }
        self.next = (self.next + 1) % self.cap;
    }

    fn percentiles(&self, qs: &[f64]) -> Vec<Option<f64>> {
        if self.samples.is_empty() {
            return vec![None; qs.len()];
        }
        let mut sorted = self.samples.clone();
        sorted.sort_unstable();
        qs.iter()
            .map(|q| {
                let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
                Some(sorted[rank - 1] as f64 / 1_000.0)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineStats {
    pub accounts: usize,
    pub window_size: usize,
    pub dim: usize,
    pub window_feature_bytes: usize,
    pub total_window_feature_bytes: usize,
    pub queries_scored: u64,
    pub queries_poisoned: u64,
    pub evicted_accounts: u64,
    pub latency_p50_micros: Option<f64>,
    pub latency_p95_micros: Option<f64>,
    pub latency_p99_micros: Option<f64>,
}

pub struct Engine {
    config: EngineConfig,
    detector: Detector,
    classifier: Arc<dyn Classifier>,
    store: WindowStore<AccountState>,
    latencies: Mutex<LatencyRing>,
    scored: AtomicU64,
    poisoned: AtomicU64,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("config", &self.config)
            .field("accounts", &self.store.num_accounts())
            .finish()
    }
}

impl Engine {
    /// `seed_features` are training features; each is classified once to
    /// obtain the predicted class it carries in seed-filled windows.
    pub fn new(
        reference: Arc<ReferenceModel>,
        classifier: Arc<dyn Classifier>,
        seed_features: &[Vec<f32>],
        config: EngineConfig,
    ) -> Result<Self> {
        if classifier.dim() != reference.dim() {
            return Err(SentinelError::DimensionMismatch {
                expected: reference.dim(),
                actual: classifier.dim(),
            });
        }
        if classifier.num_classes() != reference.num_classes() {
            return Err(SentinelError::InvalidArgument(format!(
                "classifier has {} classes, reference has {}",
                classifier.num_classes(),
                reference.num_classes()
            )));
        }
        let detector = Detector::new(reference, config.detector.clone())?;
        let mut pool = Vec::with_capacity(seed_features.len());
        for f in seed_features {
            if f.len() != classifier.dim() {
                return Err(SentinelError::DimensionMismatch {
                    expected: classifier.dim(),
                    actual: f.len(),
                });
            }
            pool.push(SeedEntry {
                feature: f.clone(),
                class_id: classifier.classify(f).class_id,
            });
        }
        let store = WindowStore::new(
            StoreConfig {
                capacity: config.detector.window_size,
                dim: classifier.dim(),
                seed: config.seed,
                max_accounts: config.max_accounts,
            },
            pool,
        )?;
        Ok(Self {
            config,
            detector,
            classifier,
            store,
            latencies: Mutex::new(LatencyRing::new(1 << 17)),
            scored: AtomicU64::new(0),
            poisoned: AtomicU64::new(0),
        })
    }

    /// Engine whose target model is the Gaussian discriminant of the
    /// reference classes.
    pub fn with_discriminant(
        reference: Arc<ReferenceModel>,
        seed_features: &[Vec<f32>],
        config: EngineConfig,
    ) -> Result<Self> {
        let classifier = Arc::new(GaussianDiscriminant::from_reference(&reference)?);
        Self::new(reference, classifier, seed_features, config)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn classifier(&self) -> &Arc<dyn Classifier> {
        &self.classifier
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.classifier.dim()
    }

    fn new_account_state(&self, account_id: &str) -> AccountState {
        AccountState {
            poison_rng: rng::substream(self.config.seed, rng::POISONING, account_id),
            queries: 0,
        }
    }

    /// Replaces the account's window with `items` (exactly `N` of them)
    /// instead of the seed fill.
    pub fn prefill_window(&self, account_id: &str, items: &[(Vec<f32>, u32)]) -> Result<()> {
        let k = self.num_classes() as u32;
        if let Some((_, c)) = items.iter().find(|(_, c)| *c >= k) {
            return Err(SentinelError::UnknownClassId(*c));
        }
        self.store
            .insert_prefilled(account_id, items, self.new_account_state(account_id))
    }

    pub fn window(&self, account_id: &str) -> Option<AccountWindow> {
        self.store.window(account_id)
    }

    /// Classifies, pushes and scores each feature in order under the
    /// account's exclusive lock.
    pub fn process(&self, account_id: &str, features: &[Vec<f32>]) -> Result<Vec<ItemOutcome>> {
        let d = self.dim();
        if let Some(bad) = features.iter().find(|f| f.len() != d) {
            return Err(SentinelError::DimensionMismatch {
                expected: d,
                actual: bad.len(),
            });
        }
        if let Some(bad) = features.iter().flatten().find(|v| !v.is_finite()) {
            return Err(SentinelError::InvalidArgument(format!(
                "feature contains non-finite value {bad}"
            )));
        }
        let k = self.num_classes();
        let classified: Vec<Classification> = features.iter().map(|f| self.classifier.classify(f)).collect();
        if let Some(c) = classified.iter().find(|c| c.class_id as usize >= k) {
            return Err(SentinelError::UnknownClassId(c.class_id));
        }

        self.store.with_session(
            account_id,
            |a| self.new_account_state(a),
            |session| {
                let mut out = Vec::with_capacity(features.len());
                for (f, c) in features.iter().zip(classified) {
                    let started = Instant::now();
                    session.window.push(f, c.class_id)?;
                    let score = self.detector.score(&session.window, &c.logits)?;
                    let poison_class = session.ext.poison_rng.random_range(0..k as u32);
                    session.ext.queries += 1;
                    let poisoned = score > self.detector.config().threshold;
                    self.latencies.lock().record(started.elapsed().as_nanos() as u64);
                    self.scored.fetch_add(1, Ordering::Relaxed);
                    if poisoned {
                        self.poisoned.fetch_add(1, Ordering::Relaxed);
                    }
                    out.push(ItemOutcome {
                        predicted: c.class_id,
                        logits: c.logits,
                        score,
                        poison_class,
                        poisoned,
                    });
                }
                Ok(out)
            },
        )
    }

    pub fn handle_query(&self, request: &QueryRequest) -> Result<QueryResponse> {
        let started = Instant::now();
        if request.features.is_empty() {
            return Err(SentinelError::InvalidArgument("query batch is empty".into()));
        }
        let mode = request.response_mode.unwrap_or(self.config.response_mode);
        let outcomes = self.process(&request.account_id, &request.features)?;
        let k = self.num_classes();
        let mut labels = Vec::with_capacity(outcomes.len());
        let mut classes = Vec::with_capacity(outcomes.len());
        for o in &outcomes {
            let label = if o.poisoned {
                match (self.config.poison_mode, mode) {
                    (PoisonMode::UniformSoft, ResponseMode::Soft) => vec![1.0 / k as f64; k],
                    _ => one_hot(k, o.poison_class),
                }
            } else {
                honest_response(
                    &Classification {
                        class_id: o.predicted,
                        logits: o.logits.clone(),
                    },
                    mode,
                )
            };
            classes.push(crate::classifier::argmax_lowest(&label));
            labels.push(label);
        }
        let last = outcomes.last().expect("non-empty batch");
        let verdict = self.detector.verdict(last.score, self.config.detector.window_size);
        Ok(QueryResponse {
            labels,
            poisoned: outcomes.iter().map(|o| o.poisoned).collect(),
            classes,
            scores: outcomes.iter().map(|o| o.score).collect(),
            verdict,
            latency_micros: started.elapsed().as_micros() as u64,
        })
    }

    pub fn stats(&self) -> EngineStats {
        let p = self.latencies.lock().percentiles(&[0.50, 0.95, 0.99]);
        EngineStats {
            accounts: self.store.num_accounts(),
            window_size: self.config.detector.window_size,
            dim: self.dim(),
            window_feature_bytes: self.store.window_feature_bytes(),
            total_window_feature_bytes: self.store.total_feature_bytes(),
            queries_scored: self.scored.load(Ordering::Relaxed),
            queries_poisoned: self.poisoned.load(Ordering::Relaxed),
            evicted_accounts: self.store.evictions(),
            latency_p50_micros: p[0],
            latency_p95_micros: p[1],
            latency_p99_micros: p[2],
        }
    }
}
