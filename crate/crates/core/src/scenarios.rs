//! Experiment harnesses over synthetic worlds: per-query detection streams,
//! window-size separation studies and detector-variant comparisons.

use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::detector::{Detector, DetectorConfig, Variant};
use crate::error::Result;
use crate::gateway::{Engine, EngineConfig, ItemOutcome};
use crate::metrics::{self, MetricSummary, ScoredStream};
use crate::reference::{fit_reference, ReferenceModel};
use crate::rng;
use crate::simulator::{gen_stream, make_world, StreamItem, StreamSpec, SyntheticWorld, WorldParams};
use crate::windows::AccountWindow;

/// A world plus a reference model fitted on a sampled training set, which
/// also serves as the seed pool.
#[derive(Debug, Clone)]
pub struct Setup {
    pub world: SyntheticWorld,
    pub reference: Arc<ReferenceModel>,
    pub train_features: Vec<Vec<f32>>,
    pub train_labels: Vec<i64>,
}

impl Setup {
    pub fn new(params: WorldParams, train_per_class: usize) -> Result<Self> {
        let seed = params.seed;
        let world = make_world(params)?;
        let (train_features, train_labels) = world.sample_training(train_per_class, seed);
        let reference = Arc::new(fit_reference(&train_features, &train_labels, world.num_classes())?);
        Ok(Self {
            world,
            reference,
            train_features,
            train_labels,
        })
    }

    pub fn engine(&self, detector: DetectorConfig, seed: u64) -> Result<Engine> {
        Engine::new(
            Arc::clone(&self.reference),
            self.world.classifier(),
            &self.train_features,
            EngineConfig {
                detector,
                seed,
                ..EngineConfig::default()
            },
        )
    }

    pub fn stream(&self, spec: &StreamSpec, seed: u64) -> Result<Vec<StreamItem>> {
        gen_stream(&self.world, spec, seed)
    }
}

/// Sends `items` one by one through `account`'s window.
pub fn replay(engine: &Engine, account: &str, items: &[StreamItem]) -> Result<Vec<ItemOutcome>> {
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        out.extend(engine.process(account, std::slice::from_ref(&item.feature))?);
    }
    Ok(out)
}

/// Per-query scores of one benign and one malicious account.
pub fn detection_stream(
    setup: &Setup,
    detector: &DetectorConfig,
    benign: &StreamSpec,
    malicious: &StreamSpec,
    seed: u64,
) -> Result<ScoredStream> {
    let engine = setup.engine(
        DetectorConfig {
            threshold: f64::INFINITY,
            ..detector.clone()
        },
        seed,
    )?;
    let b = replay(&engine, "benign", &setup.stream(benign, seed)?)?;
    let m = replay(&engine, "malicious", &setup.stream(malicious, seed)?)?;
    Ok(ScoredStream::from_scores(
        &b.iter().map(|o| o.score).collect::<Vec<_>>(),
        &m.iter().map(|o| o.score).collect::<Vec<_>>(),
    ))
}

/// Scores a standalone window built from `features`.
pub fn score_window(detector: &Detector, classifier: &dyn Classifier, features: &[Vec<f32>]) -> Result<f64> {
    let mut w = AccountWindow::new("study", features.len(), classifier.dim());
    let mut last_logits = Vec::new();
    for f in features {
        let c = classifier.classify(f);
        w.push(f, c.class_id)?;
        last_logits = c.logits;
    }
    detector.score(&w, &last_logits)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub window_size: usize,
    pub gap: f64,
    pub benign_max: f64,
    pub malicious_min: f64,
}

/// For each window size, scores `windows_per_side` windows of `N` random
/// held-out benign samples and of `N` random surrogate samples, and reports
/// `min(malicious) - max(benign)`.
pub fn separation_study(
    setup: &Setup,
    detector: &DetectorConfig,
    window_sizes: &[usize],
    windows_per_side: usize,
    seed: u64,
) -> Result<Vec<GapPoint>> {
    let max_n = window_sizes.iter().copied().max().unwrap_or(1);
    let pool_len = (4 * max_n).max(256);
    let benign_pool = setup.stream(
        &StreamSpec {
            kind: crate::simulator::StreamKind::BenignId,
            length: pool_len,
        },
        seed,
    )?;
    let mal_pool = setup.stream(
        &StreamSpec {
            kind: crate::simulator::StreamKind::Malicious,
            length: pool_len,
        },
        seed,
    )?;
    let classifier = setup.world.classifier();
    let mut out = Vec::with_capacity(window_sizes.len());
    for &n in window_sizes {
        let det = Detector::new(
            Arc::clone(&setup.reference),
            DetectorConfig {
                window_size: n,
                ..detector.clone()
            },
        )?;
        let mut rng = rng::substream(seed, "separation-study", &n.to_string());
        let mut side = |pool: &[StreamItem]| -> Result<Vec<f64>> {
            (0..windows_per_side)
                .map(|_| {
                    let picks: Vec<Vec<f32>> = index::sample(&mut rng, pool.len(), n)
                        .iter()
                        .map(|i| pool[i].feature.clone())
                        .collect();
                    score_window(&det, classifier.as_ref(), &picks)
                })
                .collect()
        };
        let benign = side(&benign_pool)?;
        let malicious = side(&mal_pool)?;
        let gap = metrics::separation_gap(&benign, &malicious)?;
        out.push(GapPoint {
            window_size: n,
            gap,
            benign_max: benign.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            malicious_min: malicious.iter().copied().fold(f64::INFINITY, f64::min),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub metrics: MetricSummary,
}

/// Metrics of each variant on the same benign/malicious query streams.
pub fn variant_comparison(
    setup: &Setup,
    detector: &DetectorConfig,
    variants: &[Variant],
    benign: &StreamSpec,
    malicious: &StreamSpec,
    seed: u64,
) -> Result<Vec<VariantResult>> {
    variants
        .iter()
        .map(|&variant| {
            let cfg = DetectorConfig {
                variant,
                ..detector.clone()
            };
            let s = detection_stream(setup, &cfg, benign, malicious, seed)?;
            Ok(VariantResult {
                variant,
                metrics: metrics::summarize(&s)?,
            })
        })
        .collect()
}

/// Parameters of the bundled scenarios.
pub mod presets {
    use crate::simulator::{StreamKind, StreamSpec, WorldParams};

    /// Training samples per class used to fit references and seed windows.
    pub const TRAIN_PER_CLASS: usize = 500;
    pub const WINDOW_SIZE: usize = 8;
    pub const STUDY_WINDOW_SIZES: [usize; 4] = [4, 8, 16, 32];
    pub const STUDY_WINDOWS_PER_SIDE: usize = 200;
    /// Benign classes of the label-subset scenario.
    pub const SUBSET: [u32; 3] = [0, 1, 2];
    /// Per-coordinate feature shift of the label-subset benign stream.
    pub const SUBSET_SHIFT: f64 = 2.5;

    fn world(dim: usize, separation: f64, seed: u64) -> WorldParams {
        WorldParams {
            dim,
            classes: 10,
            surrogate_classes: 10,
            separation,
            seed,
        }
    }

    /// In-distribution benign vs. surrogate queries.
    pub fn detection_world(seed: u64) -> WorldParams {
        world(16, 8.0, seed)
    }

    /// Window-size study.
    pub fn separation_world(seed: u64) -> WorldParams {
        world(16, 6.0, seed)
    }

    pub fn label_subset_world(seed: u64) -> WorldParams {
        world(16, 8.0, seed)
    }

    pub fn benign_id(length: usize) -> StreamSpec {
        StreamSpec {
            kind: StreamKind::BenignId,
            length,
        }
    }

    pub fn malicious(length: usize) -> StreamSpec {
        StreamSpec {
            kind: StreamKind::Malicious,
            length,
        }
    }

    /// Benign queries from three classes only, with every coordinate shifted.
    pub fn label_subset_benign(dim: usize, length: usize) -> StreamSpec {
        StreamSpec {
            kind: StreamKind::BenignShift {
                shift: vec![SUBSET_SHIFT; dim],
                subset: Some(SUBSET.to_vec()),
            },
            length,
        }
    }
}
