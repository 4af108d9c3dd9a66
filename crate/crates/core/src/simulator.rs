//! Synthetic worlds: training-class and surrogate-class Gaussians in feature
//! space, query streams drawn from them, and the adaptive BL/ML mixing attack.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifier::{Classification, Classifier, GaussianDiscriminant};
use crate::detector::DetectorConfig;
use crate::error::{Result, SentinelError};
use crate::gateway::{Engine, EngineConfig};
use crate::reference::{ClassReference, ReferenceModel};
use crate::rng;
use crate::tensor_stats::{Moments, SymMatrix};

const MAX_PLACEMENT_DRAWS: usize = 200_000;

#[derive(Debug, Clone)]
pub struct ClassGenerator {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    chol_l: DMatrix<f64>,
}

impl ClassGenerator {
    fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let chol_l = nalgebra::Cholesky::new(cov.clone())
            .ok_or(SentinelError::IndefiniteMatrix(f64::NAN))?
            .l();
        Ok(Self { mean, cov, chol_l })
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let d = self.mean.len();
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = &self.mean + &self.chol_l * z;
        x.iter().map(|&v| v as f32).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub dim: usize,
    pub classes: usize,
    pub surrogate_classes: usize,
    /// Minimum distance between any training-class mean and any other
    /// (training or surrogate) mean, in units of the average generator
    /// standard deviation.
    pub separation: f64,
    pub seed: u64,
}

/// Training-class and surrogate-class generators plus the Gaussian
/// discriminant that stands in for the target model.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub params: WorldParams,
    pub train: Vec<ClassGenerator>,
    pub surrogate: Vec<ClassGenerator>,
    /// Average per-coordinate generator standard deviation.
    pub sigma: f64,
    classifier: Arc<GaussianDiscriminant>,
}

pub fn make_world(params: WorldParams) -> Result<SyntheticWorld> {
    let WorldParams {
        dim: d,
        classes: k,
        surrogate_classes: ks,
        separation,
        seed,
    } = params;
    if d == 0 || k == 0 || ks == 0 {
        return Err(SentinelError::InvalidArgument("d, K and K' must be >= 1".into()));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(SentinelError::InvalidArgument(format!(
            "separation {separation} must be > 0"
        )));
    }
    let mut rng = rng::substream(seed, rng::WORLD, "world");
    let covs: Vec<DMatrix<f64>> = (0..k + ks)
        .map(|_| {
            let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut c = &a * a.transpose() / d as f64;
            for i in 0..d {
                c[(i, i)] += 0.1;
            }
            c
        })
        .collect();
    let sigma = (covs.iter().map(|c| c.trace() / d as f64).sum::<f64>() / covs.len() as f64).sqrt();
    let min_dist = separation * sigma;

    // Sequential rejection sampling; the proposal spread widens slowly on
    // rejections so crowded low-dimensional worlds still terminate.
    let mut spread = 2.0 * min_dist / (2.0 * d as f64).sqrt();
    let mut means: Vec<DVector<f64>> = Vec::with_capacity(k + ks);
    let mut draws = 0;
    while means.len() < k + ks {
        draws += 1;
        if draws > MAX_PLACEMENT_DRAWS {
            return Err(SentinelError::SeparationInfeasible(separation));
        }
        let cand = DVector::from_iterator(d, (0..d).map(|_| spread * rng.sample::<f64, _>(StandardNormal)));
        let is_train = means.len() < k;
        let ok = means.iter().enumerate().all(|(j, m)| {
            // surrogate-surrogate pairs are unconstrained
            let constrained = is_train || j < k;
            !constrained || (m - &cand).norm() >= min_dist
        });
        if ok {
            means.push(cand);
        } else {
            spread *= 1.002;
        }
    }

    let mut gens = means
        .into_iter()
        .zip(covs)
        .map(|(m, c)| ClassGenerator::new(m, c))
        .collect::<Result<Vec<_>>>()?;
    let surrogate = gens.split_off(k);
    let train = gens;
    let classifier = Arc::new(GaussianDiscriminant::new(
        &train
            .iter()
            .map(|g| (g.mean.clone(), g.cov.clone()))
            .collect::<Vec<_>>(),
    )?);
    Ok(SyntheticWorld {
        params,
        train,
        surrogate,
        sigma,
        classifier,
    })
}

impl SyntheticWorld {
    pub fn dim(&self) -> usize {
        self.params.dim
    }

    pub fn num_classes(&self) -> usize {
        self.train.len()
    }

    /// Minimum mean distance in feature units.
    pub fn separation_required(&self) -> f64 {
        self.params.separation * self.sigma
    }

    pub fn classifier(&self) -> Arc<GaussianDiscriminant> {
        Arc::clone(&self.classifier)
    }

    /// Log-density classification under the training-class generators.
    pub fn classify_gd(&self, feature: &[f32]) -> Classification {
        self.classifier.classify(feature)
    }

    /// Reference model holding the exact generator moments.
    pub fn generator_reference(&self, count: u64) -> ReferenceModel {
        let classes = self
            .train
            .iter()
            .enumerate()
            .map(|(i, g)| ClassReference {
                class_id: i as u32,
                stats: Moments {
                    mean: g.mean.clone(),
                    cov: SymMatrix::from_symmetric_unchecked(g.cov.clone()),
                    count,
                },
            })
            .collect();
        ReferenceModel::from_classes(self.dim(), classes).expect("generator moments are valid")
    }

    /// `per_class` labeled samples from every training class, class-major.
    pub fn sample_training(&self, per_class: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<i64>) {
        let mut rng = rng::substream(seed, "training", "");
        let mut feats = Vec::with_capacity(per_class * self.train.len());
        let mut labels = Vec::with_capacity(per_class * self.train.len());
        for (k, g) in self.train.iter().enumerate() {
            for _ in 0..per_class {
                feats.push(g.sample(&mut rng));
                labels.push(k as i64);
            }
        }
        (feats, labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StreamKind {
    /// Training-class samples, uniform class prior.
    BenignId,
    /// Benign samples with every feature shifted by `shift` (empty = none)
    /// and/or classes restricted to `subset`.
    BenignShift {
        shift: Vec<f64>,
        subset: Option<Vec<u32>>,
    },
    /// Surrogate-class samples, uniform over surrogate classes.
    Malicious,
    /// `bl_budget` periods of one benign-looking sample followed by
    /// `M = ceil(100 / evasion_pct) - 1` malicious-looking samples.
    AdaptiveMix {
        bl_budget: usize,
        evasion_pct: f64,
        /// Place every BL sample exactly at the mean of training class
        /// `bl_class` and every ML sample exactly at surrogate mean 0.
        exact_points: bool,
        bl_class: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub kind: StreamKind,
    /// Ignored for adaptive streams, whose length is `H * (1 + M)`.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamItem {
    pub feature: Vec<f32>,
    /// Ground-truth training class, or -1 for surrogate samples.
    pub label: i64,
    pub is_malicious: bool,
    /// Benign-looking item of an adaptive stream.
    pub is_bl: bool,
}

/// `M = ceil(100 / x) - 1`
pub fn ml_per_bl(evasion_pct: f64) -> Result<usize> {
    if !(evasion_pct > 0.0 && evasion_pct <= 100.0) {
        return Err(SentinelError::InvalidArgument(format!(
            "evasion percentage {evasion_pct} outside (0, 100]"
        )));
    }
    Ok((100.0 / evasion_pct).ceil() as usize - 1)
}

/// Missed malicious queries for the adaptive layout: `N * H` when `N <= M`,
/// `(1 + M) * H` otherwise.
pub fn missed_formula(bl_budget: usize, m: usize, window: usize) -> usize {
    if window <= m {
        window * bl_budget
    } else {
        (1 + m) * bl_budget
    }
}

fn f32_vec(v: &DVector<f64>) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn gen_stream(world: &SyntheticWorld, spec: &StreamSpec, seed: u64) -> Result<Vec<StreamItem>> {
    let key = spec_key(spec);
    let mut rng = rng::substream(seed, "stream", &key);
    let k = world.train.len() as u32;
    let benign = |rng: &mut ChaCha8Rng, classes: &[u32], shift: &[f64]| {
        let c = classes[rng.random_range(0..classes.len())];
        let mut f = world.train[c as usize].sample(rng);
        for (x, s) in f.iter_mut().zip(shift) {
            *x = (*x as f64 + s) as f32;
        }
        StreamItem {
            feature: f,
            label: c as i64,
            is_malicious: false,
            is_bl: false,
        }
    };
    let malicious = |rng: &mut ChaCha8Rng| {
        let s = rng.random_range(0..world.surrogate.len());
        StreamItem {
            feature: world.surrogate[s].sample(rng),
            label: -1,
            is_malicious: true,
            is_bl: false,
        }
    };
    let all: Vec<u32> = (0..k).collect();
    match &spec.kind {
        StreamKind::BenignId => Ok((0..spec.length).map(|_| benign(&mut rng, &all, &[])).collect()),
        StreamKind::BenignShift { shift, subset } => {
            if !shift.is_empty() && shift.len() != world.dim() {
                return Err(SentinelError::DimensionMismatch {
                    expected: world.dim(),
                    actual: shift.len(),
                });
            }
            let classes = match subset {
                Some(s) if s.is_empty() => return Err(SentinelError::InvalidSubset),
                Some(s) => {
                    if let Some(&bad) = s.iter().find(|&&c| c >= k) {
                        return Err(SentinelError::UnknownClassId(bad));
                    }
                    s.clone()
                }
                None => all.clone(),
            };
            Ok((0..spec.length)
                .map(|_| benign(&mut rng, &classes, shift))
                .collect())
        }
        StreamKind::Malicious => Ok((0..spec.length).map(|_| malicious(&mut rng)).collect()),
        StreamKind::AdaptiveMix {
            bl_budget,
            evasion_pct,
            exact_points,
            bl_class,
        } => {
            let m = ml_per_bl(*evasion_pct)?;
            if *bl_class >= k {
                return Err(SentinelError::UnknownClassId(*bl_class));
            }
            let mut out = Vec::with_capacity(bl_budget * (1 + m));
            for _ in 0..*bl_budget {
                let mut bl = if *exact_points {
                    StreamItem {
                        feature: f32_vec(&world.train[*bl_class as usize].mean),
                        label: *bl_class as i64,
                        is_malicious: false,
                        is_bl: false,
                    }
                } else {
                    benign(&mut rng, &all, &[])
                };
                bl.is_malicious = true;
                bl.is_bl = true;
                out.push(bl);
                for _ in 0..m {
                    out.push(if *exact_points {
                        StreamItem {
                            feature: f32_vec(&world.surrogate[0].mean),
                            label: -1,
                            is_malicious: true,
                            is_bl: false,
                        }
                    } else {
                        malicious(&mut rng)
                    });
                }
            }
            Ok(out)
        }
    }
}

/// Stable per-spec stream key so distinct specs draw from distinct streams.
fn spec_key(spec: &StreamSpec) -> String {
    format!("{:?}", spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissedReport {
    pub missed: usize,
    pub formula: usize,
    pub stream_len: usize,
    pub ml_per_bl: usize,
    /// Lowest score of any window holding only ML samples.
    pub pure_ml_floor: f64,
    /// Highest score of any window holding at least one BL sample.
    pub one_bl_ceiling: f64,
    pub threshold: f64,
}

/// Runs the adaptive mixing attack through a defended engine and counts the
/// malicious queries it lets through.
///
/// BL samples sit exactly at a training-class mean and ML samples exactly at
/// a surrogate mean; the window is pre-filled with ML samples. The threshold
/// is set midway between the pure-ML score floor and the one-BL ceiling, and
/// [`SentinelError::PremiseViolated`] is returned when no such gap exists.
pub fn count_missed(
    world: &SyntheticWorld,
    detector: &DetectorConfig,
    bl_budget: usize,
    evasion_pct: f64,
    seed: u64,
) -> Result<MissedReport> {
    let m = ml_per_bl(evasion_pct)?;
    let n = detector.window_size;
    let stream = gen_stream(
        world,
        &StreamSpec {
            kind: StreamKind::AdaptiveMix {
                bl_budget,
                evasion_pct,
                exact_points: true,
                bl_class: 0,
            },
            length: 0,
        },
        seed,
    )?;
    let reference = Arc::new(world.generator_reference(10_000));
    let classifier = world.classifier();
    let (pool, _) = world.sample_training(n.div_ceil(world.num_classes()).max(1), seed);
    let ml_point = f32_vec(&world.surrogate[0].mean);
    let ml_class = classifier.classify(&ml_point).class_id;
    let prefill: Vec<(Vec<f32>, u32)> = vec![(ml_point, ml_class); n];
    let features: Vec<Vec<f32>> = stream.iter().map(|s| s.feature.clone()).collect();

    let run = |threshold: f64| -> Result<(f64, Vec<f64>, Vec<bool>)> {
        let engine = Engine::new(
            Arc::clone(&reference),
            classifier.clone(),
            &pool,
            EngineConfig {
                detector: DetectorConfig {
                    threshold,
                    ..detector.clone()
                },
                seed,
                ..EngineConfig::default()
            },
        )?;
        engine.prefill_window("attacker", &prefill)?;
        let prefill_score = engine.detector().score(
            &engine.window("attacker").expect("prefilled"),
            &[],
        )?;
        let out = engine.process("attacker", &features)?;
        Ok((
            prefill_score,
            out.iter().map(|o| o.score).collect(),
            out.iter().map(|o| o.poisoned).collect(),
        ))
    };

    let (prefill_score, scores, _) = run(f64::INFINITY)?;
    let mut floor = prefill_score;
    let mut ceiling = f64::NEG_INFINITY;
    let mut last_bl: Option<usize> = None;
    for (i, (item, &s)) in stream.iter().zip(&scores).enumerate() {
        if item.is_bl {
            last_bl = Some(i);
        }
        let holds_bl = last_bl.is_some_and(|b| i - b < n);
        if holds_bl {
            ceiling = ceiling.max(s);
        } else {
            floor = floor.min(s);
        }
    }
    if ceiling >= floor {
        return Err(SentinelError::PremiseViolated(format!(
            "one-BL ceiling {ceiling} >= pure-ML floor {floor} (N={n}, M={m})"
        )));
    }
    let threshold = if ceiling.is_finite() {
        0.5 * (floor + ceiling)
    } else {
        floor - 1.0
    };
    let (_, _, flagged) = run(threshold)?;
    let missed = flagged.iter().filter(|&&f| !f).count();
    Ok(MissedReport {
        missed,
        formula: missed_formula(bl_budget, m, n),
        stream_len: stream.len(),
        ml_per_bl: m,
        pure_ml_floor: floor,
        one_bl_ceiling: ceiling,
        threshold,
    })
}
