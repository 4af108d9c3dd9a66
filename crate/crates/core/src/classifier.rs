//! The target-model plug-in interface and a Gaussian discriminant stand-in.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Result, SentinelError};
use crate::reference::ReferenceModel;

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub class_id: u32,
    pub logits: Vec<f64>,
}

/// Deterministic feature -> (class, logits) map. Must be callable from many
/// threads at once.
pub trait Classifier: Send + Sync {
    fn num_classes(&self) -> usize;
    fn dim(&self) -> usize;
    fn classify(&self, feature: &[f32]) -> Classification;
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax_lowest(logits: &[f64]) -> u32 {
    let mut best = 0;
    for (k, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = k;
        }
    }
    best as u32
}

#[derive(Debug, Clone)]
struct ClassDensity {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

/// Classifies by the largest Gaussian log-density under uniform priors.
#[derive(Debug, Clone)]
pub struct GaussianDiscriminant {
    dim: usize,
    classes: Vec<ClassDensity>,
}

impl GaussianDiscriminant {
    /// Builds from class `(mean, covariance)` pairs. Singular covariances get
    /// a small ridge until the Cholesky factorization succeeds.
    pub fn new(gaussians: &[(DVector<f64>, DMatrix<f64>)]) -> Result<Self> {
        let dim = gaussians
            .first()
            .map(|(m, _)| m.len())
            .ok_or_else(|| SentinelError::InvalidArgument("classifier needs >= 1 class".into()))?;
        let mut classes = Vec::with_capacity(gaussians.len());
        for (mean, cov) in gaussians {
            if mean.len() != dim || cov.nrows() != dim || cov.ncols() != dim {
                return Err(SentinelError::DimensionMismatch {
                    expected: dim,
                    actual: mean.len(),
                });
            }
            let chol = factor_with_ridge(cov)?;
            let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let log_norm = -0.5 * (log_det + dim as f64 * (2.0 * std::f64::consts::PI).ln());
            classes.push(ClassDensity {
                mean: mean.clone(),
                chol,
                log_norm,
            });
        }
        Ok(Self { dim, classes })
    }

    pub fn from_reference(model: &ReferenceModel) -> Result<Self> {
        let gs: Vec<_> = model
            .classes()
            .iter()
            .map(|c| (c.stats.mean.clone(), c.stats.cov.matrix().clone()))
            .collect();
        Self::new(&gs)
    }

    pub fn log_densities(&self, feature: &[f32]) -> Vec<f64> {
        let x = DVector::from_iterator(self.dim, feature.iter().map(|&v| v as f64));
        self.classes
            .iter()
            .map(|c| {
                let diff = &x - &c.mean;
                let z = c
                    .chol
                    .l_dirty()
                    .solve_lower_triangular(&diff)
                    .expect("cholesky factor has a positive diagonal");
                c.log_norm - 0.5 * z.norm_squared()
            })
            .collect()
    }
}

fn factor_with_ridge(cov: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let d = cov.nrows();
    let scale = (cov.trace() / d as f64).abs().max(1e-12);
    let mut ridge = 0.0;
    for _ in 0..12 {
        let mut m = cov.clone();
        for i in 0..d {
            m[(i, i)] += ridge;
        }
        if let Some(c) = Cholesky::new(m) {
            return Ok(c);
        }
        ridge = if ridge == 0.0 { scale * 1e-10 } else { ridge * 10.0 };
    }
    Err(SentinelError::IndefiniteMatrix(f64::NAN))
}

impl Classifier for GaussianDiscriminant {
    fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn classify(&self, feature: &[f32]) -> Classification {
        let logits = self.log_densities(feature);
        Classification {
            class_id: argmax_lowest(&logits),
            logits,
        }
    }
}
