//! Dense symmetric-matrix numerics: moment estimation, PSD square roots and the
//! squared Fréchet distance between two Gaussians.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SentinelError};

/// Absolute tolerance on `|m[i][j] - m[j][i]|`.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Eigenvalues down to this are treated as round-off and clamped to zero.
pub const NEGATIVE_EIGEN_TOL: f64 = -1e-8;

/// A finite embedding vector, stored at 32-bit precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f32>);

impl FeatureVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(SentinelError::InvalidArgument(format!(
                "feature contains non-finite value {bad}"
            )));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }
}

impl AsRef<[f32]> for FeatureVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// Square matrix that is symmetric to within [`SYMMETRY_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(SentinelError::DimensionMismatch {
                expected: m.nrows(),
                actual: m.ncols(),
            });
        }
        let asym = max_asymmetry(&m);
        if asym > SYMMETRY_TOL || asym.is_nan() {
            return Err(SentinelError::NotSymmetric(asym));
        }
        Ok(Self(m))
    }

    pub fn zeros(d: usize) -> Self {
        Self(DMatrix::zeros(d, d))
    }

    pub fn identity(d: usize) -> Self {
        Self(DMatrix::identity(d, d))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Wraps a matrix known to be symmetric by construction, mirroring the
    /// upper triangle to remove round-off asymmetry.
    pub(crate) fn from_symmetric_unchecked(mut m: DMatrix<f64>) -> Self {
        symmetrize(&mut m);
        Self(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// `self + eps * I`
    pub fn regularized(&self, eps: f64) -> Self {
        let mut m = self.0.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += eps;
        }
        Self(m)
    }
}

/// Mean, covariance and sample count of one Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: SymMatrix,
    pub count: u64,
}

impl Moments {
    pub fn new(mean: DVector<f64>, cov: SymMatrix, count: u64) -> Result<Self> {
        if count == 0 {
            return Err(SentinelError::EmptySampleSet);
        }
        if cov.dim() != mean.len() {
            return Err(SentinelError::DimensionMismatch {
                expected: mean.len(),
                actual: cov.dim(),
            });
        }
        Ok(Self { mean, cov, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Same distribution with every mean coordinate shifted by `shift`.
    pub fn shifted(&self, shift: &DVector<f64>) -> Self {
        Self {
            mean: &self.mean + shift,
            cov: self.cov.clone(),
            count: self.count,
        }
    }
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = (m[(i, j)] - m[(j, i)]).abs();
            if diff > worst || diff.is_nan() {
                worst = diff;
            }
        }
    }
    worst
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Stacks samples as rows of an `n x d` matrix in f64, checking dimensions.
pub(crate) fn stack_rows<S, T>(samples: &[S]) -> Result<DMatrix<f64>>
where
    S: AsRef<[T]>,
    T: Copy + Into<f64>,
{
    let first = samples.first().ok_or(SentinelError::EmptySampleSet)?;
    let d = first.as_ref().len();
    let mut rows = DMatrix::zeros(samples.len(), d);
    for (i, s) in samples.iter().enumerate() {
        let s = s.as_ref();
        if s.len() != d {
            return Err(SentinelError::DimensionMismatch {
                expected: d,
                actual: s.len(),
            });
        }
        for (j, &v) in s.iter().enumerate() {
            rows[(i, j)] = v.into();
        }
    }
    Ok(rows)
}

/// Mean and biased (divide-by-n) covariance of the rows of `rows`.
///
/// Returns the centered rows alongside, which callers reuse for Gram-form
/// products.
pub(crate) fn row_moments(mut rows: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = rows.nrows();
    let d = rows.ncols();
    let mut mean = DVector::zeros(d);
    for i in 0..n {
        for j in 0..d {
            mean[j] += rows[(i, j)];
        }
    }
    mean /= n as f64;
    for i in 0..n {
        for j in 0..d {
            rows[(i, j)] -= mean[j];
        }
    }
    let mut cov = rows.tr_mul(&rows);
    cov /= n as f64;
    symmetrize(&mut cov);
    (mean, cov, rows)
}

/// Arithmetic mean and biased sample covariance, accumulated in input order.
pub fn estimate_moments<S, T>(samples: &[S]) -> Result<Moments>
where
    S: AsRef<[T]>,
    T: Copy + Into<f64>,
{
    let rows = stack_rows(samples)?;
    let n = rows.nrows();
    let (mean, cov, _) = row_moments(rows);
    Ok(Moments {
        mean,
        cov: SymMatrix(cov),
        count: n as u64,
    })
}

/// Eigenvalues of a symmetric matrix, ascending.
pub(crate) fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// `V diag(sqrt(max(l, 0))) V^T` without validating the spectrum.
pub(crate) fn psd_sqrt_clamped(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
    let mut out = scaled * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

/// Principal square root of a symmetric PSD matrix.
pub fn sqrtm_psd(m: &SymMatrix) -> Result<SymMatrix> {
    let asym = max_asymmetry(m.matrix());
    if asym > SYMMETRY_TOL || asym.is_nan() {
        return Err(SentinelError::NotSymmetric(asym));
    }
    let eig = m.matrix().clone().symmetric_eigen();
    if let Some(&worst) = eig
        .eigenvalues
        .iter()
        .filter(|&&l| l < NEGATIVE_EIGEN_TOL)
        .min_by(|a, b| a.total_cmp(b))
    {
        return Err(SentinelError::IndefiniteMatrix(worst));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
    Ok(SymMatrix::from_symmetric_unchecked(
        scaled * eig.eigenvectors.transpose(),
    ))
}

/// `tr[(A B)^{1/2}]` through the symmetrized product `A^{1/2} B A^{1/2}`.
pub(crate) fn trace_sqrt_product(sqrt_a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let mut prod = sqrt_a * b * sqrt_a;
    symmetrize(&mut prod);
    sum_sqrt_clamped(&sym_eigenvalues(&prod))
}

pub(crate) fn sum_sqrt_clamped(eigenvalues: &[f64]) -> f64 {
    eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum()
}

fn check_same_dim(a: &Moments, b: &Moments) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(SentinelError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(())
}

/// Squared Fréchet distance
/// `|mu_r - mu_a|^2 + tr[S_r + S_a - 2 (S_r S_a)^{1/2}]`, clamped at zero.
pub fn frechet_distance(reference: &Moments, query: &Moments) -> Result<f64> {
    check_same_dim(reference, query)?;
    if reference.mean == query.mean && reference.cov == query.cov {
        return Ok(0.0);
    }
    let mean_term = (&reference.mean - &query.mean).norm_squared();
    let sqrt_ref = psd_sqrt_clamped(reference.cov.matrix());
    let cross = trace_sqrt_product(&sqrt_ref, query.cov.matrix());
    let dist = mean_term + reference.cov.trace() + query.cov.trace() - 2.0 * cross;
    Ok(dist.max(0.0))
}

/// [`frechet_distance`] after adding `eps * I` to both covariances.
pub fn frechet_distance_regularized(reference: &Moments, query: &Moments, eps: f64) -> Result<f64> {
    check_same_dim(reference, query)?;
    let r = Moments {
        cov: reference.cov.regularized(eps),
        ..reference.clone()
    };
    let q = Moments {
        cov: query.cov.regularized(eps),
        ..query.clone()
    };
    frechet_distance(&r, &q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gauss(mean: &[f64], diag: &[f64]) -> Moments {
        Moments::new(
            DVector::from_column_slice(mean),
            SymMatrix::from_diagonal(diag),
            10,
        )
        .unwrap()
    }

    #[test]
    fn moments_two_points() {
        let m = estimate_moments(&[vec![0.0f64], vec![2.0]]).unwrap();
        assert_eq!(m.mean[0], 1.0);
        assert_eq!(m.cov.matrix()[(0, 0)], 1.0);
        assert_eq!(m.count, 2);
    }

    #[test]
    fn moments_singleton_has_zero_cov() {
        let m = estimate_moments(&[vec![3.0f64, -1.0]]).unwrap();
        assert_eq!(m.mean.as_slice(), &[3.0, -1.0]);
        assert_eq!(m.cov, SymMatrix::zeros(2));
        assert_eq!(m.count, 1);
    }

    #[test]
    fn moments_errors() {
        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(
            estimate_moments(&empty),
            Err(SentinelError::EmptySampleSet)
        ));
        assert!(matches!(
            estimate_moments(&[vec![1.0f64, 2.0], vec![1.0]]),
            Err(SentinelError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sqrtm_closed_forms() {
        let id = sqrtm_psd(&SymMatrix::identity(3)).unwrap();
        assert!((id.matrix() - DMatrix::identity(3, 3)).norm() < 1e-14);
        let r = sqrtm_psd(&SymMatrix::from_diagonal(&[4.0, 9.0])).unwrap();
        assert!((r.matrix()[(0, 0)] - 2.0).abs() < 1e-14);
        assert!((r.matrix()[(1, 1)] - 3.0).abs() < 1e-14);
        assert!(r.matrix()[(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn sqrtm_random_psd_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let a = SymMatrix::new(&b * b.transpose()).unwrap();
        let s = sqrtm_psd(&a).unwrap();
        let back = s.matrix() * s.matrix();
        let rel = (back - a.matrix()).norm() / a.matrix().norm();
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn sqrtm_rejects_bad_input() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            SymMatrix::new(asym),
            Err(SentinelError::NotSymmetric(_))
        ));
        let indefinite = SymMatrix::from_diagonal(&[1.0, -1e-3]);
        assert!(matches!(
            sqrtm_psd(&indefinite),
            Err(SentinelError::IndefiniteMatrix(_))
        ));
        // round-off negatives are clamped
        let tiny = SymMatrix::from_diagonal(&[1.0, -1e-9]);
        let s = sqrtm_psd(&tiny).unwrap();
        assert_eq!(s.matrix()[(1, 1)], 0.0);
    }

    #[test]
    fn frechet_closed_forms() {
        let a = gauss(&[0.0], &[1.0]);
        assert_eq!(frechet_distance(&a, &a).unwrap(), 0.0);
        let b = gauss(&[3.0], &[1.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 9.0).abs() < 1e-12);
        let c = gauss(&[0.0], &[4.0]);
        assert!((frechet_distance(&a, &c).unwrap() - 1.0).abs() < 1e-12);
        let r = gauss(&[0.0, 0.0], &[1.0, 4.0]);
        let q = gauss(&[1.0, 1.0], &[4.0, 1.0]);
        assert!((frechet_distance(&r, &q).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn frechet_dimension_mismatch() {
        let a = gauss(&[0.0], &[1.0]);
        let b = gauss(&[0.0, 0.0], &[1.0, 1.0]);
        assert!(matches!(
            frechet_distance(&a, &b),
            Err(SentinelError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn regularized_distance_shrinks_towards_exact() {
        let a = gauss(&[0.0], &[1.0]);
        let c = gauss(&[0.0], &[4.0]);
        let exact = frechet_distance(&a, &c).unwrap();
        let reg = frechet_distance_regularized(&a, &c, 1e-6).unwrap();
        // (sqrt(4+e) - sqrt(1+e))^2 = 1 - e/2 + O(e^2)
        assert!((reg - exact + 5e-7).abs() < 1e-10);
    }
}
