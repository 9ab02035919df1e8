//! Frechet distance between Gaussian fits of two embedding sets.
//!
//! ```text
//! d^2 = ||mu_a - mu_b||^2 + Tr(S_a) + Tr(S_b) - 2 Tr((S_a S_b)^{1/2})
//! ```
//!
//! The trace of the matrix square root is taken from the symmetric product
//! `S_a^{1/2} S_b S_a^{1/2}`, which has the same eigenvalues as `S_a S_b` but
//! stays symmetric, so a symmetric eigensolver applies.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::embio::EmbeddingMatrix;

const SYMMETRY_TOL: f64 = 1e-9;
/// Eigenvalues below `-PSD_TOL * max(1, lambda_max)` are rejected.
const PSD_TOL: f64 = 1e-6;
const EIGEN_MAX_ITER: usize = 100_000;

#[derive(Debug, Error, PartialEq)]
pub enum FrechetError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("covariance is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("covariance is not positive semi-definite (eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("symmetric eigensolver did not converge")]
    SqrtFailure,
    #[error("invalid statistics: {0}")]
    Invalid(String),
}

/// Mean, unbiased covariance and sample count of an embedding set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    count: usize,
}

impl GaussianStats {
    /// Validate user-supplied statistics: square symmetric covariance of the
    /// mean's dimension, PSD up to rounding, and `count >= 2`.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self, FrechetError> {
        if count < 2 {
            return Err(FrechetError::TooFewSamples(count));
        }
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(FrechetError::DimMismatch {
                left: d,
                right: cov.nrows(),
            });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(FrechetError::Invalid("non-finite entry".into()));
        }
        let asym = (&cov - cov.transpose()).amax();
        if asym > SYMMETRY_TOL {
            return Err(FrechetError::NotSymmetric(asym));
        }
        let eig = symmetric_eigen(cov.clone())?;
        let lmax = eig.eigenvalues.max();
        let lmin = eig.eigenvalues.min();
        if lmin < -PSD_TOL * lmax.max(1.0) {
            return Err(FrechetError::NotPsd(lmin));
        }
        Ok(Self { mean, cov, count })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }
}

fn symmetric_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, FrechetError> {
    SymmetricEigen::try_new(m, f64::EPSILON, EIGEN_MAX_ITER).ok_or(FrechetError::SqrtFailure)
}

/// Column means and unbiased (`n - 1`) covariance, in `f64`.
pub fn gaussian_stats(m: &EmbeddingMatrix) -> Result<GaussianStats, FrechetError> {
    let n = m.rows();
    if n < 2 {
        return Err(FrechetError::TooFewSamples(n));
    }
    let d = m.dims();
    let samples = DMatrix::from_row_iterator(n, d, m.as_slice().iter().map(|&v| v as f64));
    let mean = samples.row_mean().transpose();
    let mut centered = samples;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.tr_mul(&centered) / (n - 1) as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats {
        mean,
        cov,
        count: n,
    })
}

/// `S^{1/2}` of a symmetric PSD matrix, with negative eigenvalues clamped to 0.
pub fn psd_sqrt(s: &DMatrix<f64>) -> Result<DMatrix<f64>, FrechetError> {
    let eig = symmetric_eigen(s.clone())?;
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let scaled = v * DMatrix::from_diagonal(&roots);
    let root = scaled * v.transpose();
    Ok((&root + root.transpose()) * 0.5)
}

/// `Tr((S_a S_b)^{1/2})` via the eigenvalues of `S_a^{1/2} S_b S_a^{1/2}`.
pub fn psd_sqrt_product_trace(sa: &DMatrix<f64>, sb: &DMatrix<f64>) -> Result<f64, FrechetError> {
    if sa.shape() != sb.shape() || sa.nrows() != sa.ncols() {
        return Err(FrechetError::DimMismatch {
            left: sa.nrows(),
            right: sb.nrows(),
        });
    }
    let ra = psd_sqrt(sa)?;
    let mid = &ra * sb * &ra;
    let mid = (&mid + mid.transpose()) * 0.5;
    let eig = symmetric_eigen(mid)?;
    Ok(eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum())
}

/// Squared Frechet (Wasserstein-2) distance between two Gaussians. Small
/// negative values from rounding are clamped to zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64, FrechetError> {
    if a.dims() != b.dims() {
        return Err(FrechetError::DimMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let cross = psd_sqrt_product_trace(&a.cov, &b.cov)?;
    let d = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Fit both embedding sets and return their Frechet distance.
pub fn frechet_between(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<f64, FrechetError> {
    frechet_distance(&gaussian_stats(a)?, &gaussian_stats(b)?)
}
