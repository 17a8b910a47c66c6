//! Gaussian moments of a feature set and the closed-form Fréchet distance
//! between two Gaussians.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::real::Real;

/// Eigenvalues below this fraction of the trace are treated as zero.
pub const EIGEN_CLAMP: f64 = 1e-10;
/// Eigenvalues more negative than this fraction of the trace mean the
/// matrix is not PSD.
pub const PSD_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`, normalized by `n − 1`.
    pub cov: Vec<f64>,
}

impl GaussianMoments {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 {
            return Err(Error::Shape("zero-dimensional Gaussian".into()));
        }
        if cov.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                actual: cov.len(),
                context: "covariance entries",
            });
        }
        if mean.iter().chain(&cov).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gaussian moments".into()));
        }
        let scale = (0..dim).map(|i| cov[i * dim + i].abs()).fold(0.0, f64::max).max(1.0);
        for i in 0..dim {
            for j in 0..i {
                if (cov[i * dim + j] - cov[j * dim + i]).abs() > 1e-9 * scale {
                    return Err(Error::InvalidParameter(format!("covariance is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { dim, mean, cov })
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.cov[i * self.dim + i]).sum()
    }

    fn matrix(&self) -> DMatrix<f64> {
        // symmetrize so round-off asymmetry cannot leak into the eigensolver
        let d = self.dim;
        DMatrix::from_fn(d, d, |i, j| 0.5 * (self.cov[i * d + j] + self.cov[j * d + i]))
    }
}

/// Sample mean and `n − 1` covariance, accumulated in f64.
pub fn gaussian_moments(set: &FeatureSet) -> Result<GaussianMoments> {
    let (n, d) = (set.count(), set.dim());
    if n < 2 {
        return Err(Error::InsufficientSamples(format!("covariance needs at least 2 samples, got {n}")));
    }
    let x = set.rows::<f64>();
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centred = x;
    for row in centred.chunks_exact_mut(d) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut cov = vec![0.0; d * d];
    f64::gemm(d, n, d, &centred, true, &centred, false, 0.0, &mut cov);
    let denom = (n - 1) as f64;
    for v in &mut cov {
        *v /= denom;
    }
    GaussianMoments::new(mean, cov)
}

fn checked_eigenvalues(m: DMatrix<f64>, trace: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let eig = SymmetricEigen::new(m);
    let scale = trace.abs();
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOLERANCE * scale {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
            tolerance: PSD_TOLERANCE * scale,
        });
    }
    let clamp = EIGEN_CLAMP * scale;
    let values = eig.eigenvalues.iter().map(|&l| if l < clamp { 0.0 } else { l }).collect();
    Ok((values, eig.eigenvectors))
}

/// `‖μp − μq‖² + tr Σp + tr Σq − 2·tr (Σp^{1/2} Σq Σp^{1/2})^{1/2}`, via
/// two symmetric eigendecompositions so no general matrix square root is
/// needed.
pub fn frechet_distance(p: &GaussianMoments, q: &GaussianMoments) -> Result<f64> {
    if p.dim != q.dim {
        return Err(Error::DimensionMismatch {
            expected: p.dim,
            actual: q.dim,
            context: "Gaussian moments",
        });
    }
    let (tp, tq) = (p.trace(), q.trace());
    let (lp, vp) = checked_eigenvalues(p.matrix(), tp)?;
    checked_eigenvalues(q.matrix(), tq)?;
    let root = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(p.dim, lp.iter().map(|l| l.sqrt())));
    let sqrt_p = &vp * root * vp.transpose();
    let mut m = &sqrt_p * q.matrix() * &sqrt_p;
    m = (&m + m.transpose()) * 0.5;
    let (lm, _) = checked_eigenvalues(m, tp.max(tq))?;
    let cross: f64 = lm.iter().map(|l| l.sqrt()).sum();
    let shift: f64 = p.mean.iter().zip(&q.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let fd = shift + tp + tq - 2.0 * cross;
    // round-off can push identical inputs a hair below zero
    Ok(fd.max(0.0))
}
