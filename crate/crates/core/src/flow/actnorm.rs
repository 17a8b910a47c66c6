use log::warn;

use crate::error::{Error, Result};
use crate::real::Real;

/// Per-dimension affine layer `y = (x − loc) · exp(−log_scale)`.
///
/// Log-determinant per sample is `−Σ log_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActNorm<T> {
    pub loc: Vec<T>,
    pub log_scale: Vec<T>,
}

/// Variance below which a dimension is treated as constant.
const ZERO_VARIANCE: f64 = 1e-12;
const VARIANCE_EPSILON: f64 = 1e-6;

impl<T: Real> ActNorm<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            loc: vec![T::zero(); dim],
            log_scale: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.loc.len()
    }

    /// Data-dependent initialization: the batch `x` (`n × D`, row-major)
    /// is mapped to zero mean and unit variance per dimension.
    pub fn initialize(&mut self, x: &[T], n: usize) -> Result<()> {
        let d = self.dim();
        if n < 2 {
            return Err(Error::InsufficientSamples(format!(
                "actnorm initialization needs at least 2 samples, got {n}"
            )));
        }
        if x.len() != n * d {
            return Err(Error::Shape(format!("actnorm init batch {} != {n}×{d}", x.len())));
        }
        let mut mean = vec![0.0f64; d];
        for row in x.chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.f64();
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0f64; d];
        for row in x.chunks_exact(d) {
            for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let c = v.f64() - m;
                *acc += c * c;
            }
        }
        let mut flat = 0;
        for j in 0..d {
            let mut v = var[j] / n as f64;
            if v < ZERO_VARIANCE {
                v += VARIANCE_EPSILON;
                flat += 1;
            }
            self.loc[j] = T::of(mean[j]);
            self.log_scale[j] = T::of(0.5 * v.ln());
        }
        if flat > 0 {
            warn!("actnorm: {flat} of {d} dimensions have zero variance; added epsilon {VARIANCE_EPSILON}");
        }
        Ok(())
    }

    pub fn log_det(&self) -> f64 {
        -self.log_scale.iter().map(|v| v.f64()).sum::<f64>()
    }

    // Both directions compute in f64 and round once, like the splines.
    pub fn forward_rows(&self, x: &mut [T]) {
        let inv: Vec<f64> = self.log_scale.iter().map(|s| (-s.f64()).exp()).collect();
        for row in x.chunks_exact_mut(self.dim()) {
            for ((v, m), &k) in row.iter_mut().zip(&self.loc).zip(&inv) {
                *v = T::of((v.f64() - m.f64()) * k);
            }
        }
    }

    pub fn inverse_rows(&self, y: &mut [T]) {
        let scale: Vec<f64> = self.log_scale.iter().map(|s| s.f64().exp()).collect();
        for row in y.chunks_exact_mut(self.dim()) {
            for ((v, m), &k) in row.iter_mut().zip(&self.loc).zip(&scale) {
                *v = T::of(v.f64() * k + m.f64());
            }
        }
    }

    /// Backward through a forward pass whose output was `y`. `gy` is
    /// overwritten with `∂loss/∂x`; `glogdet` holds `∂loss/∂logdet` per
    /// sample. Returns `(∂loss/∂loc, ∂loss/∂log_scale)`.
    pub fn backward_rows(&self, y: &[T], gy: &mut [T], glogdet: &[f64]) -> (Vec<T>, Vec<T>) {
        let d = self.dim();
        let inv: Vec<T> = self.log_scale.iter().map(|&s| (-s).exp()).collect();
        let mut g_loc = vec![T::zero(); d];
        let mut g_ls = vec![T::zero(); d];
        let total_glog: f64 = glogdet.iter().sum();
        for (yr, gr) in y.chunks_exact(d).zip(gy.chunks_exact_mut(d)) {
            for j in 0..d {
                let g = gr[j];
                g_loc[j] -= g * inv[j];
                g_ls[j] -= g * yr[j];
                gr[j] = g * inv[j];
            }
        }
        let glog = T::of(total_glog);
        for v in g_ls.iter_mut() {
            *v -= glog;
        }
        (g_loc, g_ls)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_jacobian;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer() {
        let a = ActNorm::<f64>::identity(3);
        let mut x = vec![1.0, -2.0, 3.0];
        a.forward_rows(&mut x);
        assert_eq!(x, vec![1.0, -2.0, 3.0]);
        assert_eq!(a.log_det(), 0.0);
    }

    #[test]
    fn init_standardizes_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, d) = (500, 4);
        let mut x: Vec<f32> = (0..n * d)
            .map(|i| (i % d) as f32 * 10.0 + rng.random_range(-3.0f32..3.0) * (1 + i % d) as f32)
            .collect();
        let mut a = ActNorm::<f32>::identity(d);
        a.initialize(&x, n).unwrap();
        a.forward_rows(&mut x);
        for j in 0..d {
            let col: Vec<f64> = x.iter().skip(j).step_by(d).map(|&v| v as f64).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() <= 1e-5, "mean {mean}");
            assert!((0.99..=1.01).contains(&var), "var {var}");
        }
    }

    #[test]
    fn zero_variance_dimension_gets_epsilon() {
        let x = vec![1.0f64, 5.0, 2.0, 5.0, 3.0, 5.0];
        let mut a = ActNorm::identity(2);
        a.initialize(&x, 3).unwrap();
        assert!(a.log_scale[1].is_finite());
        assert!((a.log_scale[1] - 0.5 * 1e-6f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn too_few_samples() {
        let mut a = ActNorm::<f64>::identity(2);
        assert!(a.initialize(&[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn logdet_matches_jacobian() {
        let a = ActNorm {
            loc: vec![0.3f64, -1.0, 2.0],
            log_scale: vec![0.7, -0.2, 1.1],
        };
        let jac = finite_diff_jacobian(
            |v| {
                let mut y = v.to_vec();
                a.forward_rows(&mut y);
                y
            },
            &[0.1, 0.5, -0.4],
            1e-6,
        )
        .unwrap();
        let det = jac[0] * (jac[4] * jac[8] - jac[5] * jac[7]) - jac[1] * (jac[3] * jac[8] - jac[5] * jac[6])
            + jac[2] * (jac[3] * jac[7] - jac[4] * jac[6]);
        assert!((det.abs().ln() - a.log_det()).abs() < 1e-4);
    }
}
