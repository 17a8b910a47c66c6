//! Central-difference gradients, the verification oracle for every analytic
//! backward pass in the crate.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference estimate of `∇f(x)`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!("finite-difference step {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective near coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.dims().to_vec(), grad)
}

/// Central-difference Jacobian of a vector map, row-major `[out, in]`.
pub fn finite_diff_jacobian<F>(f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = x.len();
    let mut probe = x.to_vec();
    let mut cols = Vec::with_capacity(n);
    for i in 0..n {
        probe[i] = x[i] + eps;
        let plus = f(&probe);
        probe[i] = x[i] - eps;
        let minus = f(&probe);
        probe[i] = x[i];
        if plus.iter().chain(&minus).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("map near coordinate {i}")));
        }
        cols.push(
            plus.iter()
                .zip(&minus)
                .map(|(p, m)| (p - m) / (2.0 * eps))
                .collect::<Vec<_>>(),
        );
    }
    let m = cols.first().map_or(0, Vec::len);
    let mut jac = vec![0.0; m * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            jac[i * n + j] = v;
        }
    }
    Ok(jac)
}

/// `log|det A|` of a square row-major matrix by Gaussian elimination with
/// partial pivoting. Returns `-inf` for a singular matrix.
pub fn log_abs_det(a: &[f64], n: usize) -> f64 {
    assert_eq!(a.len(), n * n, "log_abs_det needs an n×n matrix");
    let mut m = a.to_vec();
    let mut acc = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap_or(col);
        let p = m[pivot * n + col];
        if p == 0.0 {
            return f64::NEG_INFINITY;
        }
        if pivot != col {
            for k in 0..n {
                m.swap(pivot * n + k, col * n + k);
            }
        }
        acc += p.abs().ln();
        for row in col + 1..n {
            let f = m[row * n + col] / p;
            for k in col..n {
                m[row * n + k] -= f * m[col * n + k];
            }
        }
    }
    acc
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_at_three() {
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_grad(|_| 4.2, &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sum_of_sines_matches_cosines() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::from_fn(vec![16], |_| rng.random_range(-3.0..3.0));
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v.sin()).sum(), &x, 1e-5).unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - xi.cos()).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let err = finite_diff_grad(|t| 1.0 / (t.data()[0] - 1e-6), &x, 1e-6).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn log_det_of_known_matrices() {
        assert!((log_abs_det(&[2.0, 0.0, 0.0, 3.0], 2) - 6f64.ln()).abs() < 1e-15);
        // det [[0,1],[1,0]] = -1 needs a pivot swap
        assert!(log_abs_det(&[0.0, 1.0, 1.0, 0.0], 2).abs() < 1e-15);
        assert_eq!(log_abs_det(&[1.0, 2.0, 2.0, 4.0], 2), f64::NEG_INFINITY);
        let a = [4.0, 3.0, 2.0, 1.0, 3.0, 5.0, 2.0, 1.0, 6.0];
        // det = 4(18-5) - 3(6-10) + 2(1-6) = 52 + 12 - 10 = 54
        assert!((log_abs_det(&a, 3) - 54f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn jacobian_of_linear_map() {
        let jac = finite_diff_jacobian(|v| vec![2.0 * v[0] + v[1], -v[1]], &[0.3, 0.7], 1e-6).unwrap();
        let expect = [2.0, 1.0, 0.0, -1.0];
        for (a, b) in jac.iter().zip(expect) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
