use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam optimizer state over a fixed list of parameter buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zeroed moments shaped like `shapes` (one length per parameter buffer).
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Result<Self> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !beta_ok(config.beta1) || !beta_ok(config.beta2) {
            return Err(Error::InvalidParameter(format!(
                "adam betas must lie in [0, 1): {} {}",
                config.beta1, config.beta2
            )));
        }
        if !(config.lr >= 0.0 && config.epsilon > 0.0) {
            return Err(Error::InvalidParameter("adam lr must be ≥ 0 and epsilon > 0".into()));
        }
        Ok(Self {
            config,
            step: 0,
            first_moment: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update in place. A non-finite
    /// gradient rejects the whole step and leaves parameters and state
    /// untouched.
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam tracks {} buffers, got {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first_moment[i].len() {
                return Err(Error::Shape(format!(
                    "buffer {i}: param {} grad {} moment {}",
                    p.len(),
                    g.len(),
                    self.first_moment[i].len()
                )));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient buffer {i} entry {j}")));
            }
        }

        self.step += 1;
        let cfg = self.config;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let bc1 = T::of(1.0 - cfg.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - cfg.beta2.powi(self.step as i32));
        let (lr, eps) = (T::of(cfg.lr), T::of(cfg.epsilon));
        if cfg.lr == 0.0 {
            // Moments still advance; parameters stay bit-identical.
            for ((m, v), g) in self.first_moment.iter_mut().zip(&mut self.second_moment).zip(grads) {
                for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                    *mi = b1 * *mi + (T::one() - b1) * gi;
                    *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                }
            }
            return Ok(());
        }
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [&mut [T]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let x = v.f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
