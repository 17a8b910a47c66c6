//! Monotone rational-quadratic spline on `[-B, B]` with identity tails.
//!
//! Within bin `k` (left knot `(x_k, y_k)`, width `w`, height `h`, knot
//! derivatives `d_k, d_{k+1}`), with `s = h/w` and `ξ = (x − x_k)/w`:
//!
//! ```text
//! y = y_k + h·(s·ξ² + d_k·ξ(1−ξ)) / (s + (d_{k+1} + d_k − 2s)·ξ(1−ξ))
//! dy/dx = s²·(d_{k+1}·ξ² + 2s·ξ(1−ξ) + d_k·(1−ξ)²) / (s + (d_{k+1} + d_k − 2s)·ξ(1−ξ))²
//! ```
//!
//! The inverse solves the per-bin quadratic in `ξ` with the cancellation-free
//! root `2c / (−b − sqrt(b² − 4ac))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Hyperparameters shared by every spline in a flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineShape {
    pub bins: usize,
    pub tail_bound: f64,
    /// Minimum bin width and height, as a fraction of the interval `2B`.
    pub min_bin_fraction: f64,
    pub min_derivative: f64,
}

impl Default for SplineShape {
    fn default() -> Self {
        Self {
            bins: 8,
            tail_bound: 3.0,
            min_bin_fraction: 1e-3,
            min_derivative: 1e-3,
        }
    }
}

impl SplineShape {
    /// Number of unconstrained values per transformed coordinate: K widths,
    /// K heights and K+1 knot derivatives.
    pub fn raw_len(&self) -> usize {
        3 * self.bins + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::InvalidSpline("need at least one bin".into()));
        }
        if !(self.tail_bound > 0.0 && self.tail_bound.is_finite()) {
            return Err(Error::InvalidSpline(format!("tail bound {}", self.tail_bound)));
        }
        if !(self.min_bin_fraction >= 0.0 && self.min_bin_fraction * (self.bins as f64) < 1.0) {
            return Err(Error::InvalidSpline(format!(
                "minimum bin fraction {} incompatible with {} bins",
                self.min_bin_fraction, self.bins
            )));
        }
        if !(self.min_derivative > 0.0 && self.min_derivative < 1.0) {
            return Err(Error::InvalidSpline(format!(
                "minimum derivative {} must lie in (0, 1)",
                self.min_derivative
            )));
        }
        Ok(())
    }

    /// Offset added before the softplus so that a raw derivative of zero
    /// maps to exactly one.
    fn derivative_offset(&self) -> f64 {
        ((1.0 - self.min_derivative).exp() - 1.0).ln()
    }
}

/// Normalized spline parameters with precomputed knot positions.
#[derive(Debug, Clone, PartialEq)]
pub struct RqSplineParams<T> {
    widths: Vec<T>,
    heights: Vec<T>,
    derivatives: Vec<T>,
    x_knots: Vec<T>,
    y_knots: Vec<T>,
    tail_bound: T,
}

#[inline]
fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn softmax_into<T: Real>(raw: &[T], out: &mut Vec<T>) {
    let max = raw.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    out.clear();
    out.extend(raw.iter().map(|&v| (v - max).exp()));
    let sum: T = out.iter().copied().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
}

fn cumulative<T: Real>(start: T, steps: &[T], out: &mut Vec<T>) {
    out.clear();
    let mut acc = start;
    out.push(acc);
    for &s in steps {
        acc += s;
        out.push(acc);
    }
}

impl<T: Real> RqSplineParams<T> {
    /// Validates explicit bin widths, heights and knot derivatives.
    pub fn new(widths: Vec<T>, heights: Vec<T>, derivatives: Vec<T>, tail_bound: T) -> Result<Self> {
        let k = widths.len();
        if k == 0 || heights.len() != k || derivatives.len() != k + 1 {
            return Err(Error::InvalidSpline(format!(
                "need K widths, K heights, K+1 derivatives; got {}, {}, {}",
                widths.len(),
                heights.len(),
                derivatives.len()
            )));
        }
        if !(tail_bound > T::zero() && tail_bound.is_finite()) {
            return Err(Error::InvalidSpline("tail bound must be positive".into()));
        }
        let positive = |v: &[T]| v.iter().all(|&x| x > T::zero() && x.is_finite());
        if !positive(&widths) || !positive(&heights) {
            return Err(Error::InvalidSpline("bin widths and heights must be positive".into()));
        }
        if !positive(&derivatives) {
            return Err(Error::InvalidSpline("knot derivatives must be positive".into()));
        }
        let span = 2.0 * tail_bound.f64();
        let tol = span * if T::PRECISION == crate::Precision::F32 { 1e-4 } else { 1e-9 };
        for (name, v) in [("widths", &widths), ("heights", &heights)] {
            let total: f64 = v.iter().map(|x| x.f64()).sum();
            if (total - span).abs() > tol {
                return Err(Error::InvalidSpline(format!("{name} sum to {total}, expected {span}")));
            }
        }
        let mut params = Self {
            widths,
            heights,
            derivatives,
            x_knots: Vec::new(),
            y_knots: Vec::new(),
            tail_bound,
        };
        params.rebuild_knots();
        Ok(params)
    }

    /// Uniform bins with unit derivatives: the identity map.
    pub fn identity(bins: usize, tail_bound: T) -> Self {
        let w = tail_bound * T::of(2.0) / T::of(bins as f64);
        Self::new(vec![w; bins], vec![w; bins], vec![T::one(); bins + 1], tail_bound)
            .expect("identity spline is well formed")
    }

    /// Empty buffer for [`fill_from_raw`](Self::fill_from_raw).
    pub fn scratch(shape: &SplineShape) -> Self {
        Self {
            widths: Vec::with_capacity(shape.bins),
            heights: Vec::with_capacity(shape.bins),
            derivatives: Vec::with_capacity(shape.bins + 1),
            x_knots: Vec::with_capacity(shape.bins + 1),
            y_knots: Vec::with_capacity(shape.bins + 1),
            tail_bound: T::of(shape.tail_bound),
        }
    }

    /// Maps unconstrained conditioner outputs to valid parameters:
    /// normalized exponentials for widths and heights, softplus for the
    /// derivatives, each with a floor.
    pub fn from_raw(raw: &[T], shape: &SplineShape) -> Self {
        let mut p = Self::scratch(shape);
        p.fill_from_raw(raw, shape);
        p
    }

    pub fn fill_from_raw(&mut self, raw: &[T], shape: &SplineShape) {
        let k = shape.bins;
        debug_assert_eq!(raw.len(), shape.raw_len());
        let span = T::of(2.0 * shape.tail_bound);
        let min = T::of(shape.min_bin_fraction);
        let free = T::one() - min * T::of(k as f64);
        softmax_into(&raw[..k], &mut self.widths);
        for w in self.widths.iter_mut() {
            *w = span * (min + free * *w);
        }
        softmax_into(&raw[k..2 * k], &mut self.heights);
        for h in self.heights.iter_mut() {
            *h = span * (min + free * *h);
        }
        let offset = shape.derivative_offset();
        self.derivatives.clear();
        self.derivatives.extend(
            raw[2 * k..]
                .iter()
                .map(|&r| T::of(shape.min_derivative + softplus(r.f64() + offset))),
        );
        self.tail_bound = T::of(shape.tail_bound);
        self.rebuild_knots();
    }

    fn rebuild_knots(&mut self) {
        let b = self.tail_bound;
        cumulative(-b, &self.widths, &mut self.x_knots);
        cumulative(-b, &self.heights, &mut self.y_knots);
    }

    pub fn bins(&self) -> usize {
        self.widths.len()
    }

    pub fn widths(&self) -> &[T] {
        &self.widths
    }

    pub fn heights(&self) -> &[T] {
        &self.heights
    }

    pub fn derivatives(&self) -> &[T] {
        &self.derivatives
    }

    pub fn tail_bound(&self) -> T {
        self.tail_bound
    }

    fn inside(&self, v: T) -> bool {
        v >= -self.tail_bound && v <= self.tail_bound
    }

    fn locate(knots: &[T], v: T) -> usize {
        let k = knots.len() - 1;
        let mut bin = 0;
        while bin + 1 < k && v >= knots[bin + 1] {
            bin += 1;
        }
        bin
    }

    /// Forward map: `(y, log|dy/dx|)`.
    #[inline]
    pub fn forward(&self, x: T) -> (T, T) {
        if !self.inside(x) {
            return (x, T::zero());
        }
        let k = Self::locate(&self.x_knots, x);
        let (w, h) = (self.widths[k], self.heights[k]);
        let (d0, d1) = (self.derivatives[k], self.derivatives[k + 1]);
        let s = h / w;
        let xi = (x - self.x_knots[k]) / w;
        let one = T::one();
        let t = xi * (one - xi);
        let two = T::of(2.0);
        let den = s + (d0 + d1 - two * s) * t;
        let y = self.y_knots[k] + h * (s * xi * xi + d0 * t) / den;
        let m = d1 * xi * xi + two * s * t + d0 * (one - xi) * (one - xi);
        let logd = two * s.ln() + m.ln() - two * den.ln();
        (y, logd)
    }

    /// Inverse map: `(x, log|dx/dy|)`.
    #[inline]
    pub fn inverse(&self, y: T) -> (T, T) {
        if !self.inside(y) {
            return (y, T::zero());
        }
        let k = Self::locate(&self.y_knots, y);
        let (w, h) = (self.widths[k], self.heights[k]);
        let (d0, d1) = (self.derivatives[k], self.derivatives[k + 1]);
        let s = h / w;
        let two = T::of(2.0);
        let dy = y - self.y_knots[k];
        let q = d0 + d1 - two * s;
        let a = h * (s - d0) + dy * q;
        let b = h * d0 - dy * q;
        let c = -s * dy;
        let disc = (b * b - T::of(4.0) * a * c).max(T::zero());
        let xi = (two * c) / (-b - disc.sqrt());
        let x = xi * w + self.x_knots[k];
        let (_, logd) = self.forward_in_bin(k, xi);
        (x, -logd)
    }

    fn forward_in_bin(&self, k: usize, xi: T) -> (T, T) {
        let (w, h) = (self.widths[k], self.heights[k]);
        let (d0, d1) = (self.derivatives[k], self.derivatives[k + 1]);
        let s = h / w;
        let one = T::one();
        let two = T::of(2.0);
        let t = xi * (one - xi);
        let den = s + (d0 + d1 - two * s) * t;
        let y = self.y_knots[k] + h * (s * xi * xi + d0 * t) / den;
        let m = d1 * xi * xi + two * s * t + d0 * (one - xi) * (one - xi);
        (y, two * s.ln() + m.ln() - two * den.ln())
    }

    pub fn apply(&self, v: T, direction: Direction) -> (T, T) {
        match direction {
            Direction::Forward => self.forward(v),
            Direction::Inverse => self.inverse(v),
        }
    }

    /// Backward pass of [`forward`](Self::forward) for upstream gradients
    /// `gy = ∂loss/∂y` and `glog = ∂loss/∂log|dy/dx|`.
    ///
    /// Accumulates parameter gradients into `grads` (`[widths | heights |
    /// derivatives]`, length 3K+1) and returns `∂loss/∂x`.
    pub fn backward(&self, x: T, gy: T, glog: T, grads: &mut [T]) -> T {
        if !self.inside(x) {
            return gy;
        }
        let nb = self.bins();
        let k = Self::locate(&self.x_knots, x);
        let (w, h) = (self.widths[k], self.heights[k]);
        let (d0, d1) = (self.derivatives[k], self.derivatives[k + 1]);
        let one = T::one();
        let two = T::of(2.0);
        let s = h / w;
        let xi = (x - self.x_knots[k]) / w;
        let t = xi * (one - xi);
        let q = d0 + d1 - two * s;
        let a = s * xi * xi + d0 * t;
        let den = s + q * t;
        let den2 = den * den;
        let m = d1 * xi * xi + two * s * t + d0 * (one - xi) * (one - xi);

        // Partials holding (ξ, s, h, d0, d1, y_k) independent.
        let one_m_2xi = one - two * xi;
        let a_xi = two * s * xi + d0 * one_m_2xi;
        let den_xi = q * one_m_2xi;
        let y_xi = h * (a_xi * den - a * den_xi) / den2;
        let m_xi = two * d1 * xi + two * s * one_m_2xi - two * d0 * (one - xi);
        let l_xi = m_xi / m - two * den_xi / den;

        let den_s = one - two * t;
        let y_s = h * (xi * xi * den - a * den_s) / den2;
        let l_s = two / s + two * t / m - two * den_s / den;

        let y_d0 = h * t * (den - a) / den2;
        let l_d0 = (one - xi) * (one - xi) / m - two * t / den;
        let y_d1 = -h * a * t / den2;
        let l_d1 = xi * xi / m - two * t / den;

        let g_xi = gy * y_xi + glog * l_xi;
        let g_s = gy * y_s + glog * l_s;
        let g_h = gy * a / den + g_s / w;
        let g_w = -(g_xi * xi + g_s * s) / w;
        let g_xk = -g_xi / w;

        let (gw, rest) = grads.split_at_mut(nb);
        let (gh, gd) = rest.split_at_mut(nb);
        gw[k] += g_w;
        gh[k] += g_h;
        for j in 0..k {
            gw[j] += g_xk;
            gh[j] += gy;
        }
        gd[k] += gy * y_d0 + glog * l_d0;
        gd[k + 1] += gy * y_d1 + glog * l_d1;
        g_xi / w
    }
}

/// Chains gradients w.r.t. normalized parameters (`[widths | heights |
/// derivatives]`) back to the raw conditioner outputs, in place.
pub fn raw_backward<T: Real>(raw: &[T], shape: &SplineShape, grads: &mut [T], soft: &mut Vec<T>) {
    let k = shape.bins;
    let scale = T::of(2.0 * shape.tail_bound * (1.0 - shape.min_bin_fraction * k as f64));
    for range in [0..k, k..2 * k] {
        softmax_into(&raw[range.clone()], soft);
        let g = &mut grads[range];
        let dot: T = g.iter().zip(soft.iter()).map(|(&a, &b)| a * b).sum();
        for (gi, &si) in g.iter_mut().zip(soft.iter()) {
            *gi = scale * si * (*gi - dot);
        }
    }
    let offset = shape.derivative_offset();
    for (gi, &r) in grads[2 * k..].iter_mut().zip(&raw[2 * k..]) {
        *gi *= T::of(sigmoid(r.f64() + offset));
    }
}
