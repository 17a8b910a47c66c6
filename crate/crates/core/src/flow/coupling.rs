use std::ops::Range;

use rayon::prelude::*;

use super::spline::{raw_backward, RqSplineParams, SplineShape};
use crate::error::{Error, Result};
use crate::nn::{ActivationCache, Mlp, MlpGrads, Tensor};
use crate::real::Real;

/// Rows per parallel work item in the elementwise spline passes.
const ROW_CHUNK: usize = 16;

/// Spline coupling layer over a half split of the coordinates.
///
/// Parity 0 keeps `[0, D/2)` fixed and transforms `[D/2, D)`; parity 1
/// swaps the roles. The conditioner maps the fixed half to `3K+1` raw
/// spline values per transformed coordinate, laid out coordinate-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer<T> {
    dim: usize,
    parity: u8,
    shape: SplineShape,
    pub conditioner: Mlp<T>,
}

/// Saved state for [`CouplingLayer::backward`].
#[derive(Debug)]
pub struct CouplingTape<T> {
    input: Vec<T>,
    raw: Vec<T>,
    cache: ActivationCache<T>,
}

pub(crate) fn mask_ranges(dim: usize, parity: u8) -> (Range<usize>, Range<usize>) {
    let half = dim / 2;
    if parity == 0 {
        (0..half, half..dim)
    } else {
        (half..dim, 0..half)
    }
}

impl<T: Real> CouplingLayer<T> {
    pub fn new(dim: usize, parity: u8, shape: SplineShape, conditioner: Mlp<T>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidParameter(format!("coupling needs D ≥ 2, got {dim}")));
        }
        if parity > 1 {
            return Err(Error::InvalidParameter(format!("coupling parity {parity}")));
        }
        shape.validate()?;
        let (fixed, moved) = mask_ranges(dim, parity);
        if conditioner.in_dim() != fixed.len() {
            return Err(Error::DimensionMismatch {
                expected: fixed.len(),
                actual: conditioner.in_dim(),
                context: "conditioner input",
            });
        }
        if conditioner.out_dim() != moved.len() * shape.raw_len() {
            return Err(Error::DimensionMismatch {
                expected: moved.len() * shape.raw_len(),
                actual: conditioner.out_dim(),
                context: "conditioner output",
            });
        }
        Ok(Self {
            dim,
            parity,
            shape,
            conditioner,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn parity(&self) -> u8 {
        self.parity
    }

    pub fn shape(&self) -> &SplineShape {
        &self.shape
    }

    pub fn fixed_range(&self) -> Range<usize> {
        mask_ranges(self.dim, self.parity).0
    }

    pub fn moved_range(&self) -> Range<usize> {
        mask_ranges(self.dim, self.parity).1
    }

    fn gather_fixed(&self, x: &[T], n: usize) -> Result<Tensor<T>> {
        let fixed = self.fixed_range();
        let mut buf = Vec::with_capacity(n * fixed.len());
        for row in x.chunks_exact(self.dim) {
            buf.extend_from_slice(&row[fixed.clone()]);
        }
        Tensor::matrix(n, fixed.len(), buf)
    }

    fn check(&self, x: &[T], n: usize) -> Result<()> {
        if x.len() != n * self.dim {
            return Err(Error::DimensionMismatch {
                expected: n * self.dim,
                actual: x.len(),
                context: "coupling input",
            });
        }
        Ok(())
    }

    /// Applies the splines in place to the moved half; returns per-row logdet.
    fn transform(&self, x: &mut [T], raw: &[T], inverse: bool) -> Vec<f64> {
        let moved = self.moved_range();
        let rl = self.shape.raw_len();
        let raw_row = moved.len() * rl;
        let mut logdet = vec![0.0f64; x.len() / self.dim];
        x.par_chunks_mut(self.dim * ROW_CHUNK)
            .zip(raw.par_chunks(raw_row * ROW_CHUNK))
            .zip(logdet.par_chunks_mut(ROW_CHUNK))
            .for_each(|((xs, raws), lds)| {
                // spline arithmetic runs in f64 whatever the storage precision,
                // so single-precision round trips only lose the final rounding
                let mut spline = RqSplineParams::<f64>::scratch(&self.shape);
                let mut wide = Vec::with_capacity(rl);
                for ((row, r), ld) in xs.chunks_exact_mut(self.dim).zip(raws.chunks_exact(raw_row)).zip(lds) {
                    let mut acc = 0.0f64;
                    for (v, params) in row[moved.clone()].iter_mut().zip(r.chunks_exact(rl)) {
                        wide.clear();
                        wide.extend(params.iter().map(|p| p.f64()));
                        spline.fill_from_raw(&wide, &self.shape);
                        let (out, l) = if inverse { spline.inverse(v.f64()) } else { spline.forward(v.f64()) };
                        *v = T::of(out);
                        acc += l;
                    }
                    *ld = acc;
                }
            });
        logdet
    }

    /// In-place forward over `n` rows; returns per-row log-determinants.
    pub fn forward_rows(&self, x: &mut [T], n: usize) -> Result<Vec<f64>> {
        self.check(x, n)?;
        let raw = self.conditioner.predict(&self.gather_fixed(x, n)?)?;
        Ok(self.transform(x, raw.data(), false))
    }

    /// In-place inverse over `n` rows; returns per-row log-determinants of
    /// the inverse map.
    pub fn inverse_rows(&self, y: &mut [T], n: usize) -> Result<Vec<f64>> {
        self.check(y, n)?;
        let raw = self.conditioner.predict(&self.gather_fixed(y, n)?)?;
        Ok(self.transform(y, raw.data(), true))
    }

    /// Forward pass that records what [`backward`](Self::backward) needs.
    pub fn forward_train(&self, x: &mut [T], n: usize) -> Result<(Vec<f64>, CouplingTape<T>)> {
        self.check(x, n)?;
        let input = x.to_vec();
        let (raw, cache) = self.conditioner.forward(&self.gather_fixed(x, n)?)?;
        let raw = raw.into_data();
        let logdet = self.transform(x, &raw, false);
        Ok((logdet, CouplingTape { input, raw, cache }))
    }

    /// `gy` (∂loss/∂y, `n × D`) is overwritten with ∂loss/∂x; `glogdet` is
    /// ∂loss/∂logdet per row.
    pub fn backward(&self, tape: &CouplingTape<T>, gy: &mut [T], glogdet: &[f64]) -> Result<MlpGrads<T>> {
        let n = glogdet.len();
        self.check(gy, n)?;
        let moved = self.moved_range();
        let fixed = self.fixed_range();
        let rl = self.shape.raw_len();
        let raw_row = moved.len() * rl;
        let mut g_raw = vec![T::zero(); n * raw_row];

        gy.par_chunks_mut(self.dim * ROW_CHUNK)
            .zip(tape.input.par_chunks(self.dim * ROW_CHUNK))
            .zip(tape.raw.par_chunks(raw_row * ROW_CHUNK))
            .zip(g_raw.par_chunks_mut(raw_row * ROW_CHUNK))
            .zip(glogdet.par_chunks(ROW_CHUNK))
            .for_each(|((((gys, xs), raws), graws), glds)| {
                let mut spline = RqSplineParams::scratch(&self.shape);
                let mut soft = Vec::with_capacity(self.shape.bins);
                let rows = gys
                    .chunks_exact_mut(self.dim)
                    .zip(xs.chunks_exact(self.dim))
                    .zip(raws.chunks_exact(raw_row))
                    .zip(graws.chunks_exact_mut(raw_row))
                    .zip(glds);
                for ((((g, x), r), gr), &gl) in rows {
                    let glog = T::of(gl);
                    for (((gv, &xv), params), gp) in g[moved.clone()]
                        .iter_mut()
                        .zip(&x[moved.clone()])
                        .zip(r.chunks_exact(rl))
                        .zip(gr.chunks_exact_mut(rl))
                    {
                        spline.fill_from_raw(params, &self.shape);
                        *gv = spline.backward(xv, *gv, glog, gp);
                        raw_backward(params, &self.shape, gp, &mut soft);
                    }
                }
            });

        let g_raw = Tensor::matrix(n, raw_row, g_raw)?;
        let (grads, g_fixed) = self.conditioner.backward(&tape.cache, &g_raw)?;
        for (row, gf) in gy.chunks_exact_mut(self.dim).zip(g_fixed.data().chunks_exact(fixed.len())) {
            for (v, &add) in row[fixed.clone()].iter_mut().zip(gf) {
                *v += add;
            }
        }
        Ok(grads)
    }
}
