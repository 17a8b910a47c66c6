use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::actnorm::ActNorm;
use super::coupling::{mask_ranges, CouplingLayer, CouplingTape};
use super::spline::SplineShape;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpGrads};
use crate::real::Real;

/// `ln(2π)`.
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Rows per parallel work item when scoring.
const SCORE_CHUNK: usize = 256;

/// Architecture of a spline flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    pub coupling_layers: usize,
    pub spline: SplineShape,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl FlowConfig {
    /// Defaults: 8 couplings, K = 8, B = 3, two hidden layers of 512 ReLU units.
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            coupling_layers: 8,
            spline: SplineShape::default(),
            hidden: vec![512, 512],
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    ActNorm(ActNorm<T>),
    Permutation(Vec<usize>),
    Coupling(CouplingLayer<T>),
}

impl<T> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::ActNorm(_) => "actnorm",
            Layer::Permutation(_) => "permutation",
            Layer::Coupling(_) => "coupling",
        }
    }
}

/// Invertible map from feature space onto a standard Gaussian latent.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel<T> {
    config: FlowConfig,
    layers: Vec<Layer<T>>,
    actnorm_initialized: bool,
}

/// Gradient of a scalar loss for every trainable parameter of a model.
#[derive(Debug, Clone)]
pub enum LayerGrads<T> {
    ActNorm { loc: Vec<T>, log_scale: Vec<T> },
    Coupling(MlpGrads<T>),
    None,
}

#[derive(Debug, Clone)]
pub struct FlowGrads<T> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Real> FlowGrads<T> {
    /// Flat view, ordered like [`FlowModel::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for g in &self.layers {
            match g {
                LayerGrads::ActNorm { loc, log_scale } => {
                    out.push(&loc[..]);
                    out.push(&log_scale[..]);
                }
                LayerGrads::Coupling(m) => out.extend(m.slices()),
                LayerGrads::None => {}
            }
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for g in &mut self.layers {
            match g {
                LayerGrads::ActNorm { loc, log_scale } => {
                    out.push(&mut loc[..]);
                    out.push(&mut log_scale[..]);
                }
                LayerGrads::Coupling(m) => {
                    for (w, b) in m.layers.iter_mut() {
                        out.push(w.data_mut());
                        out.push(b.data_mut());
                    }
                }
                LayerGrads::None => {}
            }
        }
        out
    }
}

enum Tape<T> {
    ActNorm { output: Vec<T> },
    Permutation,
    Coupling(CouplingTape<T>),
}

/// Recorded forward pass over one batch.
pub struct FlowTape<T> {
    n: usize,
    steps: Vec<Tape<T>>,
}

/// Latents and per-row log-determinants of a batch forward pass.
#[derive(Debug, Clone)]
pub struct Pushforward<T> {
    pub z: Vec<T>,
    pub logdet: Vec<f64>,
}

impl<T: Real> Pushforward<T> {
    /// Per-row `log N(z; 0, I) + logdet`, summed in 64-bit.
    pub fn log_probs(&self, dim: usize) -> Vec<f64> {
        self.z
            .chunks_exact(dim)
            .zip(&self.logdet)
            .map(|(z, &ld)| gaussian_log_density(z) + ld)
            .collect()
    }
}

pub fn gaussian_log_density<T: Real>(z: &[T]) -> f64 {
    let sq: f64 = z.iter().map(|v| v.f64() * v.f64()).sum();
    -0.5 * sq - 0.5 * z.len() as f64 * LN_2PI
}

fn random_permutation(dim: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..dim).collect();
    perm.shuffle(rng);
    perm
}

fn permute_rows<T: Real>(x: &mut [T], perm: &[usize], scratch: &mut Vec<T>) {
    let d = perm.len();
    for row in x.chunks_exact_mut(d) {
        scratch.clear();
        scratch.extend(perm.iter().map(|&p| row[p]));
        row.copy_from_slice(scratch);
    }
}

fn unpermute_rows<T: Real>(x: &mut [T], perm: &[usize], scratch: &mut Vec<T>) {
    let d = perm.len();
    for row in x.chunks_exact_mut(d) {
        scratch.clear();
        scratch.resize(d, T::zero());
        for (i, &p) in perm.iter().enumerate() {
            scratch[p] = row[i];
        }
        row.copy_from_slice(scratch);
    }
}

fn is_permutation(perm: &[usize], dim: usize) -> bool {
    let mut seen = vec![false; dim];
    perm.len() == dim
        && perm.iter().all(|&p| p < dim && !std::mem::replace(&mut seen[p], true))
}

impl<T: Real> FlowModel<T> {
    /// Builds `actnorm → coupling → permutation` blocks (no permutation
    /// after the last coupling). Conditioner output layers start at zero so
    /// every coupling is the identity until trained.
    pub fn new(config: FlowConfig) -> Result<Self> {
        config.spline.validate()?;
        if config.dim == 0 {
            return Err(Error::InvalidParameter("flow dimension must be positive".into()));
        }
        if config.coupling_layers > 0 && config.dim < 2 {
            return Err(Error::InvalidParameter("coupling layers need D ≥ 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::new();
        for i in 0..config.coupling_layers {
            layers.push(Layer::ActNorm(ActNorm::identity(config.dim)));
            let parity = (i % 2) as u8;
            let (fixed, moved) = mask_ranges(config.dim, parity);
            let mut sizes = vec![fixed.len()];
            sizes.extend(&config.hidden);
            sizes.push(moved.len() * config.spline.raw_len());
            let mut net = Mlp::random(&sizes, config.activation, &mut rng)?;
            if let Some(last) = net.layers_mut().last_mut() {
                last.weight.data_mut().fill(T::zero());
                last.bias.data_mut().fill(T::zero());
            }
            layers.push(Layer::Coupling(CouplingLayer::new(config.dim, parity, config.spline, net)?));
            if i + 1 < config.coupling_layers {
                layers.push(Layer::Permutation(random_permutation(config.dim, &mut rng)));
            }
        }
        Ok(Self {
            config,
            layers,
            actnorm_initialized: false,
        })
    }

    /// Assembles a model from explicit layers (used by checkpoint loading).
    pub fn from_layers(config: FlowConfig, layers: Vec<Layer<T>>, actnorm_initialized: bool) -> Result<Self> {
        for (i, layer) in layers.iter().enumerate() {
            let d = match layer {
                Layer::ActNorm(a) => a.dim(),
                Layer::Permutation(p) => {
                    if !is_permutation(p, config.dim) {
                        return Err(Error::InvalidParameter(format!("layer {i}: not a permutation of 0..{}", config.dim)));
                    }
                    p.len()
                }
                Layer::Coupling(c) => c.dim(),
            };
            if d != config.dim {
                return Err(Error::DimensionMismatch {
                    expected: config.dim,
                    actual: d,
                    context: "flow layer",
                });
            }
        }
        Ok(Self {
            config,
            layers,
            actnorm_initialized,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn is_initialized(&self) -> bool {
        self.actnorm_initialized || !self.layers.iter().any(|l| matches!(l, Layer::ActNorm(_)))
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn param_slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::ActNorm(a) => {
                    out.push(&a.loc[..]);
                    out.push(&a.log_scale[..]);
                }
                Layer::Coupling(c) => out.extend(c.conditioner.param_slices()),
                Layer::Permutation(_) => {}
            }
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::ActNorm(a) => {
                    out.push(&mut a.loc[..]);
                    out.push(&mut a.log_scale[..]);
                }
                Layer::Coupling(c) => out.extend(c.conditioner.param_slices_mut()),
                Layer::Permutation(_) => {}
            }
        }
        out
    }

    /// Data-dependent actnorm initialization on a batch of `n` rows.
    pub fn initialize(&mut self, x: &[T], n: usize) -> Result<()> {
        self.check_rows(x, n)?;
        let mut h = x.to_vec();
        let mut scratch = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::ActNorm(a) => {
                    a.initialize(&h, n)?;
                    a.forward_rows(&mut h);
                }
                Layer::Permutation(p) => permute_rows(&mut h, p, &mut scratch),
                Layer::Coupling(c) => {
                    c.forward_rows(&mut h, n)?;
                }
            }
        }
        self.actnorm_initialized = true;
        Ok(())
    }

    /// Adds uniform `±scale` noise to every parameter and marks the model
    /// initialized. Produces generic non-identity flows for diagnostics.
    pub fn randomize_parameters(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slice in self.param_slices_mut() {
            for v in slice.iter_mut() {
                *v += T::of(rng.random_range(-scale..=scale));
            }
        }
        self.actnorm_initialized = true;
    }

    fn check_rows(&self, x: &[T], n: usize) -> Result<()> {
        if x.len() != n * self.dim() {
            return Err(Error::DimensionMismatch {
                expected: n * self.dim(),
                actual: x.len(),
                context: "flow input rows",
            });
        }
        Ok(())
    }

    fn ready(&self) -> Result<()> {
        if self.is_initialized() {
            Ok(())
        } else {
            Err(Error::Uninitialized)
        }
    }

    fn check_finite(h: &[T], layer: usize) -> Result<()> {
        if h.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteLayer { layer })
        }
    }

    /// Maps `n` rows through the flow (data → latent).
    pub fn forward(&self, x: &[T], n: usize) -> Result<Pushforward<T>> {
        self.ready()?;
        self.check_rows(x, n)?;
        let mut h = x.to_vec();
        let mut logdet = vec![0.0f64; n];
        let mut scratch = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::ActNorm(a) => {
                    a.forward_rows(&mut h);
                    let ld = a.log_det();
                    logdet.iter_mut().for_each(|v| *v += ld);
                }
                Layer::Permutation(p) => permute_rows(&mut h, p, &mut scratch),
                Layer::Coupling(c) => {
                    let ld = c.forward_rows(&mut h, n)?;
                    logdet.iter_mut().zip(ld).for_each(|(v, l)| *v += l);
                }
            }
            Self::check_finite(&h, i)?;
        }
        Ok(Pushforward { z: h, logdet })
    }

    /// Maps `n` latent rows back to data space; `logdet` is that of the
    /// inverse map.
    pub fn inverse(&self, z: &[T], n: usize) -> Result<Pushforward<T>> {
        self.ready()?;
        self.check_rows(z, n)?;
        let mut h = z.to_vec();
        let mut logdet = vec![0.0f64; n];
        let mut scratch = Vec::new();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            match layer {
                Layer::ActNorm(a) => {
                    a.inverse_rows(&mut h);
                    let ld = -a.log_det();
                    logdet.iter_mut().for_each(|v| *v += ld);
                }
                Layer::Permutation(p) => unpermute_rows(&mut h, p, &mut scratch),
                Layer::Coupling(c) => {
                    let ld = c.inverse_rows(&mut h, n)?;
                    logdet.iter_mut().zip(ld).for_each(|(v, l)| *v += l);
                }
            }
            Self::check_finite(&h, i)?;
        }
        Ok(Pushforward { z: h, logdet })
    }

    /// Exact log-density of one feature vector.
    pub fn log_prob(&self, x: &[T]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
                context: "feature vector",
            });
        }
        Ok(self.forward(x, 1)?.log_probs(self.dim())[0])
    }

    /// Log-densities of `n` rows. Chunks run in parallel; the output order
    /// (and every value) is independent of the worker count.
    pub fn log_prob_rows(&self, x: &[T], n: usize) -> Result<Vec<f64>> {
        self.ready()?;
        self.check_rows(x, n)?;
        let d = self.dim();
        let parts: Vec<Result<Vec<f64>>> = x
            .par_chunks(d * SCORE_CHUNK)
            .map(|chunk| {
                let rows = chunk.len() / d;
                Ok(self.forward(chunk, rows)?.log_probs(d))
            })
            .collect();
        let mut out = Vec::with_capacity(n);
        for part in parts {
            out.extend(part?);
        }
        Ok(out)
    }

    /// Draws `n` samples: base Gaussian pushed through the inverse map.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<T> = (0..n * self.dim())
            .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Ok(self.inverse(&z, n)?.z)
    }

    /// Forward pass that records intermediates for [`backward`](Self::backward).
    pub fn forward_train(&self, x: &[T], n: usize) -> Result<(Pushforward<T>, FlowTape<T>)> {
        self.ready()?;
        self.check_rows(x, n)?;
        let mut h = x.to_vec();
        let mut logdet = vec![0.0f64; n];
        let mut steps = Vec::with_capacity(self.layers.len());
        let mut scratch = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::ActNorm(a) => {
                    a.forward_rows(&mut h);
                    let ld = a.log_det();
                    logdet.iter_mut().for_each(|v| *v += ld);
                    steps.push(Tape::ActNorm { output: h.clone() });
                }
                Layer::Permutation(p) => {
                    permute_rows(&mut h, p, &mut scratch);
                    steps.push(Tape::Permutation);
                }
                Layer::Coupling(c) => {
                    let (ld, tape) = c.forward_train(&mut h, n)?;
                    logdet.iter_mut().zip(ld).for_each(|(v, l)| *v += l);
                    steps.push(Tape::Coupling(tape));
                }
            }
            Self::check_finite(&h, i)?;
        }
        Ok((Pushforward { z: h, logdet }, FlowTape { n, steps }))
    }

    /// Backpropagates `∂loss/∂z` (`n × D`) and `∂loss/∂logdet` (per row).
    /// Returns parameter gradients and `∂loss/∂x`.
    pub fn backward(&self, tape: FlowTape<T>, gz: Vec<T>, glogdet: &[f64]) -> Result<(FlowGrads<T>, Vec<T>)> {
        if glogdet.len() != tape.n || gz.len() != tape.n * self.dim() || tape.steps.len() != self.layers.len() {
            return Err(Error::StaleCache("flow tape does not match this model or batch"));
        }
        let mut g = gz;
        let mut grads: Vec<LayerGrads<T>> = Vec::with_capacity(self.layers.len());
        let mut scratch = Vec::new();
        for (layer, step) in self.layers.iter().zip(tape.steps).rev() {
            let lg = match (layer, step) {
                (Layer::ActNorm(a), Tape::ActNorm { output }) => {
                    let (loc, log_scale) = a.backward_rows(&output, &mut g, glogdet);
                    LayerGrads::ActNorm { loc, log_scale }
                }
                (Layer::Permutation(p), Tape::Permutation) => {
                    unpermute_rows(&mut g, p, &mut scratch);
                    LayerGrads::None
                }
                (Layer::Coupling(c), Tape::Coupling(t)) => LayerGrads::Coupling(c.backward(&t, &mut g, glogdet)?),
                _ => return Err(Error::StaleCache("flow tape layer kinds differ from model")),
            };
            grads.push(lg);
        }
        grads.reverse();
        Ok((FlowGrads { layers: grads }, g))
    }

    /// Mean negative log-likelihood of a batch and its parameter gradients.
    pub fn nll_and_grads(&self, x: &[T], n: usize) -> Result<(f64, FlowGrads<T>)> {
        let (push, tape) = self.forward_train(x, n)?;
        let d = self.dim();
        let nll = -push.log_probs(d).iter().sum::<f64>() / n as f64;
        // loss = mean(½|z|² − logdet) + const
        let inv_n = T::of(1.0 / n as f64);
        let gz: Vec<T> = push.z.iter().map(|&v| v * inv_n).collect();
        let glog = vec![-1.0 / n as f64; n];
        let (grads, _) = self.backward(tape, gz, &glog)?;
        Ok((nll, grads))
    }
}
