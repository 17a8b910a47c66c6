use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the pre-activation value.
    #[inline]
    fn derivative<T: Real>(self, pre: T) -> T {
        match self {
            Activation::Relu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                T::one() - t * t
            }
            Activation::Identity => T::one(),
        }
    }
}

/// Fully connected layer computing `y = x·W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Dense<T> {
    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }
}

/// Feed-forward network: activation after every layer but the last.
#[derive(Debug)]
pub struct Mlp<T> {
    layers: Vec<Dense<T>>,
    activation: Activation,
    id: u64,
    version: u64,
}

impl<T: Clone> Clone for Mlp<T> {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            activation: self.activation,
            id: fresh_id(),
            version: 0,
        }
    }
}

impl<T: PartialEq> PartialEq for Mlp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.activation == other.activation && self.layers == other.layers
    }
}

/// Values saved by [`Mlp::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache<T> {
    net_id: u64,
    net_version: u64,
    batch: usize,
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<T>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Vec<T>>,
}

impl<T> ActivationCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Parameter gradients, one `(weight, bias)` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> MlpGrads<T> {
    pub fn slices(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.data(), b.data()])
            .collect()
    }
}

impl<T: Real> Mlp<T> {
    /// Builds a network from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Dense<T>>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("mlp needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.rank() != 2 || layer.bias.rank() != 1 {
                return Err(Error::Shape(format!("layer {i}: weight must be 2-D, bias 1-D")));
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::DimensionMismatch {
                    expected: layer.out_dim(),
                    actual: layer.bias.len(),
                    context: "mlp bias",
                });
            }
            if i > 0 && layers[i - 1].out_dim() != layer.in_dim() {
                return Err(Error::DimensionMismatch {
                    expected: layers[i - 1].out_dim(),
                    actual: layer.in_dim(),
                    context: "mlp layer chain",
                });
            }
        }
        Ok(Self {
            layers,
            activation,
            id: fresh_id(),
            version: 0,
        })
    }

    /// Uniform `±1/sqrt(fan_in)` initialization for every layer.
    pub fn random<R: Rng>(sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidParameter("mlp needs input and output sizes".into()));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let weight = Tensor::from_fn(vec![fan_in, fan_out], |_| {
                    T::of(rng.random_range(-bound..=bound))
                });
                let bias = Tensor::from_fn(vec![fan_out], |_| T::of(rng.random_range(-bound..=bound)));
                Dense { weight, bias }
            })
            .collect();
        Self::from_layers(layers, activation)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    /// Mutable access to the layers; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        self.version += 1;
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn param_slices(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.data()])
            .collect()
    }

    /// Mutable parameter views, in the same order as [`MlpGrads::slices`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.version += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let Dense { weight, bias } = l;
                [weight.data_mut(), bias.data_mut()]
            })
            .collect()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        if x.last_dim() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                actual: x.last_dim(),
                context: "mlp input",
            });
        }
        Ok(x.rows())
    }

    fn affine(layer: &Dense<T>, input: &[T], batch: usize) -> Vec<T> {
        let out = layer.out_dim();
        let mut y = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            y.extend_from_slice(layer.bias.data());
        }
        T::gemm(
            batch,
            layer.in_dim(),
            out,
            input,
            false,
            layer.weight.data(),
            false,
            T::one(),
            &mut y,
        );
        y
    }

    fn output_dims(&self, x: &Tensor<T>) -> Vec<usize> {
        let mut dims = x.dims().to_vec();
        match dims.last_mut() {
            Some(last) => *last = self.out_dim(),
            None => dims.push(self.out_dim()),
        }
        dims
    }

    /// Forward pass over a batch whose trailing axis is the feature axis.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ActivationCache<T>)> {
        let batch = self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut current = x.data().to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = Self::affine(layer, &current, batch);
            inputs.push(std::mem::replace(&mut current, Vec::new()));
            if i < last {
                current = z.iter().map(|&v| self.activation.apply(v)).collect();
                pre.push(z);
            } else {
                current = z;
            }
        }
        let y = Tensor::new(self.output_dims(x), current)?;
        y.ensure_finite("mlp output")?;
        Ok((
            y,
            ActivationCache {
                net_id: self.id,
                net_version: self.version,
                batch,
                inputs,
                pre,
            },
        ))
    }

    /// Forward pass without retaining activations.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check_input(x)?;
        let mut current: Option<Vec<T>> = None;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let input = current.as_deref().unwrap_or(x.data());
            let mut z = Self::affine(layer, input, batch);
            if i < last {
                for v in z.iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
            current = Some(z);
        }
        let y = Tensor::new(self.output_dims(x), current.unwrap_or_default())?;
        y.ensure_finite("mlp output")?;
        Ok(y)
    }

    /// Backpropagates `grad_out` (gradient of a scalar loss w.r.t. the
    /// output) to every parameter and to the input.
    pub fn backward(
        &self,
        cache: &ActivationCache<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(MlpGrads<T>, Tensor<T>)> {
        if cache.net_id != self.id {
            return Err(Error::StaleCache("cache was produced by a different network"));
        }
        if cache.net_version != self.version {
            return Err(Error::StaleCache("parameters changed since the forward pass"));
        }
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache("layer count differs from cache"));
        }
        let batch = cache.batch;
        if grad_out.last_dim() != self.out_dim() || grad_out.rows() != batch {
            return Err(Error::Shape(format!(
                "grad_out {:?} does not match batch {batch} × {}",
                grad_out.dims(),
                self.out_dim()
            )));
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.data().to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (fan_in, fan_out) = (layer.in_dim(), layer.out_dim());
            if i < self.layers.len() - 1 {
                for (gv, &p) in g.iter_mut().zip(&cache.pre[i]) {
                    *gv *= self.activation.derivative(p);
                }
            }
            let mut dw = vec![T::zero(); fan_in * fan_out];
            T::gemm(fan_in, batch, fan_out, &cache.inputs[i], true, &g, false, T::zero(), &mut dw);
            let mut db = vec![T::zero(); fan_out];
            for row in g.chunks_exact(fan_out) {
                for (acc, &v) in db.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            let mut g_in = vec![T::zero(); batch * fan_in];
            T::gemm(batch, fan_out, fan_in, &g, false, layer.weight.data(), true, T::zero(), &mut g_in);
            grads.push((
                Tensor::new(vec![fan_in, fan_out], dw)?,
                Tensor::new(vec![fan_out], db)?,
            ));
            g = g_in;
        }
        grads.reverse();
        let mut in_dims = grad_out.dims().to_vec();
        if let Some(last) = in_dims.last_mut() {
            *last = self.in_dim();
        }
        Ok((MlpGrads { layers: grads }, Tensor::new(in_dims, g)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::finite_diff_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense(w: Vec<f64>, rows: usize, cols: usize, b: Vec<f64>) -> Dense<f64> {
        Dense {
            weight: Tensor::matrix(rows, cols, w).unwrap(),
            bias: Tensor::new(vec![cols], b).unwrap(),
        }
    }

    #[test]
    fn single_affine_layer() {
        let net = Mlp::from_layers(vec![dense(vec![2.0], 1, 1, vec![1.0])], Activation::Relu).unwrap();
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let (y, _) = net.forward(&x).unwrap();
        assert_eq!(y.data(), &[7.0]);
        assert_eq!(y.dims(), &[1]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::<f64>::from_layers(
            vec![dense(vec![0.0; 6], 3, 2, vec![0.0; 2]), dense(vec![0.0; 8], 2, 4, vec![0.0; 4])],
            Activation::Relu,
        )
        .unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.1, 9.0, -7.0]).unwrap();
        let (y, _) = net.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.dims(), &[2, 4]);
    }

    /// Straightforward triple-loop reimplementation.
    fn naive_forward(net: &Mlp<f64>, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for (i, layer) in net.layers().iter().enumerate() {
            let (n_in, n_out) = (layer.in_dim(), layer.out_dim());
            let mut next = vec![0.0; n_out];
            for o in 0..n_out {
                let mut acc = layer.bias.data()[o];
                for j in 0..n_in {
                    acc += cur[j] * layer.weight.data()[j * n_out + o];
                }
                next[o] = if i + 1 < net.layers().len() { acc.max(0.0) } else { acc };
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn forward_matches_naive_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Mlp::<f64>::random(&[5, 7, 3], Activation::Relu, &mut rng).unwrap();
        let xs: Vec<f64> = (0..4 * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::matrix(4, 5, xs.clone()).unwrap();
        let (y, _) = net.forward(&x).unwrap();
        for r in 0..4 {
            let expect = naive_forward(&net, &xs[r * 5..(r + 1) * 5]);
            for (a, b) in y.data()[r * 3..(r + 1) * 3].iter().zip(&expect) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert_eq!(net.predict(&x).unwrap(), y);
    }

    #[test]
    fn identity_network_passes_gradient_through() {
        let net = Mlp::from_layers(
            vec![dense(vec![1.0, 0.0, 0.0, 1.0], 2, 2, vec![0.0, 0.0])],
            Activation::Relu,
        )
        .unwrap();
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, -3.0, 4.0, 0.5, -0.5]).unwrap();
        let (y, cache) = net.forward(&x).unwrap();
        let ones = y.map(|_| 1.0);
        let (_, gin) = net.backward(&cache, &ones).unwrap();
        assert!(gin.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::<f64>::random(&[3, 4, 2], Activation::Relu, &mut rng).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 1.5, 0.2, -0.7]).unwrap();
        let (y, cache) = net.forward(&x).unwrap();
        let (grads, gin) = net.backward(&cache, &y.map(|_| 0.0)).unwrap();
        assert!(gin.data().iter().all(|&v| v == 0.0));
        assert!(grads.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stale_and_foreign_caches_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Mlp::<f64>::random(&[2, 3, 1], Activation::Relu, &mut rng).unwrap();
        let other = net.clone();
        let x = Tensor::matrix(1, 2, vec![0.5, 0.25]).unwrap();
        let (y, cache) = net.forward(&x).unwrap();
        assert!(matches!(other.backward(&cache, &y), Err(Error::StaleCache(_))));
        net.param_slices_mut()[0][0] += 1.0;
        assert!(matches!(net.backward(&cache, &y), Err(Error::StaleCache(_))));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::<f64>::random(&[2, 3, 1], Activation::Relu, &mut rng).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.5, 0.25, 1.0]).unwrap();
        assert!(matches!(net.forward(&x), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let net = Mlp::from_layers(vec![dense(vec![f64::MAX], 1, 1, vec![0.0])], Activation::Relu).unwrap();
        let x = Tensor::new(vec![1], vec![10.0]).unwrap();
        assert!(matches!(net.forward(&x), Err(Error::NonFinite(_))));
    }

    fn loss(net: &Mlp<f64>, x: &Tensor<f64>, w: &[f64]) -> f64 {
        let y = net.predict(x).unwrap();
        y.data().iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn gradients_match_finite_differences_over_seeds() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for act in [Activation::Relu, Activation::Tanh] {
                let net = Mlp::<f64>::random(&[4, 6, 5, 3], act, &mut rng).unwrap();
                let x = Tensor::from_fn(vec![3, 4], |_| rng.random_range(-1.5..1.5));
                let w: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
                let (_, cache) = net.forward(&x).unwrap();
                let upstream = Tensor::matrix(3, 3, w.clone()).unwrap();
                let (grads, gin) = net.backward(&cache, &upstream).unwrap();

                let n_slices = net.param_slices().len();
                for s in 0..n_slices {
                    let base: Vec<f64> = net.param_slices()[s].to_vec();
                    let fd = finite_diff_grad(
                        |p: &Tensor<f64>| {
                            let mut probe = net.clone();
                            probe.param_slices_mut()[s].copy_from_slice(p.data());
                            loss(&probe, &x, &w)
                        },
                        &Tensor::new(vec![base.len()], base.clone()).unwrap(),
                        1e-6,
                    )
                    .unwrap();
                    assert_close(grads.slices()[s], fd.data(), seed);
                }
                let fd_in = finite_diff_grad(|xp: &Tensor<f64>| loss(&net, xp, &w), &x, 1e-6).unwrap();
                assert_close(gin.data(), fd_in.data(), seed);
            }
        }
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], seed: u64) {
        for (a, n) in analytic.iter().zip(numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
            assert!(rel <= 1e-4, "seed {seed}: analytic {a} vs numeric {n}");
        }
    }
}
