//! Frozen feature extractors. Every image backbone is a [`Graph`]: the
//! hermetic toy stacks are generated from a seed, portable graphs are
//! loaded from disk next to a JSON descriptor.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::{Graph, GraphSpec, Node, Op};
use super::image::{ImageTensor, Preprocess, IMAGENET_MEAN, IMAGENET_STD};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Seeded random network: per-image standardization, `channels.len()`
/// stride-2 stages, an `pool × pool` average pool and a 1×1 linear
/// projection to `out_channels`. Output side is
/// `input_size / 2^stages / pool`.
///
/// Rectified activations averaged over a window respond to local
/// energy, so blur and noise move features off the clean-image manifold
/// instead of only shrinking them. `gain` scales the projection and with
/// it the feature units: every log-likelihood shifts by `−D·ln(gain)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub pool: usize,
    pub out_channels: usize,
    pub gain: f32,
    pub seed: u64,
}

impl Default for ToySpec {
    /// 256×256 input → 8×8×512.
    fn default() -> Self {
        Self {
            input_size: 256,
            channels: vec![16, 32],
            pool: 8,
            out_channels: 512,
            gain: 2.0,
            seed: 0,
        }
    }
}

/// How features are obtained. Serialized as the JSON adapter descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterSpec {
    /// 3×3 convolution + ReLU stages.
    Toy(ToySpec),
    /// Depthwise-separable stages with hardswish, a structurally different
    /// second backbone with the same head.
    ToyMobile(ToySpec),
    /// Serialized graph; relative paths resolve against the descriptor.
    Graph {
        graph: PathBuf,
        /// Input name, checked against the graph.
        input: String,
        /// Node whose activations are the features.
        output: String,
        #[serde(default = "imagenet_mean")]
        mean: [f32; 3],
        #[serde(default = "imagenet_std")]
        std: [f32; 3],
    },
    /// Features computed elsewhere: a feature cache or a CSV of rows.
    Precomputed { path: PathBuf },
}

fn imagenet_mean() -> [f32; 3] {
    IMAGENET_MEAN
}

fn imagenet_std() -> [f32; 3] {
    IMAGENET_STD
}

impl AdapterSpec {
    /// `toy`, `toy-mobile`, `precomputed:<file>` or a path to a JSON
    /// descriptor.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(AdapterSpec::Toy(ToySpec::default())),
            "toy-mobile" => Ok(AdapterSpec::ToyMobile(ToySpec::default())),
            _ => {
                if let Some(p) = s.strip_prefix("precomputed:") {
                    return Ok(AdapterSpec::Precomputed { path: PathBuf::from(p) });
                }
                let path = Path::new(s);
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                let mut spec: AdapterSpec = serde_json::from_slice(&bytes)?;
                let base = path.parent().unwrap_or(Path::new("."));
                match &mut spec {
                    AdapterSpec::Graph { graph, .. } if graph.is_relative() => *graph = base.join(&*graph),
                    AdapterSpec::Precomputed { path } if path.is_relative() => *path = base.join(&*path),
                    _ => {}
                }
                Ok(spec)
            }
        }
    }
}

/// A frozen image → `H × W × C` activation map.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    id: String,
    graph: Graph,
    preprocess: Preprocess,
}

fn conv_node(name: &str, input: &str, stride: usize, pad: usize, groups: usize) -> Node {
    Node {
        name: name.into(),
        inputs: vec![input.into()],
        op: Op::Conv2d {
            weight: format!("{name}.weight"),
            bias: Some(format!("{name}.bias")),
            stride: [stride; 2],
            padding: [pad; 2],
            groups,
        },
    }
}

fn act_node(name: &str, input: &str, op: Op) -> Node {
    Node {
        name: name.into(),
        inputs: vec![input.into()],
        op,
    }
}

struct WeightGen {
    rng: ChaCha8Rng,
    weights: BTreeMap<String, Tensor<f32>>,
}

impl WeightGen {
    /// He-normal weights, small uniform biases, both times `gain`.
    fn conv(&mut self, name: &str, cout: usize, cin_g: usize, k: usize, gain: f32) {
        let fan_in = (cin_g * k * k) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("positive std");
        let w = Tensor::from_fn(vec![cout, cin_g, k, k], |_| gain * normal.sample(&mut self.rng));
        let uniform = Uniform::new_inclusive(-0.1f32, 0.1).expect("valid range");
        let b = Tensor::from_fn(vec![cout], |_| gain * uniform.sample(&mut self.rng));
        self.weights.insert(format!("{name}.weight"), w);
        self.weights.insert(format!("{name}.bias"), b);
    }
}

fn check_toy(spec: &ToySpec) -> Result<()> {
    let stages = spec.channels.len();
    if stages == 0 || spec.channels.contains(&0) || spec.out_channels == 0 {
        return Err(Error::InvalidParameter("toy backbone needs positive channel counts".into()));
    }
    if spec.pool == 0 {
        return Err(Error::InvalidParameter("toy pool window must be positive".into()));
    }
    if !(spec.gain.is_finite() && spec.gain > 0.0) {
        return Err(Error::InvalidParameter(format!("toy gain {} must be positive", spec.gain)));
    }
    let div = (1usize << stages.min(usize::BITS as usize - 1)).saturating_mul(spec.pool);
    if spec.input_size == 0 || spec.input_size % div != 0 {
        return Err(Error::InvalidParameter(format!(
            "input size {} is not divisible by 2^{stages}·{}",
            spec.input_size, spec.pool
        )));
    }
    Ok(())
}

fn standardize_node() -> Node {
    Node {
        name: "standardize".into(),
        inputs: vec!["input".into()],
        op: Op::GroupNorm {
            groups: 1,
            eps: 1e-5,
            weight: None,
            bias: None,
        },
    }
}

impl Backbone {
    pub fn new(id: impl Into<String>, graph: Graph, preprocess: Preprocess) -> Result<Self> {
        let [h, w, c] = graph.input_shape();
        if c != 3 || h != preprocess.height || w != preprocess.width {
            return Err(Error::Shape(format!(
                "graph input {:?} does not match preprocessing {}×{}×3",
                graph.input_shape(),
                preprocess.height,
                preprocess.width
            )));
        }
        Ok(Self {
            id: id.into(),
            graph,
            preprocess,
        })
    }

    /// Standardize → (conv 3×3 s2 → ReLU)* → average pool → 1×1
    /// projection.
    pub fn toy(spec: &ToySpec) -> Result<Self> {
        check_toy(spec)?;
        let mut gen = WeightGen {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            weights: BTreeMap::new(),
        };
        let mut nodes = vec![standardize_node()];
        let mut prev = "standardize".to_string();
        let mut cin = 3;
        for (i, &c) in spec.channels.iter().enumerate() {
            let name = format!("conv{i}");
            gen.conv(&name, c, cin, 3, 1.0);
            nodes.push(conv_node(&name, &prev, 2, 1, 1));
            let act = format!("relu{i}");
            nodes.push(act_node(&act, &name, Op::Relu));
            prev = act;
            cin = c;
        }
        Self::with_head("toy", spec, gen, nodes, prev, cin)
    }

    /// Per stage: depthwise 3×3 s2 → hardswish → pointwise 1×1 →
    /// hardswish; then the same pool and projection head as [`Self::toy`].
    pub fn toy_mobile(spec: &ToySpec) -> Result<Self> {
        check_toy(spec)?;
        let mut gen = WeightGen {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            weights: BTreeMap::new(),
        };
        let mut nodes = vec![standardize_node()];
        let mut prev = "standardize".to_string();
        let mut cin = 3;
        for (i, &c) in spec.channels.iter().enumerate() {
            let dw = format!("dw{i}");
            gen.conv(&dw, cin, 1, 3, 1.0);
            nodes.push(conv_node(&dw, &prev, 2, 1, cin));
            let act = format!("dwact{i}");
            nodes.push(act_node(&act, &dw, Op::Hardswish));
            let pw = format!("pw{i}");
            gen.conv(&pw, c, cin, 1, 1.0);
            nodes.push(conv_node(&pw, &act, 1, 0, 1));
            let act = format!("pwact{i}");
            nodes.push(act_node(&act, &pw, Op::Hardswish));
            prev = act;
            cin = c;
        }
        Self::with_head("toy-mobile", spec, gen, nodes, prev, cin)
    }

    fn with_head(
        kind: &str,
        spec: &ToySpec,
        mut gen: WeightGen,
        mut nodes: Vec<Node>,
        mut prev: String,
        cin: usize,
    ) -> Result<Self> {
        if spec.pool > 1 {
            nodes.push(act_node(
                "pool",
                &prev,
                Op::AvgPool2d {
                    kernel: [spec.pool; 2],
                    stride: [spec.pool; 2],
                    padding: [0; 2],
                    count_include_pad: true,
                },
            ));
            prev = "pool".into();
        }
        gen.conv("proj", spec.out_channels, cin, 1, spec.gain);
        nodes.push(conv_node("proj", &prev, 1, 0, 1));
        Self::from_generated(kind, spec, nodes, "proj".into(), gen.weights)
    }

    fn from_generated(
        kind: &str,
        spec: &ToySpec,
        nodes: Vec<Node>,
        output: String,
        weights: BTreeMap<String, Tensor<f32>>,
    ) -> Result<Self> {
        let n = spec.input_size;
        let graph = Graph::new(
            GraphSpec {
                input: "input".into(),
                input_shape: [n, n, 3],
                output,
                nodes,
            },
            weights,
        )?;
        let channels: Vec<String> = spec.channels.iter().map(ToString::to_string).collect();
        let id = format!(
            "{kind}(input={n},channels={},pool={},out={},gain={},seed={})",
            channels.join("-"),
            spec.pool,
            spec.out_channels,
            spec.gain,
            spec.seed
        );
        Self::new(id, graph, Preprocess::imagenet(n, n))
    }

    pub fn from_graph_file(path: &Path, input: &str, output: &str, mean: [f32; 3], std: [f32; 3]) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let graph = Graph::load(path)?.with_output(output)?;
        if graph.spec().input != input {
            return Err(Error::InvalidParameter(format!(
                "descriptor names input {input:?}, graph declares {:?}",
                graph.spec().input
            )));
        }
        let [h, w, _] = graph.input_shape();
        let digest = hex::encode(Sha256::digest(&bytes));
        let id = format!("graph(sha256={},output={output})", &digest[..16]);
        Self::new(id, graph, Preprocess { height: h, width: w, mean, std })
    }

    pub fn from_spec(spec: &AdapterSpec) -> Result<Self> {
        match spec {
            AdapterSpec::Toy(t) => Self::toy(t),
            AdapterSpec::ToyMobile(t) => Self::toy_mobile(t),
            AdapterSpec::Graph {
                graph,
                input,
                output,
                mean,
                std,
            } => Self::from_graph_file(graph, input, output, *mean, *std),
            AdapterSpec::Precomputed { .. } => Err(Error::InvalidParameter(
                "precomputed features have no image backbone".into(),
            )),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn preprocess(&self) -> &Preprocess {
        &self.preprocess
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn output_shape(&self) -> [usize; 3] {
        self.graph.output_shape()
    }

    /// Activations for an already preprocessed `H × W × 3` tensor.
    pub fn run(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.graph.run(input)
    }

    pub fn extract(&self, img: &ImageTensor) -> Result<Tensor<f32>> {
        self.run(&self.preprocess.apply(img)?)
    }
}
