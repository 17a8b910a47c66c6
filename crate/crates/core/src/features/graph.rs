//! A small inference runtime for frozen convolutional backbones.
//!
//! Graph container (little-endian):
//!
//! ```text
//! "FLGR" | u16 version | u32 json_len | JSON GraphSpec
//! | named f32 tensors until end of file
//! ```
//!
//! Activations are `H × W × C`. Convolution weights are stored in the
//! exporting framework's `[out, in/groups, kh, kw]` layout and repacked on
//! load.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, read_named, write_file_atomic, write_named, ByteReader};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::real::Real;

pub const GRAPH_MAGIC: &[u8; 4] = b"FLGR";
pub const GRAPH_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Conv2d {
        weight: String,
        #[serde(default)]
        bias: Option<String>,
        stride: [usize; 2],
        padding: [usize; 2],
        #[serde(default = "one")]
        groups: usize,
    },
    Relu,
    Hardswish,
    Hardsigmoid,
    /// Elementwise sum; either input may be a `1 × 1 × C` vector.
    Add,
    /// Elementwise product, broadcasting like [`Op::Add`].
    Mul,
    MaxPool2d {
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
    },
    AvgPool2d {
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
        #[serde(default = "yes")]
        count_include_pad: bool,
    },
    GlobalAvgPool,
    /// Per-sample normalization over `(H, W, C/groups)` blocks with biased
    /// variance; optional per-channel affine.
    GroupNorm {
        groups: usize,
        #[serde(default = "norm_eps")]
        eps: f32,
        #[serde(default)]
        weight: Option<String>,
        #[serde(default)]
        bias: Option<String>,
    },
}

fn one() -> usize {
    1
}

fn norm_eps() -> f32 {
    1e-5
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub inputs: Vec<String>,
    #[serde(flatten)]
    pub op: Op,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    /// Name of the graph input; its shape is `[H, W, C]`.
    pub input: String,
    pub input_shape: [usize; 3],
    pub output: String,
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone, PartialEq)]
struct ConvKernel {
    /// Per group: `[kh·kw·cin_g, cout_g]`, rows ordered `(ky, kx, ci)`.
    packed: Vec<Vec<f32>>,
    bias: Vec<f32>,
    kh: usize,
    kw: usize,
    cin_g: usize,
    cout_g: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Step {
    Conv {
        kernel: ConvKernel,
        stride: [usize; 2],
        padding: [usize; 2],
        groups: usize,
    },
    Relu,
    Hardswish,
    Hardsigmoid,
    Add,
    Mul,
    MaxPool {
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
    },
    AvgPool {
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
        count_include_pad: bool,
    },
    GlobalAvgPool,
    GroupNorm {
        groups: usize,
        eps: f32,
        gamma: Vec<f32>,
        beta: Vec<f32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Compiled {
    step: Step,
    /// Slots of the inputs in the value table (0 is the graph input).
    inputs: Vec<usize>,
    /// Drop these slots after this node runs.
    release: Vec<usize>,
}

/// A loaded, shape-checked graph. Immutable and shareable across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    spec: GraphSpec,
    weights: BTreeMap<String, Tensor<f32>>,
    steps: Vec<Compiled>,
    output_slot: usize,
    output_shape: [usize; 3],
}

fn pooled_len(n: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if k == 0 || s == 0 {
        return Err(Error::InvalidParameter("window and stride must be positive".into()));
    }
    if n + 2 * p < k {
        return Err(Error::Shape(format!("window {k} larger than padded extent {}", n + 2 * p)));
    }
    Ok((n + 2 * p - k) / s + 1)
}

fn shape_err(node: &str, detail: String) -> Error {
    Error::Shape(format!("node {node}: {detail}"))
}

impl Graph {
    pub fn new(spec: GraphSpec, weights: BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        let mut slots: HashMap<&str, usize> = HashMap::new();
        let mut shapes: Vec<[usize; 3]> = vec![spec.input_shape];
        if spec.input_shape.contains(&0) {
            return Err(Error::Shape(format!("input shape {:?}", spec.input_shape)));
        }
        slots.insert(&spec.input, 0);
        let mut steps = Vec::with_capacity(spec.nodes.len());
        for node in &spec.nodes {
            let name = node.name.as_str();
            if slots.contains_key(name) {
                return Err(shape_err(name, "duplicate node name".into()));
            }
            let mut inputs = Vec::with_capacity(node.inputs.len());
            for i in &node.inputs {
                let slot = *slots
                    .get(i.as_str())
                    .ok_or_else(|| shape_err(name, format!("input {i} is not defined before use")))?;
                inputs.push(slot);
            }
            let arity = match node.op {
                Op::Add | Op::Mul => 2,
                _ => 1,
            };
            if inputs.len() != arity {
                return Err(shape_err(name, format!("expected {arity} inputs, got {}", inputs.len())));
            }
            let [h, w, c] = shapes[inputs[0]];
            let (step, shape) = match &node.op {
                Op::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                    groups,
                } => {
                    let wt = weights
                        .get(weight)
                        .ok_or_else(|| shape_err(name, format!("missing weight tensor {weight}")))?;
                    let &[cout, cin_g, kh, kw] = wt.dims() else {
                        return Err(shape_err(name, format!("weight dims {:?} are not 4-D", wt.dims())));
                    };
                    let groups = *groups;
                    if groups == 0 || c % groups != 0 || cout % groups != 0 || cin_g != c / groups {
                        return Err(shape_err(
                            name,
                            format!("weight {:?} incompatible with {c} input channels in {groups} groups", wt.dims()),
                        ));
                    }
                    let bias = match bias {
                        Some(b) => {
                            let bt = weights
                                .get(b)
                                .ok_or_else(|| shape_err(name, format!("missing bias tensor {b}")))?;
                            if bt.dims() != [cout] {
                                return Err(shape_err(name, format!("bias dims {:?}, expected [{cout}]", bt.dims())));
                            }
                            bt.data().to_vec()
                        }
                        None => vec![0.0; cout],
                    };
                    let cout_g = cout / groups;
                    let mut packed = Vec::with_capacity(groups);
                    for g in 0..groups {
                        let mut m = vec![0.0f32; kh * kw * cin_g * cout_g];
                        for oc in 0..cout_g {
                            for ic in 0..cin_g {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let src = (((g * cout_g + oc) * cin_g + ic) * kh + ky) * kw + kx;
                                        m[((ky * kw + kx) * cin_g + ic) * cout_g + oc] = wt.data()[src];
                                    }
                                }
                            }
                        }
                        packed.push(m);
                    }
                    let oh = pooled_len(h, kh, stride[0], padding[0]).map_err(|e| shape_err(name, e.to_string()))?;
                    let ow = pooled_len(w, kw, stride[1], padding[1]).map_err(|e| shape_err(name, e.to_string()))?;
                    let kernel = ConvKernel {
                        packed,
                        bias,
                        kh,
                        kw,
                        cin_g,
                        cout_g,
                    };
                    (
                        Step::Conv {
                            kernel,
                            stride: *stride,
                            padding: *padding,
                            groups,
                        },
                        [oh, ow, cout],
                    )
                }
                Op::Relu => (Step::Relu, [h, w, c]),
                Op::Hardswish => (Step::Hardswish, [h, w, c]),
                Op::Hardsigmoid => (Step::Hardsigmoid, [h, w, c]),
                Op::Add | Op::Mul => {
                    // either side may be a 1 × 1 × C per-channel vector
                    let (a, b) = (shapes[inputs[0]], shapes[inputs[1]]);
                    let shape = if a == b || b == [1, 1, a[2]] {
                        a
                    } else if a == [1, 1, b[2]] {
                        b
                    } else {
                        return Err(shape_err(name, format!("cannot combine {a:?} with {b:?}")));
                    };
                    let step = if matches!(node.op, Op::Add) { Step::Add } else { Step::Mul };
                    (step, shape)
                }
                Op::MaxPool2d { kernel, stride, padding } => {
                    if padding[0] * 2 > kernel[0] || padding[1] * 2 > kernel[1] {
                        return Err(shape_err(name, "padding exceeds half the window".into()));
                    }
                    let oh = pooled_len(h, kernel[0], stride[0], padding[0]).map_err(|e| shape_err(name, e.to_string()))?;
                    let ow = pooled_len(w, kernel[1], stride[1], padding[1]).map_err(|e| shape_err(name, e.to_string()))?;
                    (
                        Step::MaxPool {
                            kernel: *kernel,
                            stride: *stride,
                            padding: *padding,
                        },
                        [oh, ow, c],
                    )
                }
                Op::AvgPool2d {
                    kernel,
                    stride,
                    padding,
                    count_include_pad,
                } => {
                    let oh = pooled_len(h, kernel[0], stride[0], padding[0]).map_err(|e| shape_err(name, e.to_string()))?;
                    let ow = pooled_len(w, kernel[1], stride[1], padding[1]).map_err(|e| shape_err(name, e.to_string()))?;
                    (
                        Step::AvgPool {
                            kernel: *kernel,
                            stride: *stride,
                            padding: *padding,
                            count_include_pad: *count_include_pad,
                        },
                        [oh, ow, c],
                    )
                }
                Op::GlobalAvgPool => (Step::GlobalAvgPool, [1, 1, c]),
                Op::GroupNorm {
                    groups,
                    eps,
                    weight,
                    bias,
                } => {
                    if *groups == 0 || c % groups != 0 {
                        return Err(shape_err(name, format!("{c} channels cannot form {groups} groups")));
                    }
                    if !(*eps > 0.0 && eps.is_finite()) {
                        return Err(shape_err(name, format!("eps {eps} must be positive")));
                    }
                    let per_channel = |t: &Option<String>, fill: f32| -> Result<Vec<f32>> {
                        match t {
                            None => Ok(vec![fill; c]),
                            Some(t) => {
                                let v = weights
                                    .get(t)
                                    .ok_or_else(|| shape_err(name, format!("missing tensor {t}")))?;
                                if v.dims() != [c] {
                                    return Err(shape_err(name, format!("{t} dims {:?}, expected [{c}]", v.dims())));
                                }
                                Ok(v.data().to_vec())
                            }
                        }
                    };
                    (
                        Step::GroupNorm {
                            groups: *groups,
                            eps: *eps,
                            gamma: per_channel(weight, 1.0)?,
                            beta: per_channel(bias, 0.0)?,
                        },
                        [h, w, c],
                    )
                }
            };
            slots.insert(name, shapes.len());
            shapes.push(shape);
            steps.push(Compiled {
                step,
                inputs,
                release: Vec::new(),
            });
        }
        let output_slot = *slots
            .get(spec.output.as_str())
            .ok_or_else(|| Error::Shape(format!("output {} is not a node", spec.output)))?;

        // free each value after its last reader
        let mut last_use = vec![None; shapes.len()];
        for (i, s) in steps.iter().enumerate() {
            for &slot in &s.inputs {
                last_use[slot] = Some(i);
            }
        }
        for (slot, last) in last_use.iter().enumerate() {
            if let Some(i) = *last {
                if slot != output_slot {
                    steps[i].release.push(slot);
                }
            }
        }
        let output_shape = shapes[output_slot];
        Ok(Self {
            spec,
            weights,
            steps,
            output_slot,
            output_shape,
        })
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn weight(&self, name: &str) -> Option<&Tensor<f32>> {
        self.weights.get(name)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.spec.input_shape
    }

    pub fn output_shape(&self) -> [usize; 3] {
        self.output_shape
    }

    pub fn run(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        if input.dims() != self.spec.input_shape {
            return Err(Error::Shape(format!(
                "graph expects input {:?}, got {:?}",
                self.spec.input_shape,
                input.dims()
            )));
        }
        let mut values: Vec<Option<Tensor<f32>>> = vec![None; self.steps.len() + 1];
        values[0] = Some(input.clone());
        for (i, s) in self.steps.iter().enumerate() {
            let x = values[s.inputs[0]].as_ref().expect("value is live");
            let out = match &s.step {
                Step::Conv {
                    kernel,
                    stride,
                    padding,
                    groups,
                } => conv2d(x, kernel, *stride, *padding, *groups),
                Step::Relu => x.map(|v| v.max(0.0)),
                Step::Hardswish => x.map(|v| v * (v + 3.0).clamp(0.0, 6.0) / 6.0),
                Step::Hardsigmoid => x.map(|v| (v + 3.0).clamp(0.0, 6.0) / 6.0),
                Step::Add | Step::Mul => {
                    let y = values[s.inputs[1]].as_ref().expect("value is live");
                    // both ops commute, so put the full-size operand first
                    let (x, y) = if y.len() > x.len() { (y, x) } else { (x, y) };
                    binary(x, y, matches!(s.step, Step::Add))
                }
                Step::MaxPool { kernel, stride, padding } => window_pool(x, *kernel, *stride, *padding, None),
                Step::AvgPool {
                    kernel,
                    stride,
                    padding,
                    count_include_pad,
                } => window_pool(x, *kernel, *stride, *padding, Some(*count_include_pad)),
                Step::GlobalAvgPool => global_avg(x),
                Step::GroupNorm {
                    groups,
                    eps,
                    gamma,
                    beta,
                } => group_norm(x, *groups, *eps, gamma, beta),
            };
            for &r in &s.release {
                values[r] = None;
            }
            values[i + 1] = Some(out);
        }
        let out = values[self.output_slot].take().expect("output is live");
        out.ensure_finite("backbone output")?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.spec)?;
        let mut out = Vec::new();
        out.extend_from_slice(GRAPH_MAGIC);
        out.extend_from_slice(&GRAPH_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (name, t) in &self.weights {
            write_named(&mut out, name, t.dims(), t.data());
        }
        write_file_atomic(path, &out)
    }

    /// Same graph read out at a different node (e.g. to drop a head).
    pub fn with_output(self, output: &str) -> Result<Self> {
        let mut spec = self.spec;
        spec.output = output.to_string();
        Self::new(spec, self.weights)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = ByteReader::new(&bytes, path);
        if r.take(4, "magic")? != GRAPH_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "FLGR",
            });
        }
        let version = r.u16("version")?;
        if version != GRAPH_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: GRAPH_VERSION,
            });
        }
        let len = r.u32("header length")? as usize;
        let spec: GraphSpec = serde_json::from_slice(r.take(len, "header")?)?;
        let mut weights = BTreeMap::new();
        while !r.is_empty() {
            let t = read_named::<f32>(&mut r)?;
            let tensor = Tensor::new(t.dims, t.data)?;
            if weights.insert(t.name, tensor).is_some() {
                return Err(r.corrupt("duplicate tensor name"));
            }
        }
        Self::new(spec, weights)
    }
}

fn binary(x: &Tensor<f32>, y: &Tensor<f32>, add: bool) -> Tensor<f32> {
    let mut out = x.clone();
    let c = *x.dims().last().expect("rank 3");
    let broadcast = y.len() != x.len();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let other = if broadcast { y.data()[i % c] } else { y.data()[i] };
        if add {
            *v += other;
        } else {
            *v *= other;
        }
    }
    out
}

fn global_avg(x: &Tensor<f32>) -> Tensor<f32> {
    let c = x.dims()[2];
    let n = x.dims()[0] * x.dims()[1];
    let mut acc = vec![0.0f64; c];
    for px in x.data().chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(px) {
            *a += f64::from(v);
        }
    }
    let data = acc.iter().map(|a| (a / n as f64) as f32).collect();
    Tensor::new(vec![1, 1, c], data).expect("shape matches")
}

/// Max pooling when `avg` is `None`; padded cells never win a max.
fn window_pool(x: &Tensor<f32>, k: [usize; 2], s: [usize; 2], p: [usize; 2], avg: Option<bool>) -> Tensor<f32> {
    let [h, w, c] = [x.dims()[0], x.dims()[1], x.dims()[2]];
    let oh = (h + 2 * p[0] - k[0]) / s[0] + 1;
    let ow = (w + 2 * p[1] - k[1]) / s[1] + 1;
    let mut out = vec![0.0f32; oh * ow * c];
    let mut acc = vec![0.0f32; c];
    for oy in 0..oh {
        for ox in 0..ow {
            let init = if avg.is_some() { 0.0 } else { f32::NEG_INFINITY };
            acc.fill(init);
            let mut inside = 0usize;
            for ky in 0..k[0] {
                let Some(iy) = (oy * s[0] + ky).checked_sub(p[0]).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..k[1] {
                    let Some(ix) = (ox * s[1] + kx).checked_sub(p[1]).filter(|&v| v < w) else {
                        continue;
                    };
                    inside += 1;
                    let px = &x.data()[(iy * w + ix) * c..][..c];
                    for (a, &v) in acc.iter_mut().zip(px) {
                        *a = if avg.is_some() { *a + v } else { a.max(v) };
                    }
                }
            }
            let dst = &mut out[(oy * ow + ox) * c..][..c];
            match avg {
                None => dst.copy_from_slice(&acc),
                Some(include_pad) => {
                    let div = if include_pad { k[0] * k[1] } else { inside.max(1) } as f32;
                    for (d, a) in dst.iter_mut().zip(&acc) {
                        *d = a / div;
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out).expect("shape matches")
}

fn group_norm(x: &Tensor<f32>, groups: usize, eps: f32, gamma: &[f32], beta: &[f32]) -> Tensor<f32> {
    let c = x.dims()[2];
    let cg = c / groups;
    let mut out = x.data().to_vec();
    for g in 0..groups {
        let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
        for px in x.data().chunks_exact(c) {
            for &v in &px[g * cg..(g + 1) * cg] {
                sum += f64::from(v);
                n += 1;
            }
        }
        let mean = sum / n as f64;
        for px in x.data().chunks_exact(c) {
            for &v in &px[g * cg..(g + 1) * cg] {
                sq += (f64::from(v) - mean).powi(2);
            }
        }
        let inv = 1.0 / (sq / n as f64 + f64::from(eps)).sqrt();
        for px in out.chunks_exact_mut(c) {
            for (ch, v) in px.iter_mut().enumerate().skip(g * cg).take(cg) {
                *v = ((f64::from(*v) - mean) * inv) as f32 * gamma[ch] + beta[ch];
            }
        }
    }
    Tensor::new(x.dims().to_vec(), out).expect("shape matches")
}

fn conv2d(x: &Tensor<f32>, k: &ConvKernel, s: [usize; 2], p: [usize; 2], groups: usize) -> Tensor<f32> {
    let [h, w, c] = [x.dims()[0], x.dims()[1], x.dims()[2]];
    let oh = (h + 2 * p[0] - k.kh) / s[0] + 1;
    let ow = (w + 2 * p[1] - k.kw) / s[1] + 1;
    let cout = k.cout_g * groups;
    let m = oh * ow;
    let kk = k.kh * k.kw * k.cin_g;
    let mut out = vec![0.0f32; m * cout];
    for o in out.chunks_exact_mut(cout) {
        o.copy_from_slice(&k.bias);
    }
    if k.cin_g == 1 && k.cout_g == 1 {
        depthwise(x.data(), [h, w, c], k, s, p, [oh, ow], &mut out);
        return Tensor::new(vec![oh, ow, cout], out).expect("shape matches");
    }
    let direct = k.kh == 1 && k.kw == 1 && s == [1, 1] && p == [0, 0] && groups == 1;
    let mut patches = Vec::new();
    let mut tmp = Vec::new();
    for g in 0..groups {
        let a: &[f32] = if direct {
            x.data()
        } else {
            patches.clear();
            patches.resize(m * kk, 0.0);
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &mut patches[(oy * ow + ox) * kk..][..kk];
                    for ky in 0..k.kh {
                        let Some(iy) = (oy * s[0] + ky).checked_sub(p[0]).filter(|&v| v < h) else {
                            continue;
                        };
                        for kx in 0..k.kw {
                            let Some(ix) = (ox * s[1] + kx).checked_sub(p[1]).filter(|&v| v < w) else {
                                continue;
                            };
                            let src = &x.data()[(iy * w + ix) * c + g * k.cin_g..][..k.cin_g];
                            row[(ky * k.kw + kx) * k.cin_g..][..k.cin_g].copy_from_slice(src);
                        }
                    }
                }
            }
            &patches
        };
        if groups == 1 {
            f32::gemm(m, kk, cout, a, false, &k.packed[0], false, 1.0, &mut out);
        } else {
            tmp.clear();
            tmp.resize(m * k.cout_g, 0.0);
            f32::gemm(m, kk, k.cout_g, a, false, &k.packed[g], false, 0.0, &mut tmp);
            for (dst, src) in out.chunks_exact_mut(cout).zip(tmp.chunks_exact(k.cout_g)) {
                for (d, v) in dst[g * k.cout_g..][..k.cout_g].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], out).expect("shape matches")
}

fn depthwise(x: &[f32], [h, w, c]: [usize; 3], k: &ConvKernel, s: [usize; 2], p: [usize; 2], [oh, ow]: [usize; 2], out: &mut [f32]) {
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * c..][..c];
            for ky in 0..k.kh {
                let Some(iy) = (oy * s[0] + ky).checked_sub(p[0]).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..k.kw {
                    let Some(ix) = (ox * s[1] + kx).checked_sub(p[1]).filter(|&v| v < w) else {
                        continue;
                    };
                    let src = &x[(iy * w + ix) * c..][..c];
                    let tap = ky * k.kw + kx;
                    for (ch, (d, v)) in dst.iter_mut().zip(src).enumerate() {
                        *d += v * k.packed[ch][tap];
                    }
                }
            }
        }
    }
}
