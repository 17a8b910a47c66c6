//! Flow checkpoint container (little-endian):
//!
//! ```text
//! "FLPC" | u16 version | u8 precision (0 = f32, 1 = f64)
//! | u32 json_len | JSON header (config, layer list, actnorm flag)
//! | named tensors until end of file
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::actnorm::ActNorm;
use super::coupling::CouplingLayer;
use super::model::{FlowConfig, FlowModel, Layer};
use crate::binio::{read_file, read_named, write_file_atomic, write_named, ByteReader, NamedTensor};
use crate::error::{Error, Result};
use crate::nn::{Dense, Mlp, Tensor};
use crate::real::{Precision, Real};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FLPC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerSpec {
    Actnorm,
    Coupling { parity: u8, net_layers: usize },
    Permutation { perm: Vec<usize> },
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: FlowConfig,
    actnorm_initialized: bool,
    layers: Vec<LayerSpec>,
}

fn encode<T: Real>(model: &FlowModel<T>) -> Result<Vec<u8>> {
    let mut specs = Vec::with_capacity(model.layers().len());
    let mut tensors = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        match layer {
            Layer::ActNorm(a) => {
                specs.push(LayerSpec::Actnorm);
                write_named(&mut tensors, &format!("layers.{i}.loc"), &[a.dim()], &a.loc);
                write_named(&mut tensors, &format!("layers.{i}.log_scale"), &[a.dim()], &a.log_scale);
            }
            Layer::Permutation(p) => specs.push(LayerSpec::Permutation { perm: p.clone() }),
            Layer::Coupling(c) => {
                specs.push(LayerSpec::Coupling {
                    parity: c.parity(),
                    net_layers: c.conditioner.layers().len(),
                });
                for (j, dense) in c.conditioner.layers().iter().enumerate() {
                    write_named(&mut tensors, &format!("layers.{i}.net.{j}.weight"), dense.weight.dims(), dense.weight.data());
                    write_named(&mut tensors, &format!("layers.{i}.net.{j}.bias"), dense.bias.dims(), dense.bias.data());
                }
            }
        }
    }
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        actnorm_initialized: model.is_initialized(),
        layers: specs,
    })?;
    let mut out = Vec::with_capacity(11 + header.len() + tensors.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::PRECISION.code());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&tensors);
    Ok(out)
}

pub fn save_flow<T: Real>(model: &FlowModel<T>, path: &Path) -> Result<()> {
    write_file_atomic(path, &encode(model)?)
}

struct TensorBag<'r, T> {
    map: BTreeMap<String, NamedTensor<T>>,
    reader_path: &'r Path,
}

impl<T: Real> TensorBag<'_, T> {
    fn take(&mut self, name: &str, dims: &[usize]) -> Result<Vec<T>> {
        let t = self.map.remove(name).ok_or_else(|| Error::Truncated {
            path: self.reader_path.to_path_buf(),
            detail: format!("missing tensor {name}"),
        })?;
        if t.dims != dims {
            return Err(Error::Corrupt {
                path: self.reader_path.to_path_buf(),
                detail: format!("tensor {name} has dims {:?}, expected {dims:?}", t.dims),
            });
        }
        Ok(t.data)
    }

    fn take_any(&mut self, name: &str) -> Result<NamedTensor<T>> {
        self.map.remove(name).ok_or_else(|| Error::Truncated {
            path: self.reader_path.to_path_buf(),
            detail: format!("missing tensor {name}"),
        })
    }
}

/// Precision of the checkpoint at `path`, from its header alone.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = read_file(path)?;
    let mut r = ByteReader::new(&bytes, path);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "FLPC",
        });
    }
    r.u16("version")?;
    let code = r.u8("precision")?;
    Precision::from_code(code).ok_or_else(|| r.corrupt(format!("unknown precision code {code}")))
}

pub fn load_flow<T: Real>(path: &Path) -> Result<FlowModel<T>> {
    let bytes = read_file(path)?;
    let mut r = ByteReader::new(&bytes, path);
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "FLPC",
        });
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let code = r.u8("precision")?;
    let precision = Precision::from_code(code).ok_or_else(|| r.corrupt(format!("unknown precision code {code}")))?;
    if precision != T::PRECISION {
        return Err(Error::PrecisionMismatch {
            found: precision.name(),
            expected: T::PRECISION.name(),
        });
    }
    let json_len = r.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(r.take(json_len, "header")?)?;
    header.config.spline.validate()?;

    let mut map = BTreeMap::new();
    while !r.is_empty() {
        let t = read_named::<T>(&mut r)?;
        if map.insert(t.name.clone(), t).is_some() {
            return Err(r.corrupt("duplicate tensor name"));
        }
    }
    let mut bag = TensorBag { map, reader_path: path };
    let cfg = header.config;
    let d = cfg.dim;
    let mut layers = Vec::with_capacity(header.layers.len());
    for (i, spec) in header.layers.into_iter().enumerate() {
        let layer = match spec {
            LayerSpec::Actnorm => Layer::ActNorm(ActNorm {
                loc: bag.take(&format!("layers.{i}.loc"), &[d])?,
                log_scale: bag.take(&format!("layers.{i}.log_scale"), &[d])?,
            }),
            LayerSpec::Permutation { perm } => Layer::Permutation(perm),
            LayerSpec::Coupling { parity, net_layers } => {
                let mut dense = Vec::with_capacity(net_layers);
                for j in 0..net_layers {
                    let w = bag.take_any(&format!("layers.{i}.net.{j}.weight"))?;
                    let b = bag.take_any(&format!("layers.{i}.net.{j}.bias"))?;
                    dense.push(Dense {
                        weight: Tensor::new(w.dims, w.data)?,
                        bias: Tensor::new(b.dims, b.data)?,
                    });
                }
                let net = Mlp::from_layers(dense, cfg.activation)?;
                Layer::Coupling(CouplingLayer::new(d, parity, cfg.spline, net)?)
            }
        };
        layers.push(layer);
    }
    if let Some(extra) = bag.map.keys().next() {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            detail: format!("unexpected tensor {extra}"),
        });
    }
    FlowModel::from_layers(cfg, layers, header.actnorm_initialized)
}
