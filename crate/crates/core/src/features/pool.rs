//! 2×2 stride-2 pooling over `H × W × C` activations and the HWC flatten
//! order that defines feature-vector indices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    #[default]
    Avg,
    Max,
}

impl PoolKind {
    pub fn name(self) -> &'static str {
        match self {
            PoolKind::Avg => "avg",
            PoolKind::Max => "max",
        }
    }
}

impl std::str::FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(PoolKind::Avg),
            "max" => Ok(PoolKind::Max),
            _ => Err(Error::InvalidParameter(format!("pool kind {s:?} (expected avg or max)"))),
        }
    }
}

fn hwc(t: &Tensor<impl Real>) -> Result<(usize, usize, usize)> {
    match t.dims() {
        &[h, w, c] => Ok((h, w, c)),
        d => Err(Error::Shape(format!("expected H×W×C activations, got dims {d:?}"))),
    }
}

/// Non-overlapping 2×2 window, stride 2.
pub fn pool2d<T: Real>(t: &Tensor<T>, kind: PoolKind) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(t)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("pooling needs even spatial dims, got {h}×{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = t.data();
    let quarter = T::of(0.25);
    let mut out = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            let at = |dy: usize, dx: usize| ((2 * oy + dy) * w + 2 * ox + dx) * c;
            let (a, b, p, q) = (at(0, 0), at(0, 1), at(1, 0), at(1, 1));
            for ch in 0..c {
                let v = [x[a + ch], x[b + ch], x[p + ch], x[q + ch]];
                out.push(match kind {
                    PoolKind::Avg => (v[0] + v[1] + v[2] + v[3]) * quarter,
                    PoolKind::Max => v[0].max(v[1]).max(v[2].max(v[3])),
                });
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// Index `(y·W + x)·C + c`, i.e. the tensor's own row-major HWC order.
pub fn flatten<T: Real>(t: &Tensor<T>) -> Vec<T> {
    t.data().to_vec()
}

pub fn unflatten<T: Real>(v: &[T], h: usize, w: usize, c: usize) -> Result<Tensor<T>> {
    Tensor::new(vec![h, w, c], v.to_vec())
}
