//! Images → feature vectors: preprocessing, frozen backbone, 2×2 pooling,
//! HWC flattening, and the on-disk feature cache.

pub mod backbone;
pub mod cache;
pub mod graph;
pub mod image;
pub mod pool;

use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

pub use backbone::{AdapterSpec, Backbone, ToySpec};
pub use cache::{sidecar_path, FeatureSet, FeatureValues, Provenance, CACHE_MAGIC, CACHE_VERSION};
pub use graph::{Graph, GraphSpec, Node, Op, GRAPH_MAGIC, GRAPH_VERSION};
pub use image::{decode_image, list_images, load_image, resize_bilinear, save_png, ImageTensor, Preprocess};
pub use pool::{flatten, pool2d, unflatten, PoolKind};

use crate::error::{Error, Result};

/// Backbone followed by pooling and flattening.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePipeline {
    pub backbone: Backbone,
    pub pool: PoolKind,
}

impl FeaturePipeline {
    pub fn new(backbone: Backbone, pool: PoolKind) -> Result<Self> {
        let [h, w, _] = backbone.output_shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("backbone output {h}×{w} cannot be pooled 2×2")));
        }
        Ok(Self { backbone, pool })
    }

    /// `(H/2)·(W/2)·C`.
    pub fn dim(&self) -> usize {
        let [h, w, c] = self.backbone.output_shape();
        (h / 2) * (w / 2) * c
    }

    pub fn features(&self, img: &ImageTensor) -> Result<Vec<f32>> {
        let act = self.backbone.extract(img)?;
        Ok(flatten(&pool2d(&act, self.pool)?))
    }

    fn provenance(&self, image_list_sha256: String, source: String) -> Provenance {
        Provenance {
            backbone: self.backbone.id().to_string(),
            pool: self.pool.name().to_string(),
            image_list_sha256,
            source,
            artifact: None,
        }
    }

    /// In-memory images, in order. Parallel across images.
    pub fn extract_images(&self, images: &[ImageTensor]) -> Result<FeatureSet> {
        let rows: Vec<Vec<f32>> = images.par_iter().map(|img| self.features(img)).collect::<Result<_>>()?;
        let mut set = FeatureSet::from_f32(self.dim(), rows.concat())?;
        set.provenance = self.provenance(String::new(), format!("memory:{}", images.len()));
        Ok(set)
    }

    /// Every PNG/JPEG in `dir`, sorted by file name.
    pub fn extract_dir(&self, dir: &Path) -> Result<FeatureSet> {
        let files = list_images(dir)?;
        let rows: Vec<(Vec<f32>, String, [u8; 32])> = files
            .par_iter()
            .map(|path| {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                let digest: [u8; 32] = Sha256::digest(&bytes).into();
                let img = decode_image(&bytes, path)?;
                let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((self.features(&img)?, name, digest))
            })
            .collect::<Result<_>>()?;
        let mut hasher = Sha256::new();
        let mut data = Vec::with_capacity(rows.len() * self.dim());
        for (row, name, digest) in &rows {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            hasher.update(digest);
            data.extend_from_slice(row);
        }
        let mut set = FeatureSet::from_f32(self.dim(), data)?;
        set.provenance = self.provenance(hex::encode(hasher.finalize()), format!("images:{}", rows.len()));
        Ok(set)
    }
}
