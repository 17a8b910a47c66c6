//! Directory-in, directory-out distortion sweeps.
//!
//! Layout: `<out>/level_<value>/<stem>.png` for every input image and
//! level, plus `<out>/manifest.json`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{image_seed, DistortionKind, DistortionSpec};
use crate::binio::write_file_atomic;
use crate::error::{Error, Result};
use crate::features::{decode_image, list_images, ImageTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub input: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub level: f64,
    pub dir: String,
    pub files: Vec<FileRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub kind: DistortionKind,
    pub levels: Vec<f64>,
    pub seed: u64,
    /// How the noise matrix is mapped onto `[0, 255]` (noise sweeps only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_scaling: Option<String>,
    pub outputs: Vec<LevelRecord>,
}

impl Manifest {
    pub fn failures(&self) -> usize {
        self.outputs
            .iter()
            .flat_map(|l| &l.files)
            .filter(|f| f.error.is_some())
            .count()
    }
}

pub fn level_dir_name(level: f64) -> String {
    format!("level_{level}")
}

fn encode_png(img: &ImageTensor) -> std::result::Result<Vec<u8>, String> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.to_rgb8()
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    Ok(buf.into_inner())
}

/// Distorts every image in `images` at every level. Per-file failures are
/// recorded in the manifest and do not stop the sweep.
pub fn distort_sweep(images: &Path, kind: DistortionKind, levels: &[f64], seed: u64, out: &Path) -> Result<Manifest> {
    if levels.is_empty() {
        return Err(Error::InvalidParameter("at least one level is required".into()));
    }
    for &l in levels {
        kind.validate_level(l)?;
    }
    let files = list_images(images)?;
    let decoded: Vec<(String, std::result::Result<ImageTensor, String>)> = files
        .par_iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let img = std::fs::read(p)
                .map_err(|e| e.to_string())
                .and_then(|b| decode_image(&b, p).map_err(|e| e.to_string()));
            (name, img)
        })
        .collect();
    if !decoded.iter().any(|(_, r)| r.is_ok()) {
        return Err(Error::InsufficientSamples(format!("no decodable images in {}", images.display())));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut outputs = Vec::with_capacity(levels.len());
    for &level in levels {
        let dir_name = level_dir_name(level);
        let dir = out.join(&dir_name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let files: Vec<FileRecord> = decoded
            .par_iter()
            .map(|(name, img)| {
                let stem = Path::new(name).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let out_name = format!("{stem}.png");
                let result = img.as_ref().map_err(Clone::clone).and_then(|img| {
                    let spec = DistortionSpec::new(kind, level, image_seed(seed, name)).map_err(|e| e.to_string())?;
                    let distorted = spec.apply(img).map_err(|e| e.to_string())?;
                    let bytes = encode_png(&distorted)?;
                    write_file_atomic(&dir.join(&out_name), &bytes).map_err(|e| e.to_string())?;
                    Ok(hex::encode(Sha256::digest(&bytes)))
                });
                match result {
                    Ok(hash) => FileRecord {
                        input: name.clone(),
                        output: Some(format!("{dir_name}/{out_name}")),
                        sha256: Some(hash),
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("{name} at level {level}: {e}");
                        FileRecord {
                            input: name.clone(),
                            output: None,
                            sha256: None,
                            error: Some(e),
                        }
                    }
                }
            })
            .collect();
        outputs.push(LevelRecord {
            level,
            dir: dir_name,
            files,
        });
    }
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        kind,
        levels: levels.to_vec(),
        seed,
        noise_scaling: (kind == DistortionKind::GaussianNoise).then(|| "min-max".to_string()),
        outputs,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_file_atomic(&out.join("manifest.json"), &json)?;
    Ok(manifest)
}
