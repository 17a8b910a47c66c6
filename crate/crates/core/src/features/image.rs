//! RGB images and the backbone preprocessing chain: bilinear resize,
//! scaling to `[0, 1]`, per-channel standardization.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ColorType, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// ImageNet channel statistics, used by both torchvision backbones.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Three-channel image in HWC order with values in `[0, 255]`. Held as
/// floats so distortions can compose without intermediate rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image of size {height}×{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}×{width}×3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=255.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!("pixel value {v} outside [0, 255]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| f32::from(v)).collect(),
        }
    }

    /// Rounds to the nearest integer intensity.
    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer matches dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable pixel access. Callers keep values in `[0, 255]`.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

fn image_error(path: &Path, detail: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

/// Decodes a PNG or JPEG. Only three-channel color images are accepted.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

/// Decodes in-memory file contents; `path` is only used in errors.
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<ImageTensor> {
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| image_error(path, e))?;
    match decoded.color() {
        ColorType::Rgb8 | ColorType::Rgb16 => Ok(ImageTensor::from_rgb8(&decoded.to_rgb8())),
        other => Err(image_error(
            path,
            format!("expected 3 colour channels, found {} ({other:?})", other.channel_count()),
        )),
    }
}

pub fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    img.to_rgb8()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

/// PNG/JPEG files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

/// Source coordinate and blend weight for each output index, half-pixel
/// centres, edge clamped.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (s - lo as f64) as f32)
        })
        .collect()
}

/// Bilinear resize with half-pixel centres and no antialiasing (the
/// `align_corners = False` convention). Same-size input is returned as is.
pub fn resize_bilinear(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidParameter(format!("resize target {height}×{width}")));
    }
    if height == img.height && width == img.width {
        return Ok(img.clone());
    }
    let ys = axis_taps(img.height, height);
    let xs = axis_taps(img.width, width);
    let mut out = Vec::with_capacity(height * width * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let p00 = img.pixel(y0, x0);
            let p01 = img.pixel(y0, x1);
            let p10 = img.pixel(y1, x0);
            let p11 = img.pixel(y1, x1);
            for c in 0..3 {
                let top = p00[c] + (p01[c] - p00[c]) * fx;
                let bottom = p10[c] + (p11[c] - p10[c]) * fx;
                out.push((top + (bottom - top) * fy).clamp(0.0, 255.0));
            }
        }
    }
    Ok(ImageTensor {
        height,
        width,
        data: out,
    })
}

/// Resize, scale to `[0, 1]`, standardize per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub height: usize,
    pub width: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Preprocess {
    pub fn imagenet(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    /// Returns an `H × W × 3` tensor.
    pub fn apply(&self, img: &ImageTensor) -> Result<Tensor<f32>> {
        let resized = resize_bilinear(img, self.height, self.width)?;
        let data = resized
            .data
            .chunks_exact(3)
            .flat_map(|px| (0..3).map(move |c| (px[c] / 255.0 - self.mean[c]) / self.std[c]))
            .collect();
        Tensor::new(vec![self.height, self.width, 3], data)
    }
}
