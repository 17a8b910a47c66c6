//! Controlled image degradations: Gaussian noise blending, Gaussian blur
//! and salt-and-pepper, plus directory sweeps with a hashed manifest.

pub mod sweep;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::ImageTensor;

pub use sweep::{distort_sweep, FileRecord, LevelRecord, Manifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistortionKind {
    GaussianNoise,
    GaussianBlur,
    SaltPepper,
}

impl DistortionKind {
    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::GaussianNoise => "gaussian-noise",
            DistortionKind::GaussianBlur => "gaussian-blur",
            DistortionKind::SaltPepper => "salt-pepper",
        }
    }

    /// The level grids used by the monotonicity experiments.
    pub fn default_levels(self) -> Vec<f64> {
        match self {
            DistortionKind::GaussianBlur => vec![1.0, 3.0, 5.0, 7.0, 9.0, 11.0],
            _ => vec![0.0, 0.001, 0.005, 0.01, 0.05, 0.1],
        }
    }

    pub fn validate_level(self, level: f64) -> Result<()> {
        let ok = match self {
            DistortionKind::GaussianNoise | DistortionKind::SaltPepper => (0.0..=1.0).contains(&level),
            DistortionKind::GaussianBlur => level >= 1.0 && level.fract() == 0.0 && (level as u64) % 2 == 1,
        };
        if ok {
            Ok(())
        } else {
            let need = match self {
                DistortionKind::GaussianBlur => "an odd integer ≥ 1",
                _ => "in [0, 1]",
            };
            Err(Error::InvalidParameter(format!("{} level {level} must be {need}", self.name())))
        }
    }
}

impl std::str::FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-noise" | "noise" => Ok(DistortionKind::GaussianNoise),
            "gaussian-blur" | "blur" => Ok(DistortionKind::GaussianBlur),
            "salt-pepper" => Ok(DistortionKind::SaltPepper),
            _ => Err(Error::InvalidParameter(format!(
                "distortion {s:?} (expected gaussian-noise, gaussian-blur or salt-pepper)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    /// α for noise, kernel size k for blur, p for salt-and-pepper.
    pub level: f64,
    pub seed: u64,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, level: f64, seed: u64) -> Result<Self> {
        kind.validate_level(level)?;
        Ok(Self { kind, level, seed })
    }

    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor> {
        match self.kind {
            DistortionKind::GaussianNoise => gaussian_noise(img, self.level, self.seed),
            DistortionKind::GaussianBlur => gaussian_blur(img, self.level as usize),
            DistortionKind::SaltPepper => salt_pepper(img, self.level, self.seed),
        }
    }
}

/// Per-image stream seed, independent of processing order.
pub fn image_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Standard-normal matrix the size of `img`, min-max scaled onto exactly
/// `[0, 255]`.
pub fn noise_matrix(img: &ImageTensor, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..img.data().len()).map(|_| rng.sample(StandardNormal)).collect();
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    raw.iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0) as f32 } else { 127.5 })
        .collect()
}

/// `(1 − α)·X + α·N`, clipped to `[0, 255]`.
pub fn gaussian_noise(img: &ImageTensor, alpha: f64, seed: u64) -> Result<ImageTensor> {
    DistortionKind::GaussianNoise.validate_level(alpha)?;
    if alpha == 0.0 {
        return Ok(img.clone());
    }
    let noise = noise_matrix(img, seed);
    let a = alpha as f32;
    let data = img
        .data()
        .iter()
        .zip(&noise)
        .map(|(&x, &n)| ((1.0 - a) * x + a * n).clamp(0.0, 255.0))
        .collect();
    ImageTensor::new(img.height(), img.width(), data)
}

/// `σ = 0.3·((k − 1)/2 − 1) + 0.8`.
pub fn blur_sigma(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

/// Normalized 1-D Gaussian taps for an odd kernel size.
pub fn gaussian_kernel(k: usize) -> Result<Vec<f64>> {
    DistortionKind::GaussianBlur.validate_level(k as f64)?;
    let sigma = blur_sigma(k);
    let c = (k / 2) as f64;
    let taps: Vec<f64> = (0..k).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    Ok(taps.iter().map(|t| t / sum).collect())
}

/// Mirror index without repeating the edge pixel (`dcb|abcd|cba`).
pub fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur per channel with mirrored borders.
pub fn gaussian_blur(img: &ImageTensor, k: usize) -> Result<ImageTensor> {
    let taps = gaussian_kernel(k)?;
    if k == 1 {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    let r = (k / 2) as isize;
    let src = img.data();
    let mut rows = vec![0.0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (t, &g) in taps.iter().enumerate() {
                    let xx = reflect101(x as isize + t as isize - r, w);
                    acc += g * f64::from(src[(y * w + xx) * 3 + c]);
                }
                rows[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (t, &g) in taps.iter().enumerate() {
                    let yy = reflect101(y as isize + t as isize - r, h);
                    acc += g * rows[(yy * w + x) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = (acc as f32).clamp(0.0, 255.0);
            }
        }
    }
    ImageTensor::new(h, w, out)
}

/// One uniform `u` per pixel: `u < p/2` → 255, `u ≥ 1 − p/2` → 0, on all
/// channels of that pixel.
pub fn salt_pepper(img: &ImageTensor, p: f64, seed: u64) -> Result<ImageTensor> {
    DistortionKind::SaltPepper.validate_level(p)?;
    let mut out = img.clone();
    if p == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for px in out.data_mut().chunks_exact_mut(3) {
        let u: f64 = rng.random();
        if u < p / 2.0 {
            px.fill(255.0);
        } else if u >= 1.0 - p / 2.0 {
            px.fill(0.0);
        }
    }
    Ok(out)
}
