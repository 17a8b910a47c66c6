//! Procedural face-like images: a stand-in "real" image distribution that
//! needs no dataset download. Each image draws its layout, palette and
//! texture from a seeded stream, so sets are reproducible and any two
//! seeds give disjoint samples of the same distribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::features::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceStyle {
    pub size: usize,
    /// Per-pixel sensor noise std, in intensity units.
    pub grain: f32,
    /// Width of shape boundaries in pixels; smaller is crisper.
    pub edge: f32,
}

impl Default for FaceStyle {
    fn default() -> Self {
        Self {
            size: 64,
            grain: 2.0,
            edge: 0.3,
        }
    }
}

const SKIN: [[f32; 3]; 5] = [
    [241.0, 194.0, 167.0],
    [224.0, 172.0, 105.0],
    [198.0, 134.0, 66.0],
    [141.0, 85.0, 36.0],
    [255.0, 219.0, 172.0],
];

/// Soft 0..1 coverage of an axis-aligned ellipse, about one pixel wide.
fn ellipse(x: f32, y: f32, cx: f32, cy: f32, rx: f32, ry: f32, px: f32) -> f32 {
    let d = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
    let edge = px / rx.min(ry);
    ((1.0 - d) / edge + 0.5).clamp(0.0, 1.0)
}

fn blend(dst: &mut [f32; 3], src: [f32; 3], a: f32) {
    for c in 0..3 {
        dst[c] += (src[c] - dst[c]) * a;
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f32; 3], amount: f32) -> [f32; 3] {
    base.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 255.0))
}

/// One image; `index` selects the sample within the `seed` stream.
pub fn face(style: &FaceStyle, seed: u64, index: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = style.size;
    let s = n as f32 / 64.0;

    let top = jitter(&mut rng, [90.0, 110.0, 140.0], 60.0);
    let bottom = jitter(&mut rng, [160.0, 150.0, 130.0], 60.0);
    let tone = SKIN[rng.random_range(0..SKIN.len())];
    let skin = jitter(&mut rng, tone, 18.0);
    let hair = jitter(&mut rng, [50.0, 35.0, 25.0], 30.0);
    let iris = jitter(&mut rng, [70.0, 90.0, 80.0], 40.0);
    let lips = jitter(&mut rng, [180.0, 80.0, 80.0], 30.0);

    let cx = 32.0 * s + rng.random_range(-4.0..=4.0) * s;
    let cy = 34.0 * s + rng.random_range(-3.0..=3.0) * s;
    let rx = rng.random_range(14.0..=19.0) * s;
    let ry = rng.random_range(18.0..=23.0) * s;
    let hair_drop = rng.random_range(0.25..=0.6);
    let eye_dx = rng.random_range(0.32..=0.45) * rx;
    let eye_y = cy - rng.random_range(0.15..=0.3) * ry;
    let eye_r = rng.random_range(2.2..=3.4) * s;
    let gaze = rng.random_range(-0.8..=0.8) * s;
    let mouth_y = cy + rng.random_range(0.4..=0.55) * ry;
    let mouth_w = rng.random_range(0.25..=0.45) * rx;
    let mouth_h = rng.random_range(0.8..=2.5) * s;
    let light = rng.random_range(-0.25..=0.25);

    let e = style.edge.max(1e-3) * s;
    let grain = Normal::new(0.0f32, style.grain.max(0.0)).expect("finite std");
    let mut data = Vec::with_capacity(n * n * 3);
    for yi in 0..n {
        for xi in 0..n {
            let (x, y) = (xi as f32 + 0.5, yi as f32 + 0.5);
            let t = y / n as f32;
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                px[c] = top[c] * (1.0 - t) + bottom[c] * t;
            }
            // hair behind and above the face
            blend(&mut px, hair, ellipse(x, y, cx, cy - 0.15 * ry, rx * 1.15, ry * 1.1, e));
            let shade = 1.0 + light * (x - cx) / rx;
            let lit_skin = skin.map(|v| (v * shade).clamp(0.0, 255.0));
            blend(&mut px, lit_skin, ellipse(x, y, cx, cy, rx, ry, e));
            // fringe: hair covering the top of the face
            let fringe = ellipse(x, y, cx, cy - ry * (1.0 + hair_drop) + ry * 0.5, rx * 1.05, ry * 0.6, e);
            blend(&mut px, hair, fringe * ellipse(x, y, cx, cy, rx, ry, e));
            for side in [-1.0f32, 1.0] {
                let ex = cx + side * eye_dx;
                blend(&mut px, [240.0, 240.0, 235.0], ellipse(x, y, ex, eye_y, eye_r * 1.6, eye_r, 0.7 * e));
                blend(&mut px, iris, ellipse(x, y, ex + gaze, eye_y, eye_r * 0.7, eye_r * 0.7, 0.7 * e));
                blend(&mut px, [15.0, 15.0, 15.0], ellipse(x, y, ex + gaze, eye_y, eye_r * 0.3, eye_r * 0.3, 0.5 * e));
            }
            blend(&mut px, lips, ellipse(x, y, cx, mouth_y, mouth_w, mouth_h, 0.7 * e));
            for v in &mut px {
                *v = (*v + grain.sample(&mut rng)).round().clamp(0.0, 255.0);
            }
            data.extend_from_slice(&px);
        }
    }
    ImageTensor::new(n, n, data).expect("generated pixels are in range")
}

/// `count` images `seed:start .. seed:start+count`.
pub fn faces(style: &FaceStyle, seed: u64, start: u64, count: usize) -> Vec<ImageTensor> {
    (0..count as u64).map(|i| face(style, seed, start + i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct() {
        let style = FaceStyle::default();
        assert_eq!(face(&style, 1, 5), face(&style, 1, 5));
        assert_ne!(face(&style, 1, 5), face(&style, 1, 6));
        assert_ne!(face(&style, 1, 5), face(&style, 2, 5));
    }

    #[test]
    fn integer_pixels_in_range() {
        let img = face(&FaceStyle {
            size: 32,
            grain: 20.0,
            ..FaceStyle::default()
        }, 0, 0);
        assert_eq!((img.height(), img.width()), (32, 32));
        assert!(img.data().iter().all(|&v| (0.0..=255.0).contains(&v) && v.fract() == 0.0));
    }

    #[test]
    fn face_is_centred_on_skin() {
        let style = FaceStyle {
            grain: 0.0,
            ..FaceStyle::default()
        };
        let img = face(&style, 3, 0);
        // the nose area is skin-toned: red channel dominates blue
        let p = img.pixel(36, 32);
        assert!(p[0] > p[2], "{p:?}");
    }
}
