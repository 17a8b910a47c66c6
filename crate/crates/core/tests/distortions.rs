use fldplus::distortions::{
    distort_sweep, gaussian_blur, gaussian_noise, salt_pepper, DistortionKind, DistortionSpec,
};
use fldplus::features::{load_image, save_png, ImageTensor};

fn impulse(n: usize, value: f32) -> ImageTensor {
    let mut img = ImageTensor::filled(n, n, [0.0; 3]).unwrap();
    let c = n / 2;
    let i = (c * n + c) * 3;
    img.data_mut()[i..i + 3].fill(value);
    img
}

/// Direct 2-D convolution with an explicitly built k×k Gaussian, zero
/// padding (the impulse sits far from the border).
fn dense_blur(img: &ImageTensor, k: usize) -> Vec<f64> {
    let sigma = 0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8;
    let r = (k / 2) as isize;
    let mut kernel = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (dy, dx) = (i as f64 - r as f64, j as f64 - r as f64);
            kernel[i * k + j] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= s);
    let (h, w) = (img.height() as isize, img.width() as isize);
    let mut out = vec![0.0; img.data().len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for i in -r..=r {
                    for j in -r..=r {
                        let (yy, xx) = (y + i, x + j);
                        if yy >= 0 && yy < h && xx >= 0 && xx < w {
                            let v = img.data()[((yy * w + xx) * 3 + c) as usize] as f64;
                            acc += kernel[((i + r) * k as isize + j + r) as usize] * v;
                        }
                    }
                }
                out[((y * w + x) * 3 + c) as usize] = acc;
            }
        }
    }
    out
}

#[test]
fn blur_of_impulse_matches_dense_convolution() {
    let img = impulse(11, 255.0);
    let ours = gaussian_blur(&img, 3).unwrap();
    let oracle = dense_blur(&img, 3);
    for (a, b) in ours.data().iter().zip(&oracle) {
        assert!((*a as f64 - b).abs() <= 1.0, "{a} vs {b}");
    }
    // tighter than the one-unit tolerance, since both are exact up to rounding
    let max = ours.data().iter().zip(&oracle).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
    assert!(max < 1e-3);
}

#[test]
fn constant_image_survives_every_kernel() {
    let img = ImageTensor::filled(13, 9, [40.0, 120.0, 250.0]).unwrap();
    for k in [1, 3, 5, 7, 9, 11] {
        let out = gaussian_blur(&img, k).unwrap();
        assert!(out.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-3), "k={k}");
    }
}

#[test]
fn noise_blend_scalar() {
    let img = ImageTensor::filled(4, 4, [100.0; 3]).unwrap();
    let noise = fldplus::distortions::noise_matrix(&img, 5);
    let out = gaussian_noise(&img, 0.5, 5).unwrap();
    for (o, n) in out.data().iter().zip(&noise) {
        assert!((o - (0.5 * 100.0 + 0.5 * n)).abs() < 1e-4);
    }
    let full = gaussian_noise(&img, 1.0, 5).unwrap();
    assert_eq!(full.data(), &noise[..]);
    assert!(noise.iter().any(|&v| v == 0.0) && noise.iter().any(|&v| v == 255.0));
}

#[test]
fn salt_pepper_fraction_concentrates() {
    let img = ImageTensor::filled(1000, 1000, [128.0; 3]).unwrap();
    for seed in 0..10 {
        let out = salt_pepper(&img, 0.1, seed).unwrap();
        let altered = out.data().chunks_exact(3).filter(|p| p[0] != 128.0).count();
        let frac = altered as f64 / 1e6;
        assert!((0.095..=0.105).contains(&frac), "seed {seed}: {frac}");
    }
    let all = salt_pepper(&ImageTensor::filled(50, 50, [128.0; 3]).unwrap(), 1.0, 3).unwrap();
    assert!(all.data().iter().all(|&v| v == 0.0 || v == 255.0));
}

#[test]
fn outputs_stay_in_range() {
    let img = impulse(16, 255.0);
    for kind in [DistortionKind::GaussianNoise, DistortionKind::GaussianBlur, DistortionKind::SaltPepper] {
        for level in kind.default_levels() {
            let out = DistortionSpec::new(kind, level, 11).unwrap().apply(&img).unwrap();
            assert!(out.data().iter().all(|v| (0.0..=255.0).contains(v)));
        }
    }
}

fn write_inputs(dir: &std::path::Path) -> Vec<ImageTensor> {
    let imgs: Vec<ImageTensor> = (0..3)
        .map(|s| {
            let data = (0..20 * 24 * 3).map(|i| ((i * (7 + s) + s * 31) % 256) as f32).collect();
            ImageTensor::new(20, 24, data).unwrap()
        })
        .collect();
    for (i, img) in imgs.iter().enumerate() {
        save_png(img, &dir.join(format!("img{i}.png"))).unwrap();
    }
    imgs
}

#[test]
fn sweep_level_zero_is_pixel_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (src, out) = (tmp.path().join("in"), tmp.path().join("out"));
    std::fs::create_dir_all(&src).unwrap();
    let imgs = write_inputs(&src);
    let manifest = distort_sweep(&src, DistortionKind::GaussianNoise, &[0.0], 4, &out).unwrap();
    assert_eq!(manifest.failures(), 0);
    for (i, img) in imgs.iter().enumerate() {
        let back = load_image(&out.join("level_0").join(format!("img{i}.png"))).unwrap();
        assert_eq!(back.data(), img.data());
    }
    assert!(out.join("manifest.json").exists());
}

#[test]
fn sweep_rerun_gives_identical_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("in");
    std::fs::create_dir_all(&src).unwrap();
    write_inputs(&src);
    let levels = [0.0, 0.01, 0.1];
    let a = distort_sweep(&src, DistortionKind::SaltPepper, &levels, 9, &tmp.path().join("a")).unwrap();
    let b = distort_sweep(&src, DistortionKind::SaltPepper, &levels, 9, &tmp.path().join("b")).unwrap();
    assert_eq!(a, b);
    let ja = std::fs::read(tmp.path().join("a/manifest.json")).unwrap();
    let jb = std::fs::read(tmp.path().join("b/manifest.json")).unwrap();
    assert_eq!(ja, jb);
    let c = distort_sweep(&src, DistortionKind::SaltPepper, &levels, 10, &tmp.path().join("c")).unwrap();
    assert_ne!(a.outputs[2].files[0].sha256, c.outputs[2].files[0].sha256);
}

#[test]
fn sweep_difference_grows_with_level() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("in");
    std::fs::create_dir_all(&src).unwrap();
    let imgs = write_inputs(&src);
    for kind in [DistortionKind::GaussianNoise, DistortionKind::GaussianBlur, DistortionKind::SaltPepper] {
        let levels = kind.default_levels();
        let out = tmp.path().join(kind.name());
        let manifest = distort_sweep(&src, kind, &levels, 2, &out).unwrap();
        let mut prev = -1.0;
        for level in &manifest.outputs {
            let mut diff = 0.0;
            let mut n = 0usize;
            for (rec, img) in level.files.iter().zip(&imgs) {
                let got = load_image(&out.join(rec.output.as_ref().unwrap())).unwrap();
                diff += got.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
                n += img.data().len();
            }
            let mad = diff / n as f64;
            assert!(mad >= prev, "{} level {}: {mad} < {prev}", kind.name(), level.level);
            prev = mad;
        }
    }
}

#[test]
fn sweep_records_undecodable_files_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("in");
    std::fs::create_dir_all(&src).unwrap();
    write_inputs(&src);
    std::fs::write(src.join("broken.png"), b"not a png").unwrap();
    let manifest = distort_sweep(&src, DistortionKind::GaussianBlur, &[3.0], 0, &tmp.path().join("o")).unwrap();
    assert_eq!(manifest.failures(), 1);
    let bad = manifest.outputs[0].files.iter().find(|f| f.input == "broken.png").unwrap();
    assert!(bad.error.is_some() && bad.sha256.is_none());
}

#[test]
fn sweep_rejects_bad_levels_and_empty_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("in");
    std::fs::create_dir_all(&src).unwrap();
    assert!(distort_sweep(&src, DistortionKind::GaussianBlur, &[3.0], 0, &tmp.path().join("o")).is_err());
    write_inputs(&src);
    assert!(distort_sweep(&src, DistortionKind::GaussianBlur, &[4.0], 0, &tmp.path().join("o")).is_err());
    assert!(distort_sweep(&src, DistortionKind::SaltPepper, &[1.5], 0, &tmp.path().join("o")).is_err());
    assert!(distort_sweep(&src, DistortionKind::GaussianNoise, &[], 0, &tmp.path().join("o")).is_err());
}
