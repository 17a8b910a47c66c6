use fldplus::experiments::synthetic::{two_moons, RingMixture};
use fldplus::flow::{
    checkpoint_precision, load_flow, save_flow, train_flow, ActNorm, CouplingLayer, FlowConfig, FlowModel, Layer, SplineShape, TrainConfig,
};
use fldplus::nn::{finite_diff_jacobian, log_abs_det, relative_error, Activation, Mlp};
use fldplus::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn small_config(dim: usize, layers: usize, seed: u64) -> FlowConfig {
    FlowConfig {
        coupling_layers: layers,
        hidden: vec![16, 16],
        activation: Activation::Tanh,
        seed,
        ..FlowConfig::new(dim)
    }
}

fn random_model<T: fldplus::Real>(dim: usize, layers: usize, seed: u64) -> FlowModel<T> {
    let mut m = FlowModel::<T>::new(small_config(dim, layers, seed)).unwrap();
    m.randomize_parameters(0.3, seed + 1000);
    m
}

fn gaussian_rows(n: usize, dim: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_coupling(dim: usize, parity: u8, seed: u64) -> CouplingLayer<f64> {
    let shape = SplineShape::default();
    let fixed = if parity == 0 { dim / 2 } else { dim - dim / 2 };
    let moved = dim - fixed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Mlp::random(&[fixed, 12, moved * shape.raw_len()], Activation::Tanh, &mut rng).unwrap();
    CouplingLayer::new(dim, parity, shape, net).unwrap()
}

#[test]
fn identity_coupling_copies_input() {
    let shape = SplineShape::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = Mlp::<f64>::random(&[3, 8, 3 * shape.raw_len()], Activation::Relu, &mut rng).unwrap();
    for layer in net.layers_mut() {
        layer.weight.data_mut().fill(0.0);
        layer.bias.data_mut().fill(0.0);
    }
    let c = CouplingLayer::new(6, 0, shape, net).unwrap();
    let x = gaussian_rows(10, 6, 2.0, 1);
    let mut y = x.clone();
    let ld = c.forward_rows(&mut y, 10).unwrap();
    for (a, b) in x.iter().zip(&y) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(ld.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn coupling_rejects_wrong_width() {
    let c = random_coupling(4, 0, 1);
    let mut x = vec![0.0; 5];
    assert!(matches!(c.forward_rows(&mut x, 1), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn coupling_inverse_in_single_precision() {
    let shape = SplineShape::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = Mlp::<f32>::random(&[4, 16, 4 * shape.raw_len()], Activation::Relu, &mut rng).unwrap();
    let c = CouplingLayer::new(8, 1, shape, net).unwrap();
    let x: Vec<f32> = gaussian_rows(64, 8, 1.5, 4).iter().map(|&v| v as f32).collect();
    let mut h = x.clone();
    c.forward_rows(&mut h, 64).unwrap();
    c.inverse_rows(&mut h, 64).unwrap();
    let worst = x.iter().zip(&h).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(worst <= 1e-5, "{worst}");
}

#[test]
fn coupling_logdet_matches_dense_jacobian() {
    for seed in 0..10 {
        for parity in [0u8, 1] {
            let c = random_coupling(4, parity, seed);
            let x = gaussian_rows(1, 4, 1.2, 100 + seed);
            let mut y = x.clone();
            let ld = c.forward_rows(&mut y, 1).unwrap()[0];
            let jac = finite_diff_jacobian(
                |v| {
                    let mut h = v.to_vec();
                    c.forward_rows(&mut h, 1).unwrap();
                    h
                },
                &x,
                1e-6,
            )
            .unwrap();
            let oracle = log_abs_det(&jac, 4);
            assert!((ld - oracle).abs() < 1e-4, "seed {seed}: {ld} vs {oracle}");
        }
    }
}

#[test]
fn actnorm_standardizes_and_matches_jacobian() {
    let x = gaussian_rows(500, 3, 1.0, 9)
        .chunks_exact(3)
        .flat_map(|r| [4.0 + 3.0 * r[0], -2.0 + 0.1 * r[1], r[2]])
        .collect::<Vec<_>>();
    let mut a = ActNorm::<f64>::identity(3);
    a.initialize(&x, 500).unwrap();
    let mut y = x.clone();
    a.forward_rows(&mut y);
    for d in 0..3 {
        let col: Vec<f64> = y.iter().skip(d).step_by(3).copied().collect();
        let mean = col.iter().sum::<f64>() / 500.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 500.0;
        assert!(mean.abs() <= 1e-5 && (0.99..=1.01).contains(&var), "{mean} {var}");
    }
    let point = [0.3, -1.0, 2.0];
    let jac = finite_diff_jacobian(
        |v| {
            let mut h = v.to_vec();
            a.forward_rows(&mut h);
            h
        },
        &point,
        1e-6,
    )
    .unwrap();
    assert!((a.log_det() - log_abs_det(&jac, 3)).abs() < 1e-6);
}

#[test]
fn zero_layer_flow_is_the_base_gaussian() {
    let mut m = FlowModel::<f64>::new(FlowConfig {
        coupling_layers: 0,
        ..FlowConfig::new(2)
    })
    .unwrap();
    m.initialize(&[0.0, 1.0, 1.0, 0.0], 2).unwrap();
    let lp = m.log_prob(&[0.0, 0.0]).unwrap();
    assert!((lp - (-1.837877)).abs() < 1e-6, "{lp}");
    let a = m.log_prob(&[0.7, -1.9]).unwrap();
    let b = m.log_prob(&[-1.9, 0.7]).unwrap();
    assert_eq!(a, b);

    let samples = m.sample(50, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws: Vec<f64> = (0..100).map(|_| rng.sample(StandardNormal)).collect();
    assert_eq!(samples, draws);
}

#[test]
fn uninitialized_model_refuses_to_score() {
    let m = FlowModel::<f64>::new(small_config(4, 2, 0)).unwrap();
    assert!(matches!(m.log_prob(&[0.0; 4]), Err(Error::Uninitialized)));
}

#[test]
fn invertibility_in_both_precisions() {
    for seed in 0..5 {
        let m64 = random_model::<f64>(6, 4, seed);
        let x = gaussian_rows(100, 6, 1.5, seed + 50);
        let fwd = m64.forward(&x, 100).unwrap();
        let inv = m64.inverse(&fwd.z, 100).unwrap();
        let worst = x.iter().zip(&inv.z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-10, "f64 seed {seed}: {worst}");
        for (a, b) in fwd.logdet.iter().zip(&inv.logdet) {
            assert!((a + b).abs() <= 1e-6);
        }

        let m32 = random_model::<f32>(6, 4, seed);
        let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let fwd = m32.forward(&x32, 100).unwrap();
        let inv = m32.inverse(&fwd.z, 100).unwrap();
        let worst = x32.iter().zip(&inv.z).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(worst <= 1e-5, "f32 seed {seed}: {worst}");
    }
}

#[test]
fn flow_logdet_matches_dense_jacobian_up_to_eight_dims() {
    for dim in [2usize, 3, 5, 8] {
        for seed in 0..4 {
            let m = random_model::<f64>(dim, 3, seed);
            let x = gaussian_rows(1, dim, 1.0, seed + 7);
            let ld = m.forward(&x, 1).unwrap().logdet[0];
            let jac = finite_diff_jacobian(|v| m.forward(v, 1).unwrap().z, &x, 1e-6).unwrap();
            let oracle = log_abs_det(&jac, dim);
            assert!((ld - oracle).abs() < 1e-4, "D={dim} seed {seed}: {ld} vs {oracle}");
        }
    }
}

#[test]
fn density_integrates_to_one_in_two_dims() {
    let m = random_model::<f64>(2, 4, 21);
    let (lo, hi, steps) = (-10.0, 10.0, 800usize);
    let h = (hi - lo) / steps as f64;
    let mut grid = Vec::with_capacity(2 * steps * steps);
    for i in 0..steps {
        for j in 0..steps {
            grid.push(lo + (i as f64 + 0.5) * h);
            grid.push(lo + (j as f64 + 0.5) * h);
        }
    }
    let lp = m.log_prob_rows(&grid, steps * steps).unwrap();
    let mass: f64 = lp.iter().map(|v| v.exp()).sum::<f64>() * h * h;
    assert!((mass - 1.0).abs() < 0.01, "{mass}");
}

#[test]
fn batched_scoring_matches_single_rows() {
    let m = random_model::<f64>(5, 3, 2);
    let x = gaussian_rows(600, 5, 1.0, 3);
    let batch = m.log_prob_rows(&x, 600).unwrap();
    for (row, &b) in x.chunks_exact(5).zip(&batch).step_by(37) {
        assert_eq!(m.log_prob(row).unwrap(), b);
    }
}

#[test]
fn sampling_is_deterministic() {
    let m = random_model::<f64>(4, 3, 5);
    assert_eq!(m.sample(20, 1).unwrap(), m.sample(20, 1).unwrap());
    assert_ne!(m.sample(20, 1).unwrap(), m.sample(20, 2).unwrap());
}

#[test]
fn parameter_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut m = random_model::<f64>(4, 2, seed);
        let x = gaussian_rows(6, 4, 1.0, seed + 300);
        let (_, grads) = m.nll_and_grads(&x, 6).unwrap();
        let analytic: Vec<f64> = grads.slices().iter().flat_map(|s| s.iter().copied()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = analytic.len();
        for _ in 0..6 {
            let k = rng.random_range(0..total);
            let eps = 1e-5;
            let nll_at = |m: &mut FlowModel<f64>, delta: f64| {
                let mut idx = k;
                for s in m.param_slices_mut() {
                    if idx < s.len() {
                        s[idx] += delta;
                        break;
                    }
                    idx -= s.len();
                }
                let v = -m.log_prob_rows(&x, 6).unwrap().iter().sum::<f64>() / 6.0;
                let mut idx = k;
                for s in m.param_slices_mut() {
                    if idx < s.len() {
                        s[idx] -= delta;
                        break;
                    }
                    idx -= s.len();
                }
                v
            };
            let fd = (nll_at(&mut m, eps) - nll_at(&mut m, -eps)) / (2.0 * eps);
            let err = relative_error(analytic[k], fd, 1e-3);
            assert!(err < 1e-4, "seed {seed} param {k}: {} vs {fd}", analytic[k]);
        }
    }
}

fn moons_config() -> (FlowConfig, TrainConfig) {
    let flow = FlowConfig {
        coupling_layers: 4,
        hidden: vec![32, 32],
        seed: 1,
        ..FlowConfig::new(2)
    };
    let train = TrainConfig {
        epochs: 30,
        batch_size: 128,
        lr: 1e-3,
        seed: 2,
        ..TrainConfig::default()
    };
    (flow, train)
}

#[test]
fn training_improves_validation_nll_on_two_moons() {
    let data = two_moons(2000, 0.08, 0);
    let (flow, train) = moons_config();
    let out = train_flow::<f64>(flow, &data, 2000, &train).unwrap();
    let log = &out.log;
    assert!(log.diverged.is_none());
    assert!(log.best_val_nll < log.records[0].val_nll);
    assert!(log.records.iter().any(|r| r.epoch == 30) || log.stopped_early);

    // running mean of the first five epochs keeps falling
    let mut prev = f64::INFINITY;
    let mut sum = 0.0;
    for (k, r) in log.records[1..=5].iter().enumerate() {
        sum += r.train_nll;
        let running = sum / (k + 1) as f64;
        assert!(running < prev, "epoch {}: {running} !< {prev}", r.epoch);
        prev = running;
    }
}

#[test]
fn training_is_bit_reproducible() {
    let data = two_moons(600, 0.1, 5);
    let (flow, mut train) = moons_config();
    train.epochs = 3;
    let a = train_flow::<f64>(flow.clone(), &data, 600, &train).unwrap();
    let b = train_flow::<f64>(flow, &data, 600, &train).unwrap();
    assert_eq!(a.model.param_slices(), b.model.param_slices());
    assert_eq!(a.log, b.log);
}

#[test]
fn zero_epochs_returns_the_initialized_model() {
    let data = two_moons(600, 0.1, 5);
    let (flow, mut train) = moons_config();
    train.epochs = 0;
    let out = train_flow::<f64>(flow.clone(), &data, 600, &train).unwrap();
    assert_eq!(out.log.records.len(), 1);
    assert_eq!(out.log.best_epoch, 0);
    // couplings are still the identity, only actnorm moved
    let fresh = FlowModel::<f64>::new(flow).unwrap();
    for (a, b) in out.model.layers().iter().zip(fresh.layers()) {
        if let (Layer::Coupling(x), Layer::Coupling(y)) = (a, b) {
            assert_eq!(x, y);
        }
    }
    assert!(out.model.is_initialized());
}

#[test]
fn trained_flow_samples_have_the_right_mean() {
    let mix = RingMixture::new(2.0, 0.0).unwrap();
    let data = mix.sample(4000, 3);
    let (flow, mut train) = moons_config();
    train.epochs = 20;
    let out = train_flow::<f64>(flow, &data, 4000, &train).unwrap();
    let n = 2000;
    let s = out.model.sample(n, 8).unwrap();
    for d in 0..2 {
        let col: Vec<f64> = s.iter().skip(d).step_by(2).copied().collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let se = sd / (n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "dim {d}: mean {mean}, se {se}");
    }
}

#[test]
fn training_rejects_bad_inputs() {
    let (flow, train) = moons_config();
    let few = two_moons(100, 0.1, 0);
    assert!(matches!(
        train_flow::<f64>(flow.clone(), &few, 100, &train),
        Err(Error::InsufficientSamples(_))
    ));
    let same = vec![0.5; 2 * 400];
    assert!(matches!(train_flow::<f64>(flow, &same, 400, &train), Err(Error::Degenerate(_))));
}

#[test]
fn checkpoint_roundtrip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flow.flpc");
    let m = random_model::<f64>(6, 3, 4);
    save_flow(&m, &path).unwrap();
    let back = load_flow::<f64>(&path).unwrap();
    let x = gaussian_rows(100, 6, 1.0, 1);
    assert_eq!(m.log_prob_rows(&x, 100).unwrap(), back.log_prob_rows(&x, 100).unwrap());

    let m32 = random_model::<f32>(6, 3, 4);
    let p32 = dir.path().join("flow32.flpc");
    save_flow(&m32, &p32).unwrap();
    let back32 = load_flow::<f32>(&p32).unwrap();
    let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    assert_eq!(m32.log_prob_rows(&x32, 100).unwrap(), back32.log_prob_rows(&x32, 100).unwrap());
    assert_eq!(checkpoint_precision(&path).unwrap(), fldplus::Precision::F64);
    assert_eq!(checkpoint_precision(&p32).unwrap(), fldplus::Precision::F32);
}

#[test]
fn checkpoint_errors_are_explicit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flow.flpc");
    save_flow(&random_model::<f64>(4, 2, 0), &path).unwrap();
    let good = std::fs::read(&path).unwrap();

    assert!(matches!(load_flow::<f32>(&path), Err(Error::PrecisionMismatch { .. })));

    let mut bad = good.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_flow::<f64>(&path), Err(Error::BadMagic { .. })));

    let mut bad = good.clone();
    bad[4] = 9;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_flow::<f64>(&path), Err(Error::UnsupportedVersion { found: 9, .. })));

    std::fs::write(&path, &good[..good.len() - 5]).unwrap();
    assert!(matches!(load_flow::<f64>(&path), Err(Error::Truncated { .. })));

    std::fs::write(&path, &good[..20]).unwrap();
    assert!(load_flow::<f64>(&path).is_err());
}
