use duet::fuse::*;
use duet::kernel::{Matrix, Rng, SgdConfig, SgdState};
use proptest::prelude::*;

fn features(seed: u64, s: usize, d: usize) -> Matrix {
    let mut rng = Rng::new(seed);
    Matrix::from_fn(s, d, |_, _| rng.normal())
}

fn noisy(y: &Matrix, sd: f64, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    Matrix::from_fn(y.rows(), y.cols(), |i, j| y.get(i, j) + sd * rng.normal())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn learns_to_trust_the_better_branch() {
    let f = features(1, 300, 8);
    let mut rng = Rng::new(2);
    let y = Matrix::from_fn(300, 10, |_, _| rng.uniform_range(0.0, 4.0));
    let data = FuseData::new(f.clone(), y.clone(), noisy(&y, 3.0, 3), y).unwrap();
    let cfg = FuseConfig::default();
    let start = FuseAdapter::new(8, cfg.hidden, cfg.reg_coef, &Rng::new(4)).unwrap();
    let fit = train_fuse(start, &data, &cfg, &mut SgdState::new(cfg.sgd), &Rng::new(5)).unwrap();
    let a = mean(&fit.adapter.alphas(&f).unwrap());
    assert!(a > 0.8, "mean alpha {a}");
    assert!(fit.loss.last().unwrap() < &fit.loss[0]);
}

#[test]
fn symmetric_branches_stay_balanced() {
    let f = features(6, 300, 8);
    let mut rng = Rng::new(7);
    let y = Matrix::from_fn(300, 10, |_, _| rng.uniform_range(0.0, 4.0));
    let data = FuseData::new(f.clone(), noisy(&y, 1.0, 8), noisy(&y, 1.0, 9), y).unwrap();
    let cfg = FuseConfig::default();
    let start = FuseAdapter::new(8, cfg.hidden, cfg.reg_coef, &Rng::new(10)).unwrap();
    let fit = train_fuse(start, &data, &cfg, &mut SgdState::new(cfg.sgd), &Rng::new(11)).unwrap();
    let a = mean(&fit.adapter.alphas(&f).unwrap());
    assert!((0.4..=0.6).contains(&a), "mean alpha {a}");
}

#[test]
fn zero_epochs_keep_the_adapter() {
    let f = features(12, 20, 4);
    let y = features(13, 20, 3);
    let data = FuseData::new(f.clone(), y.clone(), noisy(&y, 1.0, 14), y).unwrap();
    let cfg = FuseConfig {
        epochs: 0,
        ..FuseConfig::default()
    };
    let start = FuseAdapter::new(4, 8, 1.0, &Rng::new(15)).unwrap();
    let fit = train_fuse(start.clone(), &data, &cfg, &mut SgdState::new(cfg.sgd), &Rng::new(16)).unwrap();
    assert_eq!(fit.adapter, start);
    assert!(fit.adapter.alphas(&f).unwrap().iter().all(|&a| a == 0.5));
}

#[test]
fn heavy_regularizer_pins_alpha_to_half() {
    let f = features(17, 200, 6);
    let mut rng = Rng::new(18);
    let y = Matrix::from_fn(200, 8, |_, _| rng.uniform_range(0.0, 4.0));
    let data = FuseData::new(f.clone(), y.clone(), noisy(&y, 3.0, 19), y).unwrap();
    let cfg = FuseConfig {
        reg_coef: 0.0,
        epochs: 5,
        ..FuseConfig::default()
    };
    let start = FuseAdapter::new(6, cfg.hidden, 0.0, &Rng::new(20)).unwrap();
    // first drive the weights away from equal weighting
    let free = train_fuse(start, &data, &cfg, &mut SgdState::new(cfg.sgd), &Rng::new(21)).unwrap();
    let drifted = mean(&free.adapter.alphas(&f).unwrap());
    assert!(drifted > 0.6, "{drifted}");

    let coef = 1e6;
    let pinned = FuseAdapter {
        reg_coef: coef,
        ..free.adapter
    };
    // step size matched to the regularizer's curvature
    let sgd = SgdConfig {
        lr: 0.5 / coef,
        momentum: 0.9,
        weight_decay: 0.0,
    };
    let cfg = FuseConfig {
        reg_coef: coef,
        epochs: 300,
        sgd,
        ..cfg
    };
    let fit = train_fuse(pinned, &data, &cfg, &mut SgdState::new(sgd), &Rng::new(22)).unwrap();
    for a in fit.adapter.alphas(&f).unwrap() {
        assert!((a - 0.5).abs() < 1e-2, "alpha {a}");
    }
}

#[test]
fn identical_features_identical_alpha() {
    let mut adapter = FuseAdapter::new(3, 6, 1.0, &Rng::new(23)).unwrap();
    let mut r = Rng::new(24);
    adapter
        .mlp
        .update_params(|p| p.iter_mut().for_each(|x| *x = r.normal()));
    let f = [0.3, -1.2, 2.0];
    let a = fuse_predict(&adapter, &f, &[1.0, 2.0], &[3.0, 4.0]).unwrap();
    let b = fuse_predict(&adapter, &f, &[9.0, -5.0], &[0.0, 0.0]).unwrap();
    assert_eq!(a.alpha, b.alpha);
}

#[test]
fn half_weight_is_the_mean() {
    let adapter = FuseAdapter::new(2, 4, 1.0, &Rng::new(25)).unwrap();
    let p = fuse_predict(&adapter, &[1.0, 1.0], &[2.0, 4.0], &[0.0, 1.0]).unwrap();
    assert_eq!(p.alpha, 0.5);
    assert_eq!(p.y_duet, vec![1.0, 2.5]);
    assert!(fuse_predict(&adapter, &[1.0, 1.0], &[2.0], &[0.0, 1.0]).is_err());
    assert!(fuse_predict(&adapter, &[1.0], &[2.0], &[0.0]).is_err());
}

fn random_adapter(seed: u64, d: usize) -> FuseAdapter {
    let mut a = FuseAdapter::new(d, 8, 1.0, &Rng::new(seed)).unwrap();
    let mut r = Rng::new(seed + 1);
    a.mlp.update_params(|p| p.iter_mut().for_each(|x| *x = r.normal()));
    a
}

#[test]
fn alpha_inside_unit_interval() {
    let a = random_adapter(26, 5);
    let x = features(27, 1000, 5);
    for v in a.alphas(&x).unwrap() {
        assert!(v > 0.0 && v < 1.0, "{v}");
    }
}

proptest! {
    #[test]
    fn fused_output_between_branches(seed in 0u64..10_000) {
        let a = random_adapter(seed, 3);
        let mut rng = Rng::new(seed + 2);
        let f: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let yr: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let yg: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let p = fuse_predict(&a, &f, &yr, &yg).unwrap();
        for k in 0..6 {
            prop_assert!(p.y_duet[k] >= yr[k].min(yg[k]) - 1e-12);
            prop_assert!(p.y_duet[k] <= yr[k].max(yg[k]) + 1e-12);
        }
        let same = fuse_predict(&a, &f, &yg, &yg).unwrap();
        prop_assert_eq!(same.y_duet, yg.clone());
    }

    #[test]
    fn fusion_linear_in_branches(seed in 0u64..10_000, c in -3.0f64..3.0) {
        let a = random_adapter(seed, 2);
        let mut rng = Rng::new(seed + 3);
        let f = [rng.normal(), rng.normal()];
        let v: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        let comb = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p + c * q).collect() };
        let lhs = fuse_predict(&a, &f, &comb(&v[0], &v[1]), &comb(&v[2], &v[3])).unwrap().y_duet;
        let p1 = fuse_predict(&a, &f, &v[0], &v[2]).unwrap().y_duet;
        let p2 = fuse_predict(&a, &f, &v[1], &v[3]).unwrap().y_duet;
        for k in 0..5 {
            prop_assert!((lhs[k] - (p1[k] + c * p2[k])).abs() < 1e-12);
        }
    }
}
