mod common;

use common::{dataset, gradient_error, net_gradient_error, normal, random_net_case};
use nalgebra::{DMatrix, DVector};
use proci::bench::sigmoid;
use proci::error::Error;
use proci::estimators::psm::PROPENSITY_L2;
use proci::estimators::{
    fit_estimator, fit_logistic, fit_psm, fit_ridge, fit_s_learner, fit_two_head, linear::logistic_objective,
    mlp_forward_backward, predict_cate, sinkhorn_divergence, Activation, Balance, CateModel, EstimatorConfig,
    EstimatorKind, Mlp, NetSpec,
};
use proci::rng::rng_from;
use proptest::prelude::*;
use rand::Rng;

fn ridge_oracle(x: &DMatrix<f64>, y: &[f64], penalty: f64) -> Vec<f64> {
    // Least squares on the stacked system [1 X; 0 sqrt(penalty) I] [b; w] = [y; 0].
    let (n, d) = (x.nrows(), x.ncols());
    let a = DMatrix::from_fn(n + d, d + 1, |i, j| match (i < n, j) {
        (true, 0) => 1.0,
        (true, j) => x[(i, j - 1)],
        (false, 0) => 0.0,
        (false, j) => {
            if i - n == j - 1 {
                penalty.sqrt()
            } else {
                0.0
            }
        }
    });
    let mut rhs = DVector::zeros(n + d);
    rhs.rows_mut(0, n).copy_from_slice(y);
    a.svd(true, true).solve(&rhs, 1e-14).unwrap().iter().copied().collect()
}

#[test]
fn ridge_matches_stacked_least_squares() {
    let mut rng = rng_from(11);
    for penalty in [0.0, 0.3, 5.0] {
        let x = DMatrix::from_fn(20, 3, |_, _| normal(&mut rng));
        let y: Vec<f64> = (0..20).map(|_| normal(&mut rng)).collect();
        let m = fit_ridge(&x, &y, penalty, true).unwrap();
        let oracle = ridge_oracle(&x, &y, penalty);
        assert!((m.intercept - oracle[0]).abs() < 1e-10);
        for j in 0..3 {
            assert!((m.weights[j] - oracle[j + 1]).abs() < 1e-10, "{penalty} {j}");
        }
    }
}

#[test]
fn ridge_rejects_collinear_design_without_penalty() {
    let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0, 4.0, 8.0]);
    assert!(matches!(fit_ridge(&x, &[1.0, 2.0, 3.0, 4.0], 0.0, true), Err(Error::Singular(_))));
}

#[test]
fn logistic_optimum_is_stationary() {
    let mut rng = rng_from(12);
    let x = DMatrix::from_fn(100, 2, |_, _| normal(&mut rng));
    let t: Vec<u8> = (0..100)
        .map(|i| u8::from(rng.random::<f64>() < sigmoid(0.8 * x[(i, 0)] - 0.5 * x[(i, 1)])))
        .collect();
    let m = fit_logistic(&x, &t, PROPENSITY_L2).unwrap();
    let mut theta = vec![m.linear.intercept];
    theta.extend(&m.linear.weights);
    let (_, grad) = logistic_objective(&x, &t, PROPENSITY_L2, &theta);
    assert!(grad.iter().map(|g| g * g).sum::<f64>().sqrt() < 1e-6);
    assert!(m.propensity(&x).unwrap().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn s_learner_recovers_exact_linear_effect() {
    let mut rng = rng_from(13);
    let n = 50;
    let x = DMatrix::from_fn(n, 1, |_, _| normal(&mut rng));
    let t: Vec<u8> = (0..n).map(|i| u8::from(i % 3 == 0)).collect();
    let y: Vec<f64> = (0..n).map(|i| 3.0 * f64::from(t[i]) + x[(i, 0)]).collect();
    let ds = dataset(x.clone(), t, y);
    let cfg = EstimatorConfig {
        ridge_penalty: 0.0,
        ..Default::default()
    };
    let model = CateModel::SLearner(fit_s_learner(&ds, &cfg).unwrap());
    for tau in predict_cate(&model, &x).unwrap() {
        assert!((tau - 3.0).abs() < 1e-8);
    }
}

#[test]
fn s_learner_null_effect() {
    // At n = 1000 with balanced arms and unit noise the estimate has standard
    // error 2/sqrt(1000), about 0.063, so single draws are checked against
    // four standard errors and the average over seeds against 0.05.
    let se = 2.0 / 1000f64.sqrt();
    let fit = |seed: u64| {
        let mut rng = rng_from(seed);
        let n = 1000;
        let x = DMatrix::from_fn(n, 2, |_, _| normal(&mut rng));
        let t: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
        let y: Vec<f64> = (0..n).map(|i| x[(i, 0)] + normal(&mut rng)).collect();
        let ds = dataset(x, t, y);
        fit_s_learner(&ds, &EstimatorConfig::default()).unwrap().linear.weights[2]
    };
    let taus: Vec<f64> = (100..140).map(fit).collect();
    assert!(taus.iter().all(|t| t.abs() < 4.0 * se), "{taus:?}");
    let mean = taus.iter().sum::<f64>() / taus.len() as f64;
    assert!(mean.abs() < 0.05, "{mean}");
}

#[test]
fn s_learner_constant_covariate_gives_difference_of_means() {
    let mut rng = rng_from(14);
    let n = 60;
    let x = DMatrix::from_element(n, 1, 2.5);
    let t: Vec<u8> = (0..n).map(|i| u8::from(i % 4 == 1)).collect();
    let y: Vec<f64> = (0..n).map(|i| 1.5 * f64::from(t[i]) + normal(&mut rng)).collect();
    let arm_mean = |arm: u8| {
        let v: Vec<f64> = (0..n).filter(|&i| t[i] == arm).map(|i| y[i]).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let expected = arm_mean(1) - arm_mean(0);
    let ds = dataset(x.clone(), t, y);
    let cfg = EstimatorConfig {
        ridge_penalty: 1e-9,
        ..Default::default()
    };
    let tau = fit_s_learner(&ds, &cfg).unwrap().predict(&x).unwrap()[0];
    assert!((tau - expected).abs() < 1e-6, "{tau} vs {expected}");
}

#[test]
fn psm_exact_pairs_give_within_pair_att() {
    let mut rng = rng_from(15);
    let k = 8;
    let mut rows = Vec::new();
    let mut t = Vec::new();
    let mut y = Vec::new();
    let mut diffs = 0.0;
    for p in 0..k {
        let xv = [p as f64 * 0.7 - 2.0, (p as f64 * 1.3).sin()];
        let (y1, y0) = (normal(&mut rng) + 2.0, normal(&mut rng));
        diffs += y1 - y0;
        rows.extend(xv);
        t.push(1);
        y.push(y1);
        rows.extend(xv);
        t.push(0);
        y.push(y0);
    }
    let ds = dataset(DMatrix::from_row_slice(2 * k, 2, &rows), t, y);
    let m = fit_psm(&ds).unwrap();
    for (p, &j) in m.matches.iter().enumerate() {
        assert_eq!(j, 2 * p + 1);
    }
    assert!((m.att - diffs / k as f64).abs() < 1e-12);
    assert!(!m.overlap_violation);
}

#[test]
fn psm_flags_disjoint_propensities() {
    let x = DMatrix::from_row_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
    let ds = dataset(x, vec![0, 0, 0, 1, 1, 1], vec![0.0, 1.0, 2.0, 5.0, 6.0, 7.0]);
    let m = fit_psm(&ds).unwrap();
    assert!(m.overlap_violation);
    assert!(m.matches.iter().all(|&j| j == 2));
}

/// Exhaustive nearest-control search over all treated/control pairs, ties
/// broken by covariate distance.
fn brute_force_att(x: &DMatrix<f64>, logits: &[f64], t: &[u8], y: &[f64]) -> f64 {
    let dist = |i: usize, j: usize| (x.row(i) - x.row(j)).norm_squared();
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..t.len() {
        if t[i] != 1 {
            continue;
        }
        let mut best: Option<usize> = None;
        for j in 0..t.len() {
            let gap = |k: usize| ((logits[k] - logits[i]).abs(), dist(i, k));
            if t[j] == 0 && best.is_none_or(|b| gap(j) < gap(b)) {
                best = Some(j);
            }
        }
        total += y[i] - y[best.unwrap()];
        count += 1.0;
    }
    total / count
}

#[test]
fn psm_att_matches_exhaustive_matching() {
    let mut rng = rng_from(16);
    for _ in 0..50 {
        let n = rng.random_range(6..=200);
        let x = DMatrix::from_fn(n, 2, |_, _| normal(&mut rng));
        let mut t: Vec<u8> = (0..n).map(|i| u8::from(rng.random::<f64>() < sigmoid(x[(i, 0)]))).collect();
        t[0] = 0;
        t[1] = 1;
        let y: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let ds = dataset(x.clone(), t.clone(), y.clone());
        let m = fit_psm(&ds).unwrap();
        let logits = m.propensity.logit(&x).unwrap();
        assert!((m.att - brute_force_att(&x, &logits, &t, &y)).abs() < 1e-12);
    }
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let mut rng = rng_from(17);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let depth = rng.random_range(2..=4);
        let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=6)).collect();
        let act = if rng.random::<bool>() { Activation::Relu } else { Activation::Elu };
        let mlp = Mlp::new(dims.clone(), act, rng.random::<bool>()).unwrap();
        let params: Vec<f64> = (0..mlp.n_params()).map(|_| normal(&mut rng)).collect();
        let m = rng.random_range(1..=8);
        let x = DMatrix::from_fn(m, dims[0], |_, _| normal(&mut rng));
        let y = DMatrix::from_fn(m, dims[depth], |_, _| normal(&mut rng));
        let (_, _, grads) = mlp_forward_backward(&mlp, &params, &x, &y).unwrap();
        let err = gradient_error(|p| mlp_forward_backward(&mlp, p, &x, &y).unwrap().1, &params, &grads, 1e-5);
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn mlp_rejects_shape_mismatch() {
    let mlp = Mlp::new(vec![3, 4, 1], Activation::Relu, false).unwrap();
    let p = vec![0.0; mlp.n_params()];
    let x = DMatrix::zeros(2, 2);
    assert!(matches!(
        mlp_forward_backward(&mlp, &p, &x, &DMatrix::zeros(2, 1)),
        Err(Error::DimensionMismatch(_))
    ));
}

#[test]
fn two_head_gradients_match_finite_differences() {
    let (mut plain, mut balanced): (f64, f64) = (0.0, 0.0);
    let balance = Balance {
        weight: 1.0,
        epsilon: 0.1,
        iters: 100,
    };
    for seed in 0..100 {
        let case = random_net_case(seed);
        plain = plain.max(net_gradient_error(&case, None));
        balanced = balanced.max(net_gradient_error(&case, Some(balance)));
    }
    assert!(plain < 1e-4, "{plain}");
    assert!(balanced < 1e-3, "{balanced}");
}

/// `y^t = x'beta + t c` with assignment driven by the first covariate.
fn linear_effect_data(n: usize, seed: u64) -> (proci::data::ObservationalDataset, Vec<f64>) {
    let mut rng = rng_from(seed);
    let beta = [1.5, -1.0, 0.5];
    let c = 2.0;
    let x = DMatrix::from_fn(n, 3, |_, _| normal(&mut rng));
    let t: Vec<u8> = (0..n).map(|i| u8::from(rng.random::<f64>() < sigmoid(1.5 * x[(i, 0)]))).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| (0..3).map(|j| beta[j] * x[(i, j)]).sum::<f64>() + c * f64::from(t[i]) + 0.1 * normal(&mut rng))
        .collect();
    (dataset(x, t, y), vec![c; n])
}

fn split3(ds: &proci::data::ObservationalDataset) -> [proci::data::ObservationalDataset; 3] {
    let n = ds.n();
    let a = n * 6 / 10;
    let b = n * 8 / 10;
    [
        ds.select_rows(&(0..a).collect::<Vec<_>>()),
        ds.select_rows(&(a..b).collect::<Vec<_>>()),
        ds.select_rows(&(b..n).collect::<Vec<_>>()),
    ]
}

fn pehe(tau: &[f64], est: &[f64]) -> f64 {
    tau.iter().zip(est).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / tau.len() as f64
}

fn fast_cfg() -> EstimatorConfig {
    EstimatorConfig {
        learning_rate: 1e-2,
        batch_size: 64,
        max_epochs: 60,
        patience: 10,
        ..Default::default()
    }
}

#[test]
fn tarnet_beats_mean_difference() {
    let (ds, tau) = linear_effect_data(1000, 18);
    let [train, val, test] = split3(&ds);
    let model = fit_estimator(EstimatorKind::Tarnet, &train, &val, &fast_cfg(), &NetSpec::standard(16, 16, 1)).unwrap();
    let est = predict_cate(&model, test.covariates()).unwrap();
    let arm_mean = |arm: u8| {
        let v: Vec<f64> = (0..train.n())
            .filter(|&i| train.treatments()[i] == arm)
            .map(|i| train.outcomes()[i])
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let naive = vec![arm_mean(1) - arm_mean(0); test.n()];
    let tau_test = &tau[..test.n()];
    assert!(pehe(tau_test, &est) < pehe(tau_test, &naive), "{} vs {}", pehe(tau_test, &est), pehe(tau_test, &naive));
}

#[test]
fn early_stopping_returns_best_epoch_parameters() {
    // Pure-noise outcomes: the validation loss can only plateau.
    let mut rng = rng_from(19);
    let n = 200;
    let x = DMatrix::from_fn(n, 3, |_, _| normal(&mut rng));
    let t: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
    let y: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let [train, val, _] = split3(&dataset(x, t, y));
    let cfg = EstimatorConfig {
        learning_rate: 5e-2,
        max_epochs: 200,
        patience: 30,
        ..Default::default()
    };
    let spec = NetSpec::standard(16, 16, 2);
    let m = fit_two_head(&train, &val, &cfg, &spec, None).unwrap();
    let h = &m.history;
    let last = h.epochs.last().unwrap().epoch;
    assert!(last < cfg.max_epochs, "validation loss never plateaued");
    assert!(last - h.best_epoch <= 30);
    let best = h.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(best, h.best_val_loss);

    let rerun = fit_two_head(
        &train,
        &val,
        &EstimatorConfig {
            max_epochs: h.best_epoch,
            ..cfg
        },
        &spec,
        None,
    )
    .unwrap();
    assert_eq!(rerun.params, m.params);
}

#[test]
fn tarnet_with_zeroed_heads_predicts_zero() {
    let (ds, _) = linear_effect_data(200, 20);
    let [train, val, test] = split3(&ds);
    let cfg = EstimatorConfig {
        max_epochs: 3,
        ..fast_cfg()
    };
    let mut m = fit_two_head(&train, &val, &cfg, &NetSpec::standard(16, 16, 3), None).unwrap();
    let ne = m.net.encoder.n_params();
    m.params[ne..].iter_mut().for_each(|p| *p = 0.0);
    assert!(m.predict(test.covariates()).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn cfr_without_penalty_reproduces_tarnet() {
    let (ds, _) = linear_effect_data(300, 21);
    let [train, val, _] = split3(&ds);
    let cfg = EstimatorConfig {
        balance_weight: 0.0,
        max_epochs: 15,
        ..fast_cfg()
    };
    let spec = NetSpec::standard(16, 16, 4);
    let tar = fit_estimator(EstimatorKind::Tarnet, &train, &val, &cfg, &spec).unwrap();
    let cfr = fit_estimator(EstimatorKind::CfrWass, &train, &val, &cfg, &spec).unwrap();
    match (tar, cfr) {
        (CateModel::Tarnet(a), CateModel::CfrWass(b)) => {
            assert_eq!(a.params, b.params);
            assert_eq!(a.history, b.history);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn heavy_penalty_balances_the_representation() {
    let (ds, _) = linear_effect_data(400, 22);
    let [train, val, _] = split3(&ds);
    let cfg = EstimatorConfig {
        balance_weight: 1e3,
        learning_rate: 1e-2,
        max_epochs: 100,
        patience: 100,
        ..Default::default()
    };
    let spec = NetSpec::standard(16, 16, 5);
    let m = fit_two_head(&train, &val, &cfg, &spec, Some(cfg.balance())).unwrap();
    let arm = |a: u8| {
        let rows: Vec<usize> = (0..train.n()).filter(|&i| train.treatments()[i] == a).collect();
        train.covariates().select_rows(&rows)
    };
    let div = |p: &[f64]| {
        let r1 = m.net.represent(p, &arm(1)).unwrap();
        let r0 = m.net.represent(p, &arm(0)).unwrap();
        sinkhorn_divergence(&r1, &r0, 0.1, 100).unwrap()
    };
    let (before, after) = (div(&m.net.init(spec.seed)), div(&m.params));
    eprintln!("best epoch {} divergence {before} -> {after}", m.history.best_epoch);
    assert!(after * 10.0 <= before, "{before} -> {after}");
}

#[test]
fn models_round_trip_through_json_exactly() {
    let (ds, _) = linear_effect_data(200, 23);
    let [train, val, test] = split3(&ds);
    let dir = tempfile::tempdir().unwrap();
    let cfg = EstimatorConfig {
        max_epochs: 5,
        ..fast_cfg()
    };
    for kind in [EstimatorKind::SLearner, EstimatorKind::Psm, EstimatorKind::Tarnet, EstimatorKind::CfrWass] {
        let m = fit_estimator(kind, &train, &val, &cfg, &NetSpec::standard(16, 16, 6)).unwrap();
        let path = dir.path().join(format!("{}.json", kind.label()));
        m.save(&path).unwrap();
        let back = CateModel::load(&path).unwrap();
        assert_eq!(back, m);
        let (a, b) = (predict_cate(&m, test.covariates()).unwrap(), predict_cate(&back, test.covariates()).unwrap());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(matches!(predict_cate(&m, &DMatrix::zeros(2, 5)), Err(Error::DimensionMismatch(_))));
    }
}

#[test]
fn duplicated_rows_give_duplicated_predictions() {
    let (ds, _) = linear_effect_data(200, 24);
    let [train, val, test] = split3(&ds);
    let cfg = EstimatorConfig {
        max_epochs: 5,
        ..fast_cfg()
    };
    let rows = [0, 3, 3, 7, 0];
    let x = test.covariates().select_rows(&rows);
    for kind in [EstimatorKind::SLearner, EstimatorKind::Psm, EstimatorKind::Tarnet, EstimatorKind::CfrWass] {
        let m = fit_estimator(kind, &train, &val, &cfg, &NetSpec::standard(16, 16, 7)).unwrap();
        let p = predict_cate(&m, &x).unwrap();
        assert_eq!(p[0].to_bits(), p[4].to_bits());
        assert_eq!(p[1].to_bits(), p[2].to_bits());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sinkhorn_is_symmetric_and_nonnegative(
        a in proptest::collection::vec(-3.0f64..3.0, 2..12),
        b in proptest::collection::vec(-3.0f64..3.0, 2..12),
    ) {
        let ma = DMatrix::from_column_slice(a.len() / 2, 2, &a[..a.len() / 2 * 2]);
        let mb = DMatrix::from_column_slice(b.len() / 2, 2, &b[..b.len() / 2 * 2]);
        let ab = sinkhorn_divergence(&ma, &mb, 0.1, 400).unwrap();
        let ba = sinkhorn_divergence(&mb, &ma, 0.1, 400).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab), "{} vs {}", ab, ba);
    }

    #[test]
    fn ridge_residual_is_orthogonal_to_the_design(
        seed in 0u64..1000,
        penalty in 0.0f64..2.0,
    ) {
        let mut rng = rng_from(seed);
        let x = DMatrix::from_fn(15, 3, |_, _| normal(&mut rng));
        let y: Vec<f64> = (0..15).map(|_| normal(&mut rng)).collect();
        let m = fit_ridge(&x, &y, penalty, true).unwrap();
        let r: Vec<f64> = (0..15).map(|i| y[i] - m.predict_row(&[x[(i, 0)], x[(i, 1)], x[(i, 2)]])).collect();
        prop_assert!(r.iter().sum::<f64>().abs() < 1e-9);
        for j in 0..3 {
            let g: f64 = (0..15).map(|i| x[(i, j)] * r[i]).sum();
            prop_assert!((g - penalty * m.weights[j]).abs() < 1e-9);
        }
    }
}
