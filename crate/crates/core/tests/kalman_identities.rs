mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rbsmc::kalman::*;
use rbsmc::linalg::{is_symmetric, psd_factor};
use rbsmc::oracle::rts_given_regimes;
use rbsmc::simulate::simulate;
use testkit::{log_integral_1d, mean_and_se};

/// `log p(y_{i:n} | a_{i:n}, z_i)` by chaining one-step predictive densities from a point mass.
fn predictive_product(model: &rbsmc::RegimeModel, a: &[usize], ys: &[DVector<f64>], z: &DVector<f64>) -> f64 {
    let (mut stat, mut ll) = kalman_update(model, &KalmanStat::dirac(z.clone()), a[0], &ys[0]).unwrap();
    for k in 1..a.len() {
        let (s, l) = kalman_predict_update(model, &stat, a[k], &ys[k]).unwrap();
        ll += l;
        stat = s;
    }
    ll
}

#[test]
fn backward_information_matches_predictive_product() {
    let mut checked = 0;
    for seed in 0..50u64 {
        let m = if seed % 2 == 0 { 1 } else { 2 };
        let p = [1, 2, 4][(seed % 3) as usize];
        let model = random_model(seed + 100, 2, m, p);
        let path = simulate(&model, 6, seed).unwrap();
        let mut r = rng(seed);
        let a: Vec<usize> = (0..6).map(|_| r.gen_range(0..2)).collect();
        let stats = backward_info_sequence(&model, &a, &path.observations).unwrap();
        for i in 0..6 {
            let z = DVector::from_fn(m, |_, _| r.gen_range(-1.5..1.5));
            let direct = predictive_product(&model, &a[i..], &path.observations[i..], &z);
            let info = stats[i].log_eval(&z);
            assert!((direct - info).abs() <= 1e-8 * direct.abs().max(1.0), "seed {seed} i {i}: {direct} vs {info}");
            assert!(is_symmetric(&stats[i].p_inv, 1e-10));
            checked += 1;
        }
    }
    assert_eq!(checked, 300);
}

#[test]
fn terminal_statistic_worked_example() {
    let model = single_regime(0.0, 1.0, 1.0, 0.0, 1.0, 1.0);
    let s = backward_info_terminal(&model, 0, &v1(1.0));
    assert!((s.c_tilde - 2.837_877_066_409_345).abs() < 1e-12);
    assert!((s.p_inv[(0, 0)] - 1.0).abs() < 1e-15 && (s.nu[0] - 1.0).abs() < 1e-15);

    let flat = single_regime(0.0, 1.0, 1.0, 0.7, 0.0, 2.0);
    let s = backward_info_terminal(&flat, 0, &v1(0.7));
    assert_eq!(s.p_inv[(0, 0)], 0.0);
    assert_eq!(s.nu[0], 0.0);
    assert!((s.c_tilde - ((2.0 * std::f64::consts::PI).ln() + 2f64.ln())).abs() < 1e-12);
}

#[test]
fn two_step_chain_against_predictive_product() {
    let model = random_scalar(7);
    let ys = vec![v1(0.4), v1(-0.3)];
    for a in [[0, 0], [0, 1], [1, 0], [1, 1]] {
        let stats = backward_info_sequence(&model, &a, &ys).unwrap();
        for z in [-1.0, 0.0, 0.8] {
            let direct = predictive_product(&model, &a, &ys, &v1(z));
            assert!((stats[0].log_eval(&v1(z)) - direct).abs() < 1e-10);
        }
    }
}

fn random_stat(r: &mut rand_chacha::ChaCha8Rng, m: usize) -> BackwardInfoStat {
    let l = DMatrix::from_fn(m, m, |i, j| if i >= j { r.gen_range(-0.8..0.8) } else { 0.0 });
    BackwardInfoStat {
        c_tilde: r.gen_range(-3.0..3.0),
        p_inv: &l * l.transpose(),
        nu: DVector::from_fn(m, |_, _| r.gen_range(-1.0..1.0)),
    }
}

#[test]
fn gaussian_backward_integral_against_quadrature() {
    let mut r = rng(11);
    for case in 0..50 {
        let stat = random_stat(&mut r, 1);
        let mu = r.gen_range(-2.0..2.0);
        let var: f64 = r.gen_range(0.05..3.0);
        let exact = gaussian_backward_integral(&v1(mu), &DMatrix::from_element(1, 1, var), &stat).unwrap();
        let num = log_integral_1d(
            |z| -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (z - mu).powi(2) / var) + stat.log_eval(&v1(z)),
            mu,
            30.0 * var.sqrt(),
        );
        assert!((exact - num).abs() <= 1e-8 * exact.abs().max(1.0), "case {case}: {exact} vs {num}");
    }
}

#[test]
fn gaussian_backward_integral_against_monte_carlo() {
    let mut r = rng(12);
    for case in 0..20 {
        let stat = random_stat(&mut r, 2);
        let mean = DVector::from_fn(2, |_, _| r.gen_range(-1.0..1.0));
        let l = DMatrix::from_fn(2, 2, |i, j| if i == j { r.gen_range(0.3..1.0) } else if i > j { r.gen_range(-0.4..0.4) } else { 0.0 });
        let cov = &l * l.transpose();
        let exact = gaussian_backward_integral(&mean, &cov, &stat).unwrap().exp();
        let f = psd_factor(&cov);
        let draws: Vec<f64> = (0..1_000_000)
            .map(|_| {
                let e = DVector::from_fn(2, |_, _| r.sample::<f64, _>(StandardNormal));
                stat.log_eval(&(&mean + &f * e)).exp()
            })
            .collect();
        let (m, se) = mean_and_se(&draws);
        assert!((m - exact).abs() <= 3.0 * se, "case {case}: MC {m} ± {se} vs {exact}");
    }
}

#[test]
fn flat_statistic_integrates_to_its_constant() {
    let stat = BackwardInfoStat { c_tilde: 3.2, p_inv: DMatrix::zeros(2, 2), nu: DVector::zeros(2) };
    let v = gaussian_backward_integral(&DVector::from_vec(vec![0.3, 1.0]), &DMatrix::identity(2, 2), &stat).unwrap();
    assert!((v + 1.6).abs() < 1e-12);
}

#[test]
fn predictive_likelihoods_sum_to_sequence_likelihood() {
    for seed in 0..10 {
        let model = random_model(seed, 2, 2, 2);
        let path = simulate(&model, 8, seed).unwrap();
        let a = &path.regimes;
        let ys = &path.observations;
        let (mut s, mut ll) = kalman_init_with_loglik(&model, a[0], &ys[0]).unwrap();
        for i in 1..8 {
            let (n, l) = kalman_predict_update(&model, &s, a[i], &ys[i]).unwrap();
            ll += l;
            s = n;
        }
        // independent route: the initial prior integrated against the backward statistic
        let b = backward_info_sequence(&model, a, ys).unwrap();
        let other = gaussian_backward_integral(model.mu1(), model.sigma1(), &b[0]).unwrap();
        assert!((ll - other).abs() < 1e-8 * ll.abs().max(1.0), "{ll} vs {other}");
        assert!((rts_given_regimes(&model, a, ys).unwrap().log_lik - ll).abs() < 1e-10);
    }
}

#[test]
fn ffbs_statistics_are_the_backward_information_without_constants() {
    for seed in 0..10 {
        let model = random_model(seed, 2, 2, 1);
        let path = simulate(&model, 5, seed).unwrap();
        let a = &path.regimes;
        let info = backward_info_sequence(&model, a, &path.observations).unwrap();
        let ffbs = ffbs_backward_stats(&model, a, &path.observations).unwrap();
        for i in 0..5 {
            assert!(max_rel_diff(&ffbs[i].omega_hat, &info[i].p_inv) < 1e-9);
            assert!(max_rel_diff_v(&ffbs[i].lambda_hat, &info[i].nu) < 1e-9);
        }
    }
}

#[test]
fn kalman_worked_examples() {
    let m = single_regime(0.0, 1.0, 1.0, 0.0, 1.0, 1.0);
    let s = kalman_init(&m, 0, &v1(2.0)).unwrap();
    assert!((s.mean[0] - 1.0).abs() < 1e-15 && (s.cov[(0, 0)] - 0.5).abs() < 1e-15);

    // benchmark model regime 1 at y = 0.6: prior N(0, 1), Ḡ = 0.3, c = 0.1
    let b = benchmark_model();
    let s = kalman_init(&b, 0, &v1(0.6)).unwrap();
    assert!((s.mean[0] - 0.5 / 1.3).abs() < 1e-14);
    assert!((s.cov[(0, 0)] - 0.3 / 1.3).abs() < 1e-14);
    let or = rbsmc::oracle::enumerate_posterior(&b, &[v1(0.6)]).unwrap();
    let w1 = or.smoothing[0][0];
    let s2 = kalman_init(&b, 1, &v1(0.6)).unwrap();
    let mix = w1 * s.mean[0] + (1.0 - w1) * s2.mean[0];
    assert!((or.state_mean[0][0] - mix).abs() < 1e-12);

    // no observation information
    let blind = single_regime(0.0, 1.0, 1.0, 0.0, 0.0, 1.0);
    let s = kalman_init(&blind, 0, &v1(4.0)).unwrap();
    assert_eq!(s.mean[0], 0.0);
    assert_eq!(s.cov[(0, 0)], 1.0);

    // no dynamics and no observation: the predicted statistic is unchanged
    let still = single_regime(0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
    let st = KalmanStat::new(v1(0.4), DMatrix::from_element(1, 1, 2.0));
    let (out, _) = kalman_predict_update(&still, &st, 0, &v1(9.0)).unwrap();
    assert_eq!(out, st);
}
