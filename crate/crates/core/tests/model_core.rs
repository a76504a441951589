mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rbsmc::quadform::{quadform_integral, quadform_product, GaussianQuadForm};
use rbsmc::Error;
use testkit::{log_integral_1d, log_integral_2d};

fn pd2(a: f64, b: f64, c: f64) -> DMatrix<f64> {
    let l = DMatrix::from_row_slice(2, 2, &[a, 0.0, b, c]);
    &l * l.transpose()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn transition_density_integrates_to_one(
        d in -2.0f64..2.0, t in -1.5f64..1.5, hbar in 0.01f64..4.0, z_prev in -3.0f64..3.0,
    ) {
        let m = single_regime(d, t, hbar, 0.0, 1.0, 1.0);
        let zp = v1(z_prev);
        let li = log_integral_1d(|z| m.transition_logdensity(0, &zp, &v1(z)).unwrap(), d + t * z_prev, 50.0);
        prop_assert!(li.abs() < 1e-6, "log integral {li}");
    }

    #[test]
    fn observation_density_integrates_over_y(
        c in -2.0f64..2.0, b in -2.0f64..2.0, gbar in 0.01f64..4.0, z in -3.0f64..3.0,
    ) {
        let m = single_regime(0.0, 1.0, 1.0, c, b, gbar);
        let zz = v1(z);
        let li = log_integral_1d(|y| m.observation_logdensity(0, &zz, &v1(y)).unwrap(), c + b * z, 50.0);
        prop_assert!(li.abs() < 1e-6);
    }

    #[test]
    fn quadform_integral_matches_quadrature_1d(a in 0.05f64..20.0, b in -5.0f64..5.0, c in -10.0f64..10.0) {
        let q = GaussianQuadForm::new(DMatrix::from_element(1, 1, a), v1(b), c);
        let exact = quadform_integral(&q).unwrap();
        let num = log_integral_1d(|z| q.log_eval(&v1(z)), b / a, 40.0 / a.sqrt() + (b / a).abs());
        prop_assert!(((exact - num) / exact.abs().max(1.0)).abs() < 1e-8, "{exact} vs {num}");
    }

    #[test]
    fn quadform_integral_matches_quadrature_2d(
        l11 in 0.5f64..2.0, l21 in -1.0f64..1.0, l22 in 0.5f64..2.0,
        b1 in -2.0f64..2.0, b2 in -2.0f64..2.0, c in -5.0f64..5.0,
    ) {
        let a = pd2(l11, l21, l22);
        let b = DVector::from_vec(vec![b1, b2]);
        let q = GaussianQuadForm::new(a.clone(), b.clone(), c);
        let exact = quadform_integral(&q).unwrap();
        let mean = a.clone().cholesky().unwrap().solve(&b);
        let cov = a.try_inverse().unwrap();
        let hw = (10.0 * cov[(0, 0)].sqrt(), 10.0 * cov[(1, 1)].sqrt());
        let peak = q.log_eval(&mean);
        let num = log_integral_2d(|x, y| q.log_eval(&DVector::from_vec(vec![x, y])), (mean[0], mean[1]), hw, peak);
        prop_assert!(((exact - num) / exact.abs().max(1.0)).abs() < 1e-8, "{exact} vs {num}");
    }

    #[test]
    fn product_integral_matches_pointwise_product(
        a1 in 0.1f64..5.0, b1 in -2.0f64..2.0, a2 in 0.0f64..5.0, b2 in -2.0f64..2.0, c1 in -3.0f64..3.0,
    ) {
        let q1 = GaussianQuadForm::new(DMatrix::from_element(1, 1, a1), v1(b1), c1);
        let q2 = GaussianQuadForm::new(DMatrix::from_element(1, 1, a2), v1(b2), 0.5);
        let exact = quadform_integral(&quadform_product(&q1, &q2)).unwrap();
        let centre = (b1 + b2) / (a1 + a2);
        let num = log_integral_1d(|z| q1.log_eval(&v1(z)) + q2.log_eval(&v1(z)), centre, 40.0 / (a1 + a2).sqrt() + centre.abs());
        prop_assert!(((exact - num) / exact.abs().max(1.0)).abs() < 1e-8);
    }

    #[test]
    fn integral_shifts_with_constant(a in 0.1f64..5.0, b in -2.0f64..2.0, kappa in -10.0f64..10.0) {
        let q = GaussianQuadForm::new(DMatrix::from_element(1, 1, a), v1(b), 0.0);
        let shifted = GaussianQuadForm::new(DMatrix::from_element(1, 1, a), v1(b), kappa);
        let d = quadform_integral(&shifted).unwrap() - quadform_integral(&q).unwrap();
        prop_assert!((d + kappa / 2.0).abs() < 1e-12);
    }
}

#[test]
fn quadform_worked_values() {
    let std = GaussianQuadForm::new(DMatrix::from_element(1, 1, 1.0), v1(0.0), 0.0);
    assert!((quadform_integral(&std).unwrap() - 0.918_938_533_204_672_7).abs() < 1e-12);
    let shifted = GaussianQuadForm::new(DMatrix::from_element(1, 1, 1.0), v1(2.0), 0.0);
    assert!((quadform_integral(&shifted).unwrap() - (0.918_938_533_204_672_7 + 2.0)).abs() < 1e-12);
    assert_eq!(quadform_product(&std, &GaussianQuadForm::unit(1)), std);

    // two standard normal densities multiplied: ∫φ² = 1/(2√π)
    let phi = GaussianQuadForm::from_gaussian(&v1(0.0), &DMatrix::from_element(1, 1, 1.0)).unwrap();
    let v = quadform_integral(&quadform_product(&phi, &phi)).unwrap();
    assert!((v - (-1.265_512_123_484_645_4)).abs() < 1e-12);
}

#[test]
fn singular_precision_is_not_normalizable() {
    let flat = GaussianQuadForm::new(DMatrix::zeros(2, 2), DVector::zeros(2), 0.0);
    assert!(matches!(quadform_integral(&flat), Err(Error::NonNormalizable(_))));
}

#[test]
fn transition_density_normalizes_in_two_dimensions() {
    for seed in 0..5 {
        let m = random_model(seed, 2, 2, 1);
        let zp = DVector::from_vec(vec![0.3, -0.7]);
        for j in 0..2 {
            let r = m.regime(j);
            let mean = &r.d + &r.t * &zp;
            let hb = m.hbar(j);
            let hw = (12.0 * hb[(0, 0)].sqrt(), 12.0 * hb[(1, 1)].sqrt());
            let peak = m.transition_logdensity(j, &zp, &mean).unwrap();
            let li = log_integral_2d(
                |x, y| m.transition_logdensity(j, &zp, &DVector::from_vec(vec![x, y])).unwrap(),
                (mean[0], mean[1]),
                hw,
                peak,
            );
            assert!(li.abs() < 1e-6, "seed {seed} regime {j}: {li}");
        }
    }
}

#[test]
fn model_json_round_trip_on_random_models() {
    for seed in 0..5 {
        let m = random_model(seed, 3, 2, 4);
        let back = rbsmc::RegimeModel::from_json_str(&m.to_json_string().unwrap()).unwrap();
        for j in 0..3 {
            assert!(max_rel_diff(back.hbar(j), m.hbar(j)) < 1e-14);
            assert_eq!(back.regime(j).t, m.regime(j).t);
        }
    }
}
