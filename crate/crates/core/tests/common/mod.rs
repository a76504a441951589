#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rbsmc::model::scalar_model;
use rbsmc::{RegimeModel, RegimeParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn v1(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

fn lower(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            r.gen_range(lo..hi)
        } else if i > j {
            r.gen_range(-0.3..0.3)
        } else {
            0.0
        }
    })
}

fn dense(r: &mut ChaCha8Rng, rows: usize, cols: usize, s: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.gen_range(-s..s))
}

fn stochastic(r: &mut ChaCha8Rng, jn: usize) -> DMatrix<f64> {
    let mut q = DMatrix::from_fn(jn, jn, |i, j| if i == j { 4.0 } else { 0.0 } + r.gen_range(0.1..1.0));
    for i in 0..jn {
        let s: f64 = q.row(i).sum();
        q.row_mut(i).scale_mut(1.0 / s);
    }
    q
}

/// A random stable model with `jn` regimes, state dim `m` and observation dim `p`.
pub fn random_model(seed: u64, jn: usize, m: usize, p: usize) -> RegimeModel {
    let mut r = rng(seed);
    let regimes = (0..jn)
        .map(|_| {
            let mut t = dense(&mut r, m, m, 0.4);
            for k in 0..m {
                t[(k, k)] = r.gen_range(0.5..0.95);
            }
            RegimeParams {
                d: DVector::from_fn(m, |_, _| r.gen_range(-0.5..0.5)),
                t,
                h: lower(&mut r, m, 0.2, 0.8),
                c: DVector::from_fn(p, |_, _| r.gen_range(-0.5..0.5)),
                b: dense(&mut r, p, m, 1.0) + DMatrix::from_fn(p, m, |i, j| if i % m == j { 1.0 } else { 0.0 }),
                g: lower(&mut r, p, 0.3, 0.9),
            }
        })
        .collect();
    let s = lower(&mut r, m, 0.5, 1.2);
    let pi: Vec<f64> = (0..jn).map(|_| r.gen_range(0.2..1.0)).collect();
    let tot: f64 = pi.iter().sum();
    RegimeModel::new(
        pi.iter().map(|v| v / tot).collect(),
        stochastic(&mut r, jn),
        regimes,
        DVector::from_fn(m, |_, _| r.gen_range(-1.0..1.0)),
        &s * s.transpose(),
    )
    .unwrap()
}

/// Random scalar two-regime model.
pub fn random_scalar(seed: u64) -> RegimeModel {
    random_model(seed, 2, 1, 1)
}

/// The two-regime scalar random-walk model of the simulated benchmark.
pub fn benchmark_model() -> RegimeModel {
    RegimeModel::scalar_switching_benchmark()
}

/// Single-regime scalar model.
pub fn single_regime(d: f64, t: f64, hbar: f64, c: f64, b: f64, gbar: f64) -> RegimeModel {
    scalar_model(vec![1.0], DMatrix::from_element(1, 1, 1.0), &[(d, t, hbar, c, b, gbar)], 0.0, 1.0).unwrap()
}

pub fn max_rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.abs().max().max(1e-12);
    (a - b).abs().max() / scale
}

pub fn max_rel_diff_v(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = b.abs().max().max(1e-12);
    (a - b).abs().max() / scale
}
