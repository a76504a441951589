//! A (μ/μ_w, λ) covariance matrix adaptation evolution strategy, maximizing.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmaesConfig {
    /// Initial step size.
    pub sigma0: f64,
    /// Number of selected parents.
    pub mu: usize,
    /// Population size.
    pub lambda: usize,
    pub max_generations: usize,
    /// Stop once `σ · sqrt(max eigenvalue of C)` falls below this.
    pub tol_x: f64,
}

impl Default for CmaesConfig {
    fn default() -> Self {
        Self { sigma0: 0.005, mu: 20, lambda: 100, max_generations: 200, tol_x: 1e-9 }
    }
}

#[derive(Debug, Clone)]
pub struct CmaesResult {
    pub best: DVector<f64>,
    pub best_value: f64,
    pub evaluations: usize,
    pub generations: usize,
    /// True when the generation budget ran out before the step size collapsed.
    pub budget_exhausted: bool,
}

/// Maximizes `f` starting from `x0`. `f` may return `-inf` to reject a point.
/// `x0` itself is evaluated and counts as a candidate for the best point.
pub fn maximize<F>(f: F, x0: &DVector<f64>, cfg: &CmaesConfig, seed: u64) -> Result<CmaesResult>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    let n = x0.len();
    if n == 0 || cfg.lambda < 2 || cfg.mu == 0 || cfg.mu > cfg.lambda || !(cfg.sigma0 > 0.0) {
        return Err(Error::Validation("CMA-ES needs dim ≥ 1, 1 ≤ mu ≤ lambda, lambda ≥ 2, sigma0 > 0".into()));
    }
    let nf = n as f64;
    let mut w: Vec<f64> = (0..cfg.mu).map(|i| (cfg.mu as f64 + 0.5).ln() - ((i + 1) as f64).ln()).collect();
    let ws: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= ws);
    let mu_eff = 1.0 / w.iter().map(|v| v * v).sum::<f64>();

    let cs = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
    let ds = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + cs;
    let cc = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
    let c1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
    let cmu = (1.0 - c1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
    let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));

    let mut r = rng::stream(seed, 11);
    let mut mean = x0.clone();
    let mut sigma = cfg.sigma0;
    let mut c = DMatrix::<f64>::identity(n, n);
    let mut ps = DVector::<f64>::zeros(n);
    let mut pc = DVector::<f64>::zeros(n);

    let mut best = x0.clone();
    let mut best_value = f(x0);
    let mut evaluations = 1;
    let mut generations = 0;
    let mut converged = false;

    while generations < cfg.max_generations {
        let eig = SymmetricEigen::new(c.clone());
        let d: DVector<f64> = eig.eigenvalues.map(|v| v.max(1e-300).sqrt());
        let bmat = eig.eigenvectors;
        let max_d = d.max();
        if sigma * max_d < cfg.tol_x {
            converged = true;
            break;
        }
        let ys: Vec<DVector<f64>> = (0..cfg.lambda)
            .map(|_| {
                let z = DVector::<f64>::from_fn(n, |_, _| r.sample(StandardNormal));
                &bmat * d.component_mul(&z)
            })
            .collect();
        let xs: Vec<DVector<f64>> = ys.iter().map(|y| &mean + sigma * y).collect();
        let values: Vec<f64> = xs.par_iter().map(|x| f(x)).collect();
        evaluations += cfg.lambda;
        generations += 1;

        let mut order: Vec<usize> = (0..cfg.lambda).collect();
        order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        // nan or -inf everywhere: shrink and retry
        if !values[order[0]].is_finite() {
            sigma *= 0.5;
            continue;
        }
        if values[order[0]] > best_value || !best_value.is_finite() {
            best_value = values[order[0]];
            best = xs[order[0]].clone();
        }

        let mut y_w = DVector::<f64>::zeros(n);
        for (k, &i) in order.iter().take(cfg.mu).enumerate() {
            y_w += w[k] * &ys[i];
        }
        mean += sigma * &y_w;

        let inv_sqrt = &bmat * DMatrix::from_diagonal(&d.map(|v| 1.0 / v)) * bmat.transpose();
        ps = (1.0 - cs) * &ps + (cs * (2.0 - cs) * mu_eff).sqrt() * (&inv_sqrt * &y_w);
        let ps_norm = ps.norm();
        let h_sig = ps_norm / (1.0 - (1.0 - cs).powi(2 * generations as i32)).sqrt() < (1.4 + 2.0 / (nf + 1.0)) * chi_n;
        let h = if h_sig { 1.0 } else { 0.0 };
        pc = (1.0 - cc) * &pc + h * (cc * (2.0 - cc) * mu_eff).sqrt() * &y_w;

        let mut rank_mu = DMatrix::<f64>::zeros(n, n);
        for (k, &i) in order.iter().take(cfg.mu).enumerate() {
            rank_mu += w[k] * &ys[i] * ys[i].transpose();
        }
        c = (1.0 - c1 - cmu + (1.0 - h) * c1 * cc * (2.0 - cc)) * &c + c1 * &pc * pc.transpose() + cmu * rank_mu;
        c = (&c + c.transpose()) * 0.5;
        sigma *= ((cs / ds) * (ps_norm / chi_n - 1.0)).exp();
    }
    Ok(CmaesResult { best, best_value, evaluations, generations, budget_exhausted: !converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_2d() {
        let f = |x: &DVector<f64>| -(100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2));
        let cfg = CmaesConfig { sigma0: 0.5, mu: 5, lambda: 10, max_generations: 2000, tol_x: 1e-12 };
        let res = maximize(f, &DVector::from_vec(vec![-1.0, 1.0]), &cfg, 3).unwrap();
        assert!((res.best[0] - 1.0).abs() < 1e-5 && (res.best[1] - 1.0).abs() < 1e-5, "{:?}", res.best);
        assert!(!res.budget_exhausted);
    }

    #[test]
    fn never_worse_than_start() {
        let f = |x: &DVector<f64>| -x.norm_squared();
        let cfg = CmaesConfig { sigma0: 10.0, mu: 2, lambda: 4, max_generations: 1, tol_x: 0.0 };
        let res = maximize(f, &DVector::zeros(3), &cfg, 1).unwrap();
        assert_eq!(res.best_value, 0.0);
        assert!(res.budget_exhausted);
    }
}
