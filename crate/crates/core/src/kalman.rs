//! Exact conditional-Gaussian recursions for a fixed regime sequence.
//!
//! * forward Kalman predict/update ([`KalmanStat`]);
//! * the backward information recursion representing
//!   `p(y_{i:n} | a_{i:n}, z_i)` as `exp{-½c̃ - ½ z'P̃⁻¹z + z'ν̃}` ([`BackwardInfoStat`]);
//! * the backward statistics used by backward simulation ([`FfbsBackwardStat`]);
//! * the closed-form integral of a Gaussian against a backward statistic.
//!
//! Precisions are propagated in information form and never inverted on
//! their own: the terminal precision `B'Ḡ⁻¹B` is singular whenever `p < m`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, LOG_2PI};
use crate::model::RegimeModel;
use crate::quadform::GaussianQuadForm;

/// Filtered (or predicted) Gaussian moments of the state.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanStat {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl KalmanStat {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }

    /// The initial-state prior `N(mu1, Sigma1)`.
    pub fn prior(model: &RegimeModel) -> Self {
        Self { mean: model.mu1().clone(), cov: model.sigma1().clone() }
    }

    /// A point mass at `z` (zero covariance).
    pub fn dirac(z: DVector<f64>) -> Self {
        let m = z.len();
        Self { mean: z, cov: DMatrix::zeros(m, m) }
    }
}

/// Time update: `(d + T mu, T P T' + H̄)` under regime `a`.
pub fn kalman_predict(model: &RegimeModel, stat: &KalmanStat, a: usize) -> KalmanStat {
    let r = model.regime(a);
    let mean = &r.d + &r.t * &stat.mean;
    let cov = linalg::symmetrized(&r.t * &stat.cov * r.t.transpose() + model.hbar(a));
    KalmanStat { mean, cov }
}

/// Measurement update of a predicted stat; also returns `log N(y; c + B mu, B P B' + Ḡ)`.
pub fn kalman_update(
    model: &RegimeModel,
    pred: &KalmanStat,
    a: usize,
    y: &DVector<f64>,
) -> Result<(KalmanStat, f64)> {
    let r = model.regime(a);
    let pb = &pred.cov * r.b.transpose();
    let s = linalg::symmetrized(&r.b * &pb + model.gbar(a));
    let ch = linalg::cholesky(&s, "innovation covariance")?;
    let resid = y - &r.c - &r.b * &pred.mean;
    let loglik = -0.5
        * (model.obs_dim() as f64 * LOG_2PI
            + linalg::logdet(&ch)
            + linalg::norm_sq_inv_chol(&ch, &resid));
    // K = P B' S⁻¹
    let gain = ch.solve(&pb.transpose()).transpose();
    let mean = &pred.mean + &gain * resid;
    let cov = linalg::symmetrized(&pred.cov - &gain * pb.transpose());
    Ok((KalmanStat { mean, cov }, loglik))
}

/// Filtered moments at time 1 under regime `a1`.
pub fn kalman_init(model: &RegimeModel, a1: usize, y1: &DVector<f64>) -> Result<KalmanStat> {
    Ok(kalman_update(model, &KalmanStat::prior(model), a1, y1)?.0)
}

/// Filtered moments at time 1 together with `log p(y_1 | a_1)`.
pub fn kalman_init_with_loglik(model: &RegimeModel, a1: usize, y1: &DVector<f64>) -> Result<(KalmanStat, f64)> {
    kalman_update(model, &KalmanStat::prior(model), a1, y1)
}

/// One full Kalman step; the scalar is the predictive log-likelihood of `y`.
pub fn kalman_predict_update(
    model: &RegimeModel,
    stat: &KalmanStat,
    a: usize,
    y: &DVector<f64>,
) -> Result<(KalmanStat, f64)> {
    kalman_update(model, &kalman_predict(model, stat, a), a, y)
}

/// `p(y_{i:n} | a_{i:n}, z_i) = exp{-½ c̃ - ½ z'P̃⁻¹z + z'ν̃}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardInfoStat {
    pub c_tilde: f64,
    pub p_inv: DMatrix<f64>,
    pub nu: DVector<f64>,
}

impl BackwardInfoStat {
    pub fn as_quadform(&self) -> GaussianQuadForm {
        GaussianQuadForm { a: self.p_inv.clone(), b: self.nu.clone(), c: self.c_tilde }
    }

    pub fn log_eval(&self, z: &DVector<f64>) -> f64 {
        self.as_quadform().log_eval(z)
    }

    /// Folds the observation `y_i` under regime `a_i` into a predicted statistic.
    fn with_observation(mut self, model: &RegimeModel, a: usize, y: &DVector<f64>) -> Self {
        self.c_tilde += model.obs_constant(a, y);
        self.p_inv = linalg::symmetrized(&self.p_inv + model.obs_precision(a));
        self.nu += model.obs_information(a, y);
        self
    }
}

/// Terminal statistic: `c̃_n = p log 2π + log|Ḡ| + ‖y_n - c‖²_Ḡ`, `P̃_n⁻¹ = B'Ḡ⁻¹B`, `ν̃_n = B'Ḡ⁻¹(y_n - c)`.
pub fn backward_info_terminal(model: &RegimeModel, a_n: usize, y_n: &DVector<f64>) -> BackwardInfoStat {
    let m = model.state_dim();
    BackwardInfoStat { c_tilde: 0.0, p_inv: DMatrix::zeros(m, m), nu: DVector::zeros(m) }
        .with_observation(model, a_n, y_n)
}

/// `∫ m(a_next, z_i; z) exp{-½c̃ - ½z'P̃⁻¹z + z'ν̃} dz` as a statistic in `z_i`
/// (the `i|i+1` quantities, before `y_i` is folded in).
///
/// With `Δ = (I + H'P̃⁻¹H)⁻¹`, `W = HΔH'` and `r̃ = ν̃ + H̄⁻¹d`:
///
/// ```text
/// c̃_{i|i+1}  = c̃ + log|H̄| + d'H̄⁻¹d - log|W| - r̃'W r̃
/// P̃⁻¹_{i|i+1} = T'(I - H̄⁻¹W) H̄⁻¹ T
/// ν̃_{i|i+1}  = T'H̄⁻¹(-d + W r̃)
/// ```
pub fn backward_info_predict(model: &RegimeModel, next: &BackwardInfoStat, a_next: usize) -> Result<BackwardInfoStat> {
    let r = model.regime(a_next);
    let hbar_inv = model.hbar_inv(a_next)?;
    let m = model.state_dim();
    let ident = DMatrix::<f64>::identity(m, m);
    let inner = linalg::symmetrized(&ident + r.h.transpose() * &next.p_inv * &r.h);
    let inner_ch = linalg::cholesky(&inner, "I + H'P̃⁻¹H")?;
    let delta = linalg::symmetrized(inner_ch.inverse());
    let w = linalg::symmetrized(&r.h * &delta * r.h.transpose());
    // log|W| = log|H̄| + log|Δ| = log|H̄| - log|I + H'P̃⁻¹H|
    let logdet_w = model.hbar_logdet(a_next)? - linalg::logdet(&inner_ch);
    let hinv_d = hbar_inv * &r.d;
    let r_tilde = &next.nu + &hinv_d;
    let w_r = &w * &r_tilde;
    let c_tilde = next.c_tilde + model.hbar_logdet(a_next)? + r.d.dot(&hinv_d) - logdet_w - r_tilde.dot(&w_r);
    let p_inv = linalg::symmetrized(r.t.transpose() * (&ident - hbar_inv * &w) * hbar_inv * &r.t);
    let nu = r.t.transpose() * hbar_inv * (&w_r - &r.d);
    Ok(BackwardInfoStat { c_tilde, p_inv, nu })
}

/// One backward information step from `i+1` to `i`.
pub fn backward_info_step(
    model: &RegimeModel,
    next: &BackwardInfoStat,
    a_i: usize,
    a_next: usize,
    y_i: &DVector<f64>,
) -> Result<BackwardInfoStat> {
    Ok(backward_info_predict(model, next, a_next)?.with_observation(model, a_i, y_i))
}

/// Backward information statistics for every index of a regime/observation suffix.
pub fn backward_info_sequence(
    model: &RegimeModel,
    regimes: &[usize],
    obs: &[DVector<f64>],
) -> Result<Vec<BackwardInfoStat>> {
    check_suffix(regimes, obs)?;
    let n = regimes.len();
    let mut out = Vec::with_capacity(n);
    out.push(backward_info_terminal(model, regimes[n - 1], &obs[n - 1]));
    for i in (0..n - 1).rev() {
        let next = out.last().unwrap();
        let s = backward_info_step(model, next, regimes[i], regimes[i + 1], &obs[i])?;
        out.push(s);
    }
    out.reverse();
    Ok(out)
}

fn check_suffix(regimes: &[usize], obs: &[DVector<f64>]) -> Result<()> {
    if regimes.is_empty() || regimes.len() != obs.len() {
        return Err(Error::Validation("regime and observation suffixes must be nonempty and of equal length".into()));
    }
    Ok(())
}

/// Backward statistics for backward simulation.
///
/// `exp{-½(z'Ω̂z - 2λ̂'z)} ∝ p(y_{i:n}, a_{i+1:n} | z_i, a_i)` and
/// `exp{-½(z'Ωz - 2λ'z)} ∝ p(y_{i+1:n}, a_{i+1:n} | z_i, a_i) / Q(a_i, a_{i+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfbsBackwardStat {
    pub omega: DMatrix<f64>,
    pub lambda: DVector<f64>,
    pub omega_hat: DMatrix<f64>,
    pub lambda_hat: DVector<f64>,
}

impl FfbsBackwardStat {
    /// `Ω̂_n = B'Ḡ⁻¹B`, `λ̂_n = B'Ḡ⁻¹(y_n - c)`; `Ω_n`, `λ_n` are zero (no future).
    pub fn terminal(model: &RegimeModel, a_n: usize, y_n: &DVector<f64>) -> Self {
        let m = model.state_dim();
        Self {
            omega: DMatrix::zeros(m, m),
            lambda: DVector::zeros(m),
            omega_hat: model.obs_precision(a_n).clone(),
            lambda_hat: model.obs_information(a_n, y_n),
        }
    }

    /// `(Ω_i, λ_i)` from the statistic at `i+1` whose regime is `a_next`.
    ///
    /// `m = λ̂ - Ω̂d`, `M = H'Ω̂H + I`, `Ω_i = T'(I - Ω̂HM⁻¹H')Ω̂T`, `λ_i = T'(I - Ω̂HM⁻¹H')m`.
    pub fn propagate(&self, model: &RegimeModel, a_next: usize) -> (DMatrix<f64>, DVector<f64>) {
        let r = model.regime(a_next);
        let m = model.state_dim();
        let ident = DMatrix::<f64>::identity(m, m);
        let big_m = linalg::symmetrized(r.h.transpose() * &self.omega_hat * &r.h + &ident);
        let ch = nalgebra::Cholesky::new(big_m).expect("I + H'Ω̂H is positive definite");
        let k = &ident - &self.omega_hat * &r.h * ch.solve(&r.h.transpose());
        let small_m = &self.lambda_hat - &self.omega_hat * &r.d;
        let omega = linalg::symmetrized(r.t.transpose() * &k * &self.omega_hat * &r.t);
        let lambda = r.t.transpose() * &k * small_m;
        (omega, lambda)
    }

    /// Extends the suffix by one step: regime `a_i` with observation `y_i`.
    pub fn extend(&self, model: &RegimeModel, a_next: usize, a_i: usize, y_i: &DVector<f64>) -> Self {
        let (omega, lambda) = self.propagate(model, a_next);
        Self::from_parts(model, omega, lambda, a_i, y_i)
    }

    /// `Ω̂_i = Ω_i + B'Ḡ⁻¹B`, `λ̂_i = λ_i + B'Ḡ⁻¹(y_i - c)`.
    pub fn from_parts(
        model: &RegimeModel,
        omega: DMatrix<f64>,
        lambda: DVector<f64>,
        a_i: usize,
        y_i: &DVector<f64>,
    ) -> Self {
        let omega_hat = linalg::symmetrized(&omega + model.obs_precision(a_i));
        let lambda_hat = &lambda + model.obs_information(a_i, y_i);
        Self { omega, lambda, omega_hat, lambda_hat }
    }
}

/// Backward-simulation statistics along a suffix; element `k` belongs to `regimes[k]`.
pub fn ffbs_backward_stats(
    model: &RegimeModel,
    regimes: &[usize],
    obs: &[DVector<f64>],
) -> Result<Vec<FfbsBackwardStat>> {
    check_suffix(regimes, obs)?;
    let n = regimes.len();
    let mut out = Vec::with_capacity(n);
    out.push(FfbsBackwardStat::terminal(model, regimes[n - 1], &obs[n - 1]));
    for i in (0..n - 1).rev() {
        let s = out.last().unwrap().extend(model, regimes[i + 1], regimes[i], &obs[i]);
        out.push(s);
    }
    out.reverse();
    Ok(out)
}

/// `log ∫ N(z; mu, Sigma) exp{-½(z'Ωz - 2λ'z)} dz = -½ log|Λ| - ½ η`
/// with `Λ = Γ'ΩΓ + I`, `v = Γ'(λ - Ωμ)`, `η = μ'Ωμ - 2λ'μ - v'Λ⁻¹v`, `P = ΓΓ'`.
pub fn gaussian_ffbs_weight(
    mean: &DVector<f64>,
    factor: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    lambda: &DVector<f64>,
) -> f64 {
    let m = mean.len();
    let big_l = linalg::symmetrized(factor.transpose() * omega * factor + DMatrix::<f64>::identity(m, m));
    let ch = nalgebra::Cholesky::new(big_l).expect("Γ'ΩΓ + I is positive definite");
    let om_mu = omega * mean;
    let v = factor.transpose() * (lambda - &om_mu);
    let eta = mean.dot(&om_mu) - 2.0 * lambda.dot(mean) - linalg::norm_sq_inv_chol(&ch, &v);
    -0.5 * linalg::logdet(&ch) - 0.5 * eta
}

/// `log ∫ φ_{μ,Σ}(z) p(y_{i:n} | a_{i:n}, z) dz` in closed form:
///
/// ```text
/// -½ log|Σ| - ½ μ'Σ⁻¹μ - ½ c̃ + ½ log|Ω̃| + ½ z̃'Ω̃z̃,
/// Ω̃ = (Σ⁻¹ + P̃⁻¹)⁻¹,  z̃ = Σ⁻¹μ + ν̃
/// ```
pub fn gaussian_backward_integral(mean: &DVector<f64>, cov: &DMatrix<f64>, stat: &BackwardInfoStat) -> Result<f64> {
    let ch = linalg::cholesky(cov, "Gaussian covariance")?;
    let sigma_inv = linalg::symmetrized(ch.inverse());
    let sigma_inv_mu = &sigma_inv * mean;
    let sum = linalg::symmetrized(&sigma_inv + &stat.p_inv);
    let sum_ch = linalg::cholesky(&sum, "Σ⁻¹ + P̃⁻¹")?;
    let z_tilde = &sigma_inv_mu + &stat.nu;
    Ok(-0.5 * linalg::logdet(&ch) - 0.5 * mean.dot(&sigma_inv_mu) - 0.5 * stat.c_tilde
        - 0.5 * linalg::logdet(&sum_ch)
        + 0.5 * linalg::norm_sq_inv_chol(&sum_ch, &z_tilde))
}
