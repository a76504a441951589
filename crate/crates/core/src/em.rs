//! Monte Carlo EM for the two-factor commodity model.
//!
//! The E-step smooths with the rejuvenated two-filter smoother and reduces the
//! pairwise smoothing laws of `(a_{i-1}, z_{i-1}, a_i, z_i)` to sufficient
//! statistics, so `θ ↦ Q^N(θ, θ_p)` is cheap to evaluate for any `θ`. The
//! M-step maximizes it with CMA-ES under the model constraints.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cmaes::{self, CmaesConfig};
use crate::commodity::{FuturesPanel, TwoFactorParams, DEFAULT_MATURITIES};
use crate::error::{Error, Result};
use crate::ffbs::BackwardTrajectory;
use crate::forward::{forward_pass, ParticleCloud, SelectionScheme};
use crate::linalg::{self, LOG_2PI};
use crate::marginals::{SmoothingMarginals, TimeMarginal};
use crate::model::RegimeModel;
use crate::oracle::rts_given_regimes;
use crate::quadform::{GaussianQuadForm, WeightedNormal};
use crate::rng;
use crate::two_filter::{merge_rejuvenated, ForwardPredictiveMixture, RejuvenationMixture, TwoFilterOutput};

/// `log p(a_{1:n}, z_{1:n}, y_{1:n})`.
pub fn complete_data_loglik(model: &RegimeModel, a: &[usize], z: &[DVector<f64>], y: &[DVector<f64>]) -> Result<f64> {
    if a.is_empty() || a.len() != z.len() || a.len() != y.len() {
        return Err(Error::Validation("regimes, states and observations must have equal nonzero length".into()));
    }
    let m = model.state_dim() as f64;
    let ch = linalg::cholesky(model.sigma1(), "Sigma1")?;
    let mut lp = model.ln_pi(a[0]) - 0.5 * (m * LOG_2PI + linalg::logdet(&ch))
        - 0.5 * linalg::norm_sq_inv_chol(&ch, &(&z[0] - model.mu1()))
        + model.observation_logdensity(a[0], &z[0], &y[0])?;
    for i in 1..a.len() {
        lp += model.ln_q(a[i - 1], a[i])
            + model.transition_logdensity(a[i], &z[i - 1], &z[i])?
            + model.observation_logdensity(a[i], &z[i], &y[i])?;
    }
    Ok(lp)
}

/// Weighted sums for the transition into a regime: `Σ w E[·]` over `(z_{i-1}, z_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsStats {
    pub weight: f64,
    pub s0: DVector<f64>,
    pub s1: DVector<f64>,
    pub s00: DMatrix<f64>,
    /// `Σ w E[z_i z_{i-1}']`
    pub s10: DMatrix<f64>,
    pub s11: DMatrix<f64>,
}

/// Weighted sums for the observation equation of a regime.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationStats {
    pub weight: f64,
    pub sy: DVector<f64>,
    pub syy: DMatrix<f64>,
    pub sz: DVector<f64>,
    pub szz: DMatrix<f64>,
    /// `Σ w y E[z]'`
    pub syz: DMatrix<f64>,
}

/// Smoothed expectations that make `Q^N(θ, θ_p)` evaluable for any `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedSufficientStats {
    /// `P(a_1 = j | y)`.
    pub init_weights: Vec<f64>,
    pub init_mean: DVector<f64>,
    /// `E[z_1 z_1' | y]`.
    pub init_second: DMatrix<f64>,
    /// `pairwise[i-2][(j, k)] = P(a_{i-1} = j, a_i = k | y)` for `i = 2..n`.
    pub pairwise: Vec<DMatrix<f64>>,
    pub dynamics: Vec<DynamicsStats>,
    pub observations: Vec<ObservationStats>,
}

/// `Q^N(θ, θ_p)` split by factor of the complete-data likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QTerms {
    pub initial_regime: f64,
    pub initial_state: f64,
    pub transitions: f64,
    pub dynamics: f64,
    pub observations: f64,
}

impl QTerms {
    pub fn total(&self) -> f64 {
        self.initial_regime + self.initial_state + self.transitions + self.dynamics + self.observations
    }
}

impl SmoothedSufficientStats {
    fn empty(jn: usize, m: usize, p: usize) -> Self {
        Self {
            init_weights: vec![0.0; jn],
            init_mean: DVector::zeros(m),
            init_second: DMatrix::zeros(m, m),
            pairwise: Vec::new(),
            dynamics: (0..jn)
                .map(|_| DynamicsStats {
                    weight: 0.0,
                    s0: DVector::zeros(m),
                    s1: DVector::zeros(m),
                    s00: DMatrix::zeros(m, m),
                    s10: DMatrix::zeros(m, m),
                    s11: DMatrix::zeros(m, m),
                })
                .collect(),
            observations: (0..jn)
                .map(|_| ObservationStats {
                    weight: 0.0,
                    sy: DVector::zeros(p),
                    syy: DMatrix::zeros(p, p),
                    sz: DVector::zeros(m),
                    szz: DMatrix::zeros(m, m),
                    syz: DMatrix::zeros(p, m),
                })
                .collect(),
        }
    }

    fn add_init(&mut self, a: usize, w: f64, mean: &DVector<f64>, second: &DMatrix<f64>) {
        self.init_weights[a] += w;
        self.init_mean += w * mean;
        self.init_second += w * second;
    }

    fn add_observation(&mut self, a: usize, w: f64, y: &DVector<f64>, mean: &DVector<f64>, second: &DMatrix<f64>) {
        let o = &mut self.observations[a];
        o.weight += w;
        o.sy += w * y;
        o.syy += w * y * y.transpose();
        o.sz += w * mean;
        o.szz += w * second;
        o.syz += w * y * mean.transpose();
    }

    /// Expected transition counts `Σ_i P(a_{i-1} = j, a_i = k | y)`.
    pub fn transition_counts(&self) -> DMatrix<f64> {
        let jn = self.init_weights.len();
        self.pairwise.iter().fold(DMatrix::zeros(jn, jn), |acc, p| acc + p)
    }

    pub fn terms(&self, model: &RegimeModel) -> Result<QTerms> {
        let jn = model.n_regimes();
        let m = model.state_dim() as f64;
        if jn != self.init_weights.len() || model.state_dim() != self.init_mean.len() {
            return Err(Error::Validation("model dimensions differ from the smoothed statistics".into()));
        }
        let xlogy = |w: f64, l: f64| if w == 0.0 { 0.0 } else { w * l };
        let initial_regime = (0..jn).map(|j| xlogy(self.init_weights[j], model.ln_pi(j))).sum();

        let ch = linalg::cholesky(model.sigma1(), "Sigma1")?;
        let mu = model.mu1();
        let e1 = &self.init_second - mu * self.init_mean.transpose() - &self.init_mean * mu.transpose()
            + mu * mu.transpose();
        let initial_state = -0.5 * (m * LOG_2PI + linalg::logdet(&ch) + ch.solve(&e1).trace());

        let counts = self.transition_counts();
        let mut transitions = 0.0;
        for j in 0..jn {
            for k in 0..jn {
                transitions += xlogy(counts[(j, k)], model.ln_q(j, k));
            }
        }

        let mut dynamics = 0.0;
        for (a, s) in self.dynamics.iter().enumerate() {
            if s.weight == 0.0 {
                continue;
            }
            let r = model.regime(a);
            let (d, t) = (&r.d, &r.t);
            let e = &s.s11 - &s.s10 * t.transpose() - t * s.s10.transpose() + t * &s.s00 * t.transpose()
                - d * s.s1.transpose()
                - &s.s1 * d.transpose()
                + d * s.s0.transpose() * t.transpose()
                + t * &s.s0 * d.transpose()
                + s.weight * d * d.transpose();
            dynamics -= 0.5 * (s.weight * (m * LOG_2PI + model.hbar_logdet(a)?) + (model.hbar_inv(a)? * e).trace());
        }

        let p = model.obs_dim() as f64;
        let mut observations = 0.0;
        for (a, s) in self.observations.iter().enumerate() {
            if s.weight == 0.0 {
                continue;
            }
            let r = model.regime(a);
            let (c, b) = (&r.c, &r.b);
            let e = &s.syy - &s.syz * b.transpose() - b * s.syz.transpose() + b * &s.szz * b.transpose()
                - c * s.sy.transpose()
                - &s.sy * c.transpose()
                + c * s.sz.transpose() * b.transpose()
                + b * &s.sz * c.transpose()
                + s.weight * c * c.transpose();
            observations -= 0.5 * (s.weight * (p * LOG_2PI + model.gbar_logdet(a)) + (model.gbar_inv(a) * e).trace());
        }
        Ok(QTerms { initial_regime, initial_state, transitions, dynamics, observations })
    }

    /// `Q^N(θ, θ_p)` for the model built from `θ`.
    pub fn evaluate(&self, model: &RegimeModel) -> Result<f64> {
        Ok(self.terms(model)?.total())
    }
}

/// Output of a smoothing E-step.
#[derive(Debug, Clone)]
pub struct EStep {
    pub stats: SmoothedSufficientStats,
    pub marginals: SmoothingMarginals,
    /// Forward-filter estimate of `log p(y_{1:n})`.
    pub log_evidence: f64,
}

fn second_moment(wn: &WeightedNormal) -> DMatrix<f64> {
    &wn.cov + &wn.mean * wn.mean.transpose()
}

/// Two-filter E-step with rejuvenation.
pub fn e_step(
    model: &RegimeModel,
    ys: &[DVector<f64>],
    n_particles: usize,
    scheme: SelectionScheme,
    seed: u64,
) -> Result<EStep> {
    let fwd = forward_pass(model, ys, n_particles, scheme, seed)?;
    let out = TwoFilterOutput::run(model, &fwd, ys, n_particles, seed, false)?;
    let rej = out.rejuvenation_mixtures(model)?;
    let n = ys.len();
    let (jn, m, p) = (model.n_regimes(), model.state_dim(), model.obs_dim());
    let mut stats = SmoothedSufficientStats::empty(jn, m, p);
    let mut times = Vec::with_capacity(n);

    let first = merge_rejuvenated(model, &out.predictive[0], rej.first(), &ys[0], 1)?;
    for (a, c) in first.by_regime.iter().enumerate() {
        if let Some(c) = c {
            let w = c.log_w.exp();
            let s = second_moment(c);
            stats.add_init(a, w, &c.mean, &s);
            stats.add_observation(a, w, &ys[0], &c.mean, &s);
        }
    }
    times.push(first);
    for t in 1..n {
        let (pair, marginal) = pairwise_step(model, &fwd.clouds[t - 1], &out.predictive[t], rej.get(t), &ys[t], t + 1)?;
        accumulate_pairs(&mut stats, &pair, &ys[t]);
        stats.pairwise.push(pair.weights.clone());
        times.push(marginal);
    }
    Ok(EStep { stats, marginals: SmoothingMarginals { times }, log_evidence: fwd.log_evidence() })
}

/// Normalized moments of `(z_{i-1}, z_i)` for each regime pair at one time index.
#[derive(Debug, Clone)]
pub struct PairMoments {
    /// `P(a_{i-1} = j, a_i = k | y)`.
    pub weights: DMatrix<f64>,
    /// `Σ w E[z_{i-1}]`, `Σ w E[z_i]`, `Σ w E[z_{i-1} z_{i-1}']`, `Σ w E[z_i z_{i-1}']`, `Σ w E[z_i z_i']` per `(j, k)`.
    pub sums: Vec<Vec<(DVector<f64>, DVector<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)>>,
}

fn accumulate_pairs(stats: &mut SmoothedSufficientStats, pair: &PairMoments, y: &DVector<f64>) {
    for (j, row) in pair.sums.iter().enumerate() {
        for (k, (s0, s1, s00, s10, s11)) in row.iter().enumerate() {
            let w = pair.weights[(j, k)];
            if w == 0.0 {
                continue;
            }
            let d = &mut stats.dynamics[k];
            d.weight += w;
            d.s0 += s0;
            d.s1 += s1;
            d.s00 += s00;
            d.s10 += s10;
            d.s11 += s11;
            let o = &mut stats.observations[k];
            o.weight += w;
            o.sy += w * y;
            o.syy += w * y * y.transpose();
            o.sz += s1;
            o.szz += s11;
            o.syz += y * s1.transpose();
        }
    }
}

/// Smoothing law of `(a_{i-1}, z_{i-1}, a_i, z_i)`:
/// `p^N(a_{i-1}, z_{i-1} | y_{1:i-1}) Q m(a_i, z_{i-1}; z_i) g(a_i, z_i; y_i) t_i^N(a_i, z_i)`,
/// where the forward factor is the filter cloud at `i-1`. The `z_i` marginal is
/// the rejuvenated merge at `i`; given `z_i`, `z_{i-1}` is Gaussian with the
/// Rauch-Tung-Striebel gain of each forward particle, so its moments follow
/// linearly from those of `z_i`.
pub fn pairwise_step(
    model: &RegimeModel,
    prev: &ParticleCloud,
    predictive: &ForwardPredictiveMixture,
    rej: Option<&RejuvenationMixture>,
    y: &DVector<f64>,
    time: usize,
) -> Result<(PairMoments, TimeMarginal)> {
    let (jn, m) = (model.n_regimes(), model.state_dim());
    let obs: Vec<GaussianQuadForm> = (0..jn).map(|j| GaussianQuadForm::from_observation(model, j, y)).collect();
    // predictive components are laid out particle-major, then regime
    let mut comp_iter = predictive.components.iter();
    let mut entries: Vec<(usize, usize, usize, WeightedNormal)> = Vec::new();
    let mut gains: Vec<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> = Vec::new();
    let mut idx_of = Vec::new();
    for part in &prev.particles {
        for k in 0..jn {
            if (part.log_w + model.ln_q(part.regime(), k)) == f64::NEG_INFINITY {
                continue;
            }
            let c = comp_iter.next().ok_or_else(|| Error::Validation("predictive mixture does not match cloud".into()))?;
            debug_assert_eq!(c.regime, k);
            let ch = linalg::cholesky(&c.mass.cov, "predicted covariance")?;
            let t = &model.regime(k).t;
            let gain = ch.solve(&(t * &part.stat.cov)).transpose();
            let offset = &part.stat.mean - &gain * &c.mass.mean;
            let resid = linalg::symmetrized(&part.stat.cov - &gain * &c.mass.cov * gain.transpose());
            let gi = gains.len();
            gains.push((gain, offset, resid));
            idx_of.push(gi);
            let base = c.form.product(&obs[k]);
            match rej {
                None => entries.push((part.regime(), k, gi, base.to_weighted_normal()?)),
                Some(rej) => {
                    for (l, term) in rej.terms.iter().enumerate() {
                        let lw = rej.log_weight(model, l, k);
                        if lw == f64::NEG_INFINITY {
                            continue;
                        }
                        let mut wn = base.product(&term.form).to_weighted_normal()?;
                        wn.log_w += lw;
                        entries.push((part.regime(), k, gi, wn));
                    }
                }
            }
        }
    }
    let total = linalg::log_sum_exp(&entries.iter().map(|e| e.3.log_w).collect::<Vec<_>>());
    if !total.is_finite() {
        return Err(Error::DegenerateWeights { time, context: "pairwise smoothing has no mass".into() });
    }
    let zero = || (DVector::zeros(m), DVector::zeros(m), DMatrix::zeros(m, m), DMatrix::zeros(m, m), DMatrix::zeros(m, m));
    let mut sums = vec![vec![zero(); jn]; jn];
    let mut weights = DMatrix::zeros(jn, jn);
    let mut singles: Vec<(usize, WeightedNormal)> = Vec::with_capacity(entries.len());
    for (j, k, gi, mut wn) in entries {
        wn.log_w -= total;
        let w = wn.log_w.exp();
        let (gain, offset, resid) = &gains[gi];
        let m1 = &wn.mean;
        let e11 = second_moment(&wn);
        let m0 = gain * m1 + offset;
        let e10 = &e11 * gain.transpose() + m1 * offset.transpose();
        let e00 = resid + gain * &e11 * gain.transpose() + gain * m1 * offset.transpose() + offset * m1.transpose() * gain.transpose()
            + offset * offset.transpose();
        weights[(j, k)] += w;
        let s = &mut sums[j][k];
        s.0 += w * m0;
        s.1 += w * m1;
        s.2 += w * e00;
        s.3 += w * e10;
        s.4 += w * e11;
        singles.push((k, wn));
    }
    let marginal = TimeMarginal::from_components(jn, singles, time)?;
    Ok((PairMoments { weights, sums }, marginal))
}

/// E-step from sampled regime trajectories with their conditional RTS moments.
pub fn e_step_from_trajectories(
    model: &RegimeModel,
    ys: &[DVector<f64>],
    trajectories: &[BackwardTrajectory],
) -> Result<SmoothedSufficientStats> {
    let paths: Vec<&[usize]> = trajectories.iter().map(|t| t.regimes.as_slice()).collect();
    e_step_from_paths(model, ys, &paths)
}

/// Equal-weight average over regime paths of the exact conditional expectations.
pub fn e_step_from_paths(model: &RegimeModel, ys: &[DVector<f64>], paths: &[&[usize]]) -> Result<SmoothedSufficientStats> {
    if paths.is_empty() {
        return Err(Error::Validation("no regime paths".into()));
    }
    let n = ys.len();
    let (jn, m, p) = (model.n_regimes(), model.state_dim(), model.obs_dim());
    let mut stats = SmoothedSufficientStats::empty(jn, m, p);
    stats.pairwise = vec![DMatrix::zeros(jn, jn); n.saturating_sub(1)];
    let mut unique: std::collections::BTreeMap<&[usize], usize> = Default::default();
    for a in paths {
        *unique.entry(*a).or_default() += 1;
    }
    let total = paths.len() as f64;
    for (a, count) in unique {
        let w = count as f64 / total;
        let rts = rts_given_regimes(model, a, ys)?;
        let s = &rts.smoothed;
        let sec = |i: usize| &s[i].cov + &s[i].mean * s[i].mean.transpose();
        stats.add_init(a[0], w, &s[0].mean, &sec(0));
        stats.add_observation(a[0], w, &ys[0], &s[0].mean, &sec(0));
        for i in 1..n {
            let k = a[i];
            stats.pairwise[i - 1][(a[i - 1], k)] += w;
            let e11 = sec(i);
            let e00 = sec(i - 1);
            let e10 = &rts.cross[i - 1] + &s[i].mean * s[i - 1].mean.transpose();
            let d = &mut stats.dynamics[k];
            d.weight += w;
            d.s0 += w * &s[i - 1].mean;
            d.s1 += w * &s[i].mean;
            d.s00 += w * e00;
            d.s10 += w * e10;
            d.s11 += w * &e11;
            stats.add_observation(k, w, &ys[i], &s[i].mean, &e11);
        }
    }
    Ok(stats)
}

/// Free coordinates of the M-step:
/// `κ, α_1..α_J, σ_1..σ_J, η_1..η_J, ρ_1..ρ_J, g_1..g_p, Q_11..Q_JJ`.
/// `π`, `μ_1`, `Σ_1`, `r` and `τ` stay fixed.
pub fn params_to_vec(p: &TwoFactorParams) -> DVector<f64> {
    let mut v = vec![p.kappa];
    v.extend(&p.alpha);
    v.extend(&p.sigma);
    v.extend(&p.eta);
    v.extend(&p.rho);
    v.extend(&p.g);
    v.extend((0..p.n_regimes()).map(|j| p.q[j][j]));
    DVector::from_vec(v)
}

/// Inverse of [`params_to_vec`]; off-diagonal transition mass keeps the proportions of `base`.
pub fn params_from_vec(base: &TwoFactorParams, x: &DVector<f64>) -> TwoFactorParams {
    let jn = base.n_regimes();
    let np = base.g.len();
    let mut p = base.clone();
    let mut i = 0;
    let mut take = |k: usize| {
        let s = x.rows(i, k).iter().cloned().collect::<Vec<_>>();
        i += k;
        s
    };
    p.kappa = take(1)[0];
    p.alpha = take(jn);
    p.sigma = take(jn);
    p.eta = take(jn);
    p.rho = take(jn);
    p.g = take(np);
    let diag = take(jn);
    for j in 0..jn {
        let off: f64 = (0..jn).filter(|&k| k != j).map(|k| base.q[j][k]).sum();
        for k in 0..jn {
            p.q[j][k] = if k == j {
                diag[j]
            } else if jn == 1 {
                0.0
            } else if off > 0.0 {
                (1.0 - diag[j]) * base.q[j][k] / off
            } else {
                (1.0 - diag[j]) / (jn - 1) as f64
            };
        }
    }
    p
}

const MIN_SCALE: f64 = 1e-6;
const MAX_RHO: f64 = 0.999;
const MIN_STAY: f64 = 1e-4;

/// Nearest feasible parameters: positive scales, `|ρ| < 1`, proper `Q`, and
/// (optionally) `α_1 ≥ α_2 ≥ ...` by isotonic averaging.
pub fn project(p: &TwoFactorParams, alpha_order: bool) -> TwoFactorParams {
    let mut q = p.clone();
    q.kappa = q.kappa.max(1e-4);
    for v in q.sigma.iter_mut().chain(q.eta.iter_mut()).chain(q.g.iter_mut()) {
        *v = v.max(MIN_SCALE);
    }
    for v in q.rho.iter_mut() {
        *v = v.clamp(-MAX_RHO, MAX_RHO);
    }
    let jn = q.n_regimes();
    if jn > 1 {
        let mut v = params_to_vec(&q);
        let at = v.len() - jn;
        for j in 0..jn {
            v[at + j] = v[at + j].clamp(MIN_STAY, 1.0 - MIN_STAY);
        }
        q = params_from_vec(&q, &v);
    }
    if alpha_order {
        q.alpha = nonincreasing_fit(&q.alpha);
    }
    q
}

fn nonincreasing_fit(x: &[f64]) -> Vec<f64> {
    // pool adjacent violators on the reversed sequence
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &v in x.iter().rev() {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a <= b {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().unwrap();
            *last = ((a * na as f64 + b * nb as f64) / (na + nb) as f64, na + nb);
        }
    }
    let mut out = Vec::with_capacity(x.len());
    for (v, n) in blocks {
        out.extend(std::iter::repeat(v).take(n));
    }
    out.reverse();
    out
}

pub fn is_feasible(p: &TwoFactorParams, alpha_order: bool) -> bool {
    p.validate().is_ok()
        && p.q.iter().all(|row| row.iter().all(|v| *v >= 0.0))
        && (!alpha_order || p.alpha.windows(2).all(|w| w[0] >= w[1]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub initial: TwoFactorParams,
    /// Time to maturity in weeks of each panel column.
    pub maturities: Vec<usize>,
    pub iterations: usize,
    pub particles: usize,
    pub selection: SelectionScheme,
    pub optimizer: CmaesConfig,
    /// Keep `α_1 ≥ α_2 ≥ ...`.
    pub alpha_order: bool,
    /// Reuse one particle seed for every E-step.
    pub common_random_numbers: bool,
    /// Replace `mu1` by the value implied by the first panel row.
    pub mu1_from_panel: bool,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            initial: TwoFactorParams::default(),
            maturities: DEFAULT_MATURITIES.to_vec(),
            iterations: 20,
            particles: 100,
            selection: SelectionScheme::KlOs,
            optimizer: CmaesConfig::default(),
            alpha_order: true,
            common_random_numbers: false,
            mu1_from_panel: true,
            seed: 1,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::Validation("particles must be positive".into()));
        }
        self.initial.validate()?;
        if self.alpha_order && !is_feasible(&self.initial, true) {
            return Err(Error::Validation("initial alpha must be nonincreasing across regimes".into()));
        }
        Ok(())
    }
}

/// Feasible maximizer of the E-step evaluator.
#[derive(Debug, Clone)]
pub struct MStep {
    pub params: TwoFactorParams,
    pub value: f64,
    pub budget_exhausted: bool,
}

const REPAIR_PENALTY: f64 = 1e6;

/// CMA-ES over [`params_to_vec`] coordinates. Infeasible candidates are
/// projected and penalized by their squared distance to the projection.
pub fn m_step<F>(evaluator: F, start: &TwoFactorParams, maturities: &[usize], cfg: &EmConfig, seed: u64) -> Result<MStep>
where
    F: Fn(&RegimeModel) -> Result<f64> + Sync,
{
    let x0 = params_to_vec(start);
    let objective = |x: &DVector<f64>| {
        let raw = params_from_vec(start, x);
        let feasible = project(&raw, cfg.alpha_order);
        let dist = (params_to_vec(&feasible) - x).norm_squared();
        match feasible.build_clgm(maturities).and_then(|m| evaluator(&m)) {
            Ok(v) if v.is_finite() => v - REPAIR_PENALTY * dist,
            _ => f64::NEG_INFINITY,
        }
    };
    let res = cmaes::maximize(objective, &x0, &cfg.optimizer, seed)?;
    let params = project(&params_from_vec(start, &res.best), cfg.alpha_order);
    let value = evaluator(&params.build_clgm(maturities)?)?;
    Ok(MStep { params, value, budget_exhausted: res.budget_exhausted })
}

/// One EM iteration: `θ_{p+1}` with `Q^N(θ_p, θ_p)` and `Q^N(θ_{p+1}, θ_p)`.
#[derive(Debug, Clone)]
pub struct EmIteration {
    pub iteration: usize,
    pub params: TwoFactorParams,
    pub q_current: f64,
    pub q_next: f64,
    pub log_evidence: f64,
    pub budget_exhausted: bool,
}

impl EmIteration {
    pub fn ascent(&self) -> f64 {
        self.q_next - self.q_current
    }
}

#[derive(Debug, Clone)]
pub struct EmRun {
    pub initial: TwoFactorParams,
    pub trace: Vec<EmIteration>,
    pub final_params: TwoFactorParams,
    /// `P̂(a_i = j | y_{1:n})` under the final parameters.
    pub posteriors: SmoothingMarginals,
}

pub fn em_run(cfg: &EmConfig, panel: &FuturesPanel) -> Result<EmRun> {
    cfg.validate()?;
    if panel.maturities != cfg.maturities {
        return Err(Error::Validation("panel maturities differ from the configured maturities".into()));
    }
    let mut theta = cfg.initial.clone();
    if cfg.mu1_from_panel {
        theta.mu1 = theta.mu1_from_panel(panel)?;
    }
    let initial = theta.clone();
    let ys = &panel.log_prices;
    let seed_for = |p: usize| if cfg.common_random_numbers { cfg.seed } else { rng::derive_seed(cfg.seed, p as u64) };
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let model = theta.build_clgm(&cfg.maturities)?;
        let e = e_step(&model, ys, cfg.particles, cfg.selection, seed_for(it))?;
        let q_current = e.stats.evaluate(&model)?;
        let ms = m_step(|m| e.stats.evaluate(m), &theta, &cfg.maturities, cfg, rng::derive_seed(seed_for(it), 1 << 32))?;
        trace.push(EmIteration {
            iteration: it + 1,
            params: ms.params.clone(),
            q_current,
            q_next: ms.value,
            log_evidence: e.log_evidence,
            budget_exhausted: ms.budget_exhausted,
        });
        theta = ms.params;
    }
    let model = theta.build_clgm(&cfg.maturities)?;
    let last = e_step(&model, ys, cfg.particles, cfg.selection, seed_for(cfg.iterations))?;
    Ok(EmRun { initial, trace, final_params: theta, posteriors: last.marginals })
}

/// Parameter column names in the trace.
pub fn param_names(p: &TwoFactorParams) -> Vec<String> {
    let jn = p.n_regimes();
    let mut v = vec!["kappa".to_string()];
    for name in ["sigma", "eta", "rho", "alpha"] {
        v.extend((1..=jn).map(|j| format!("{name}_{j}")));
    }
    v.extend((1..=p.g.len()).map(|l| format!("g_{l}")));
    v.extend((1..=jn).map(|j| format!("Q_{j}{j}")));
    v
}

fn param_values(p: &TwoFactorParams) -> Vec<f64> {
    let mut v = vec![p.kappa];
    v.extend(&p.sigma);
    v.extend(&p.eta);
    v.extend(&p.rho);
    v.extend(&p.alpha);
    v.extend(&p.g);
    v.extend((0..p.n_regimes()).map(|j| p.q[j][j]));
    v
}

impl EmRun {
    /// One row per iteration: parameters, `Q^N(θ_p, θ_p)`, `Q^N(θ_{p+1}, θ_p)` and the ascent.
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["iteration".to_string()];
        header.extend(param_names(&self.initial));
        header.extend(["q_current", "q_next", "ascent", "log_evidence", "budget_exhausted"].map(String::from));
        wr.write_record(&header)?;
        for it in &self.trace {
            let mut rec = vec![it.iteration.to_string()];
            rec.extend(param_values(&it.params).iter().map(|v| format!("{v:.16e}")));
            rec.extend([it.q_current, it.q_next, it.ascent(), it.log_evidence].iter().map(|v| format!("{v:.16e}")));
            rec.push(it.budget_exhausted.to_string());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isotonic_fit() {
        assert_eq!(nonincreasing_fit(&[0.1, -0.05]), vec![0.1, -0.05]);
        let close = |a: Vec<f64>, b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15);
        assert!(close(nonincreasing_fit(&[-0.1, 0.3]), &[0.1, 0.1]));
        assert!(close(nonincreasing_fit(&[1.0, 0.0, 2.0]), &[1.0, 1.0, 1.0]));
        assert!(close(nonincreasing_fit(&[3.0, 1.0, 2.0]), &[3.0, 1.5, 1.5]));
    }

    #[test]
    fn vec_round_trip_and_projection() {
        let p = TwoFactorParams::default();
        let v = params_to_vec(&p);
        assert_eq!(v.len(), 15);
        assert!((params_to_vec(&params_from_vec(&p, &v)) - &v).abs().max() < 1e-15);
        assert!((params_from_vec(&p, &v).q[0][1] - 0.02).abs() < 1e-15);
        let mut bad = p.clone();
        bad.alpha = vec![-0.1, 0.2];
        bad.rho[0] = 1.5;
        bad.sigma[1] = -0.3;
        bad.q[0] = vec![1.2, -0.2];
        let fixed = project(&bad, true);
        assert!(is_feasible(&fixed, true));
        assert!((fixed.alpha[0] - 0.05).abs() < 1e-15 && fixed.alpha[0] == fixed.alpha[1]);
        assert!(is_feasible(&project(&p, true), true));
        assert!((params_to_vec(&project(&p, true)) - &v).abs().max() < 1e-15);
    }

    #[test]
    fn single_observation_loglik() {
        let m = RegimeModel::scalar_switching_benchmark();
        let z = vec![DVector::from_element(1, 0.3)];
        let y = vec![DVector::from_element(1, 0.5)];
        let v = complete_data_loglik(&m, &[1], &z, &y).unwrap();
        let expect = 0.5f64.ln() - 0.5 * LOG_2PI - 0.5 * 0.09 + m.observation_logdensity(1, &z[0], &y[0]).unwrap();
        assert!((v - expect).abs() < 1e-12);
    }
}
