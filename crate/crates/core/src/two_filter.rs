//! Generalized two-filter smoothing.
//!
//! A backward SMC pass targets `γ_i(a_i, z_i) p(y_{i:n} | a_i, z_i)` for
//! artificial densities `γ_i`, keeping for each backward particle the exact
//! information statistic of `p(y_{i:n} | ã_{i:n}, z_i)`. The marginal
//! `p(a_i, z_i | y_{1:n})` is then recovered either by merging the forward
//! predictive mixture with the backward particles at `i` (support restricted to
//! the backward regimes), or with rejuvenation: the forward mixture at `i`,
//! the observation `y_i` and the backward particles at `i+1` integrated
//! through the transition, which gives mass to every regime.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::forward::{ForwardPass, ParticleCloud, PathNode};
use crate::kalman::{backward_info_step, backward_info_terminal, gaussian_backward_integral, BackwardInfoStat};
use crate::linalg;
use crate::marginals::{SmoothingMarginals, TimeMarginal};
use crate::model::RegimeModel;
use crate::quadform::{moment_match, GaussianQuadForm, WeightedNormal};
use crate::rng;

/// `γ_i(j, z)` as a Gaussian mixture per regime; weights over all `(j, component)` sum to one.
#[derive(Debug, Clone)]
pub struct ArtificialDensitySchedule {
    /// `components[i][j]` lists the weighted normals of `γ_{i+1}(j, ·)`.
    pub components: Vec<Vec<Vec<WeightedNormal>>>,
}

impl ArtificialDensitySchedule {
    /// `log ∫ γ_i(j, z) p(y_{i:n} | ã_{i:n}, z) dz` for the statistic of a suffix starting with `j`.
    pub fn log_integral(&self, time: usize, j: usize, stat: &BackwardInfoStat) -> Result<f64> {
        let comps = &self.components[time - 1][j];
        let mut terms = Vec::with_capacity(comps.len());
        for c in comps {
            terms.push(c.log_w + gaussian_backward_integral(&c.mean, &c.cov, stat)?);
        }
        Ok(linalg::log_sum_exp(&terms))
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

/// One component `ω^k_{i-1} Q(a^k_{i-1}, j) N(z; μ^k_{i-1}(j), Ω^k_{i-1}(j))` of the forward predictive.
#[derive(Debug, Clone)]
pub struct PredictiveComponent {
    pub regime: usize,
    pub mass: WeightedNormal,
    /// `exp{-½ z'Ω⁻¹z + z'r - ½c}` with `-½c = log ω_f`.
    pub form: GaussianQuadForm,
}

impl PredictiveComponent {
    /// `log ω_{f,i}^k(j) = log ω^k_{i-1} + log Q - ½ log|2πΩ| - ½ μ'Ω⁻¹μ`.
    pub fn log_omega_f(&self) -> f64 {
        -0.5 * self.form.c
    }
}

/// `p^N(a_i, z_i | y_{1:i-1})` as a mixture of quadratic forms.
#[derive(Debug, Clone)]
pub struct ForwardPredictiveMixture {
    pub components: Vec<PredictiveComponent>,
}

impl ForwardPredictiveMixture {
    /// The time-1 law `π_j N(μ_1, Σ_1)`.
    pub fn prior(model: &RegimeModel) -> Result<Self> {
        let mut components = Vec::new();
        for j in 0..model.n_regimes() {
            let lw = model.ln_pi(j);
            if lw == f64::NEG_INFINITY {
                continue;
            }
            let form = GaussianQuadForm::from_gaussian(model.mu1(), model.sigma1())?.scaled(lw);
            let mass = WeightedNormal { log_w: lw, mean: model.mu1().clone(), cov: model.sigma1().clone() };
            components.push(PredictiveComponent { regime: j, mass, form });
        }
        Ok(Self { components })
    }

    pub fn log_eval(&self, j: usize, z: &DVector<f64>) -> f64 {
        let v: Vec<f64> = self.components.iter().filter(|c| c.regime == j).map(|c| c.form.log_eval(z)).collect();
        linalg::log_sum_exp(&v)
    }
}

/// Builds `p^N(a_i, z_i | y_{1:i-1})` from the filter cloud at `i-1`.
pub fn forward_predictive_mixture(model: &RegimeModel, cloud: &ParticleCloud) -> Result<ForwardPredictiveMixture> {
    let mut components = Vec::with_capacity(cloud.len() * model.n_regimes());
    for p in &cloud.particles {
        for j in 0..model.n_regimes() {
            let lw = p.log_w + model.ln_q(p.regime(), j);
            if lw == f64::NEG_INFINITY {
                continue;
            }
            let r = model.regime(j);
            let mean = &r.d + &r.t * &p.stat.mean;
            let cov = linalg::symmetrized(&r.t * &p.stat.cov * r.t.transpose() + model.hbar(j));
            let form = GaussianQuadForm::from_gaussian(&mean, &cov)?.scaled(lw);
            components.push(PredictiveComponent { regime: j, mass: WeightedNormal { log_w: lw, mean, cov }, form });
        }
    }
    Ok(ForwardPredictiveMixture { components })
}

/// Predictive mixtures for `i = 1..n` (the first is the prior).
pub fn forward_predictive_mixtures(model: &RegimeModel, fwd: &ForwardPass) -> Result<Vec<ForwardPredictiveMixture>> {
    let mut out = Vec::with_capacity(fwd.len());
    out.push(ForwardPredictiveMixture::prior(model)?);
    for cloud in &fwd.clouds[..fwd.len() - 1] {
        out.push(forward_predictive_mixture(model, cloud)?);
    }
    Ok(out)
}

/// `γ_i = p^N(a_i, z_i | y_{1:i-1})`, by default moment-matched to one Gaussian per regime.
pub fn default_gamma_schedule(model: &RegimeModel, fwd: &ForwardPass, full_mixture: bool) -> Result<ArtificialDensitySchedule> {
    let mixtures = forward_predictive_mixtures(model, fwd)?;
    let jn = model.n_regimes();
    let mut components = Vec::with_capacity(mixtures.len());
    for mix in mixtures {
        let mut per: Vec<Vec<WeightedNormal>> = vec![Vec::new(); jn];
        for c in mix.components {
            per[c.regime].push(c.mass);
        }
        let total = linalg::log_sum_exp(&per.iter().flatten().map(|c| c.log_w).collect::<Vec<_>>());
        for comps in per.iter_mut() {
            for c in comps.iter_mut() {
                c.log_w -= total;
            }
            if !full_mixture && comps.len() > 1 {
                *comps = moment_match(comps).into_iter().collect();
            }
        }
        components.push(per);
    }
    Ok(ArtificialDensitySchedule { components })
}

/// A distinct backward suffix with its aggregated weight and multiplicity.
#[derive(Debug, Clone)]
pub struct BackwardParticle {
    /// `ã_{i:n}`: the head is `ã_i`, parents run forward in time.
    pub suffix: Arc<PathNode>,
    /// Normalized log-weight (summed over identical copies).
    pub log_w: f64,
    /// Number of copies among the `N` backward particles.
    pub count: usize,
    pub stat: Arc<BackwardInfoStat>,
    /// `log ∫ γ_i(ã_i, z) p(y_{i:n} | ã_{i:n}, z) dz`.
    pub log_integral: f64,
}

impl BackwardParticle {
    pub fn regime(&self) -> usize {
        self.suffix.regime
    }

    /// `ã_{i:n}` in time order.
    pub fn regimes(&self) -> Vec<usize> {
        let mut v = self.suffix.to_vec();
        v.reverse();
        v
    }
}

#[derive(Debug, Clone)]
pub struct BackwardParticleCloud {
    pub time: usize,
    pub particles: Vec<BackwardParticle>,
}

/// The backward SMC pass for `i = n, ..., 1`, returned in time order.
///
/// At `n`, `ã_n` is drawn from `q̃_n(j) ∝ ∫γ_n(j,z)g(j,z;y_n)dz`. For `i < n`,
/// the particles at `i+1` are resampled by their weights and each is extended
/// with `ã_i ∝ Q(ã_i, ã_{i+1}) ∫γ_i(ã_i,z)p(y_{i:n}|ã_{i:n},z)dz`. The
/// resulting weight is the normalizer of that proposal divided by the
/// parent's integral.
pub fn backward_filter_pass(
    model: &RegimeModel,
    ys: &[DVector<f64>],
    gamma: &ArtificialDensitySchedule,
    n_particles: usize,
    seed: u64,
) -> Result<Vec<BackwardParticleCloud>> {
    let n = ys.len();
    if n == 0 || gamma.len() != n {
        return Err(Error::Validation("artificial density schedule must cover every time index".into()));
    }
    if n_particles == 0 {
        return Err(Error::Validation("backward particle count must be at least 1".into()));
    }
    let jn = model.n_regimes();
    let mut r = rng::stream(seed, 3);

    let mut stats = Vec::with_capacity(jn);
    let mut logq = Vec::with_capacity(jn);
    for j in 0..jn {
        let s = backward_info_terminal(model, j, &ys[n - 1]);
        logq.push(gamma.log_integral(n, j, &s)?);
        stats.push(Arc::new(s));
    }
    let integrals = logq.clone();
    if !linalg::normalize_log(&mut logq).is_finite() {
        return Err(Error::DegenerateWeights { time: n, context: "backward proposal has no mass".into() });
    }
    let counts = rng::multinomial_counts(&mut r, &logq, n_particles);
    let nf = n_particles as f64;
    let mut cloud = BackwardParticleCloud {
        time: n,
        particles: (0..jn)
            .filter(|&j| counts[j] > 0)
            .map(|j| BackwardParticle {
                suffix: PathNode::root(j),
                log_w: (counts[j] as f64 / nf).ln(),
                count: counts[j],
                stat: stats[j].clone(),
                log_integral: integrals[j],
            })
            .collect(),
    };
    let mut out = vec![cloud.clone()];

    for t in (0..n - 1).rev() {
        let time = t + 1;
        let parent_counts = resample_counts(&mut r, &cloud, n_particles);
        let mut children = Vec::new();
        let mut child_logw = Vec::new();
        for (p, &c) in cloud.particles.iter().zip(&parent_counts) {
            if c == 0 {
                continue;
            }
            let a_next = p.regime();
            let mut cand_stats = Vec::with_capacity(jn);
            let mut cand_int = Vec::with_capacity(jn);
            let mut logq = Vec::with_capacity(jn);
            for j in 0..jn {
                let lq = model.ln_q(j, a_next);
                let s = backward_info_step(model, &p.stat, j, a_next, &ys[t])?;
                let li = if lq == f64::NEG_INFINITY { f64::NEG_INFINITY } else { gamma.log_integral(time, j, &s)? };
                logq.push(lq + li);
                cand_int.push(li);
                cand_stats.push(Arc::new(s));
            }
            let z = linalg::normalize_log(&mut logq);
            if !z.is_finite() {
                return Err(Error::DegenerateWeights { time, context: "backward proposal has no mass".into() });
            }
            let picks = rng::multinomial_counts(&mut r, &logq, c);
            let w_each = z - p.log_integral;
            for (j, &cj) in picks.iter().enumerate() {
                if cj == 0 {
                    continue;
                }
                children.push(BackwardParticle {
                    suffix: PathNode::child(&p.suffix, j),
                    log_w: 0.0,
                    count: cj,
                    stat: cand_stats[j].clone(),
                    log_integral: cand_int[j],
                });
                child_logw.push((cj as f64).ln() + w_each);
            }
        }
        if !linalg::normalize_log(&mut child_logw).is_finite() {
            return Err(Error::DegenerateWeights { time, context: "backward weights vanish".into() });
        }
        for (ch, w) in children.iter_mut().zip(child_logw) {
            ch.log_w = w;
        }
        cloud = BackwardParticleCloud { time, particles: children };
        out.push(cloud.clone());
    }
    out.reverse();
    Ok(out)
}

/// Copies of each distinct particle after resampling `n` times by weight.
/// Skipped when every copy already carries weight `1/n`.
fn resample_counts<R: rand::Rng>(r: &mut R, cloud: &BackwardParticleCloud, n: usize) -> Vec<usize> {
    let nf = n as f64;
    let uniform = cloud
        .particles
        .iter()
        .all(|p| (p.log_w - (p.count as f64 / nf).ln()).abs() < 1e-12);
    if uniform {
        return cloud.particles.iter().map(|p| p.count).collect();
    }
    let lw: Vec<f64> = cloud.particles.iter().map(|p| p.log_w).collect();
    let mut counts = vec![0; lw.len()];
    for i in rng::systematic_resample(r, &lw, n) {
        counts[i] += 1;
    }
    counts
}

/// Plain merge at time `i`: the forward predictive restricted to `ã_i^ℓ`, times
/// the backward statistic of particle `ℓ` divided by its cached integral.
pub fn merge_plain(
    model: &RegimeModel,
    fwd: &ForwardPredictiveMixture,
    bwd: &BackwardParticleCloud,
) -> Result<TimeMarginal> {
    let mut comps = Vec::new();
    for p in &bwd.particles {
        let q = p.stat.as_quadform();
        let lw = p.log_w - p.log_integral;
        for c in fwd.components.iter().filter(|c| c.regime == p.regime()) {
            let mut wn = c.form.product(&q).to_weighted_normal()?;
            wn.log_w += lw;
            comps.push((p.regime(), wn));
        }
    }
    TimeMarginal::from_components(model.n_regimes(), comps, bwd.time)
}

/// One backward particle's contribution to `t_i^N(a_i, z_i)`:
/// `exp(log_base) Q(a_i, ã_{i+1}) exp{-½ z'S̃⁻¹z + z's̃}`.
#[derive(Debug, Clone)]
pub struct RejuvenationTerm {
    pub next_regime: usize,
    /// `log ω̃_{b,i}(a_i) - log Q(a_i, ã_{i+1})`.
    pub log_base: f64,
    /// `(S̃⁻¹, s̃)` with zero constant.
    pub form: GaussianQuadForm,
}

/// `t_i^N(a_i, z_i, y_{i+1:n})` up to the constant `p̃_{i+1}(y_{i+1:n})`.
#[derive(Debug, Clone)]
pub struct RejuvenationMixture {
    pub time: usize,
    pub terms: Vec<RejuvenationTerm>,
}

impl RejuvenationMixture {
    pub fn log_weight(&self, model: &RegimeModel, term: usize, a_i: usize) -> f64 {
        let t = &self.terms[term];
        model.ln_q(a_i, t.next_regime) + t.log_base
    }

    pub fn log_eval(&self, model: &RegimeModel, a_i: usize, z: &DVector<f64>) -> f64 {
        let v: Vec<f64> =
            (0..self.terms.len()).map(|l| self.log_weight(model, l, a_i) + self.terms[l].form.log_eval(z)).collect();
        linalg::log_sum_exp(&v)
    }
}

/// Integrates the backward particles at `i+1` through the transition into `i`.
///
/// For particle `ℓ` with `Δ = (I + H'P̃⁻¹H)⁻¹`, `W = HΔH'` and `r̃ = ν̃ + H̄⁻¹d`
/// (all under `ã_{i+1}`):
///
/// ```text
/// log ω̃_b(a_i) = log ω̃_{i+1} - c̃/2 - log ∫γ_{i+1}p + log Q(a_i, ã_{i+1})
///               - ½ log|H̄| + ½ log|W| - ½ d'H̄⁻¹d + ½ r̃'W r̃
/// S̃⁻¹ = T'H̄⁻¹(T - W H̄⁻¹ T),   s̃ = T'H̄⁻¹(W r̃ - d)
/// ```
pub fn rejuvenation_mixture(model: &RegimeModel, bwd_next: &BackwardParticleCloud) -> Result<RejuvenationMixture> {
    let m = model.state_dim();
    let ident = DMatrix::<f64>::identity(m, m);
    let mut terms = Vec::with_capacity(bwd_next.particles.len());
    for p in &bwd_next.particles {
        let a = p.regime();
        let r = model.regime(a);
        let hbar_inv = model.hbar_inv(a)?;
        let inner = linalg::symmetrized(&ident + r.h.transpose() * &p.stat.p_inv * &r.h);
        let delta = linalg::spd_inverse(&inner, "I + H'P̃⁻¹H")?;
        let w = linalg::symmetrized(&r.h * &delta * r.h.transpose());
        let r_tilde = &p.stat.nu + hbar_inv * &r.d;
        let w_r = &w * &r_tilde;
        // |W| through |H̄||Δ| keeps the determinant exact when W is tiny
        let logdet_w = model.hbar_logdet(a)? + linalg::logdet(&linalg::cholesky(&delta, "Δ")?);
        let log_base = p.log_w - 0.5 * p.stat.c_tilde - p.log_integral - 0.5 * model.hbar_logdet(a)? + 0.5 * logdet_w
            - 0.5 * r.d.dot(&(hbar_inv * &r.d))
            + 0.5 * r_tilde.dot(&w_r);
        let s_inv = r.t.transpose() * hbar_inv * (&r.t - &w * hbar_inv * &r.t);
        let s = r.t.transpose() * hbar_inv * (&w_r - &r.d);
        terms.push(RejuvenationTerm { next_regime: a, log_base, form: GaussianQuadForm::new(s_inv, s, 0.0) });
    }
    Ok(RejuvenationMixture { time: bwd_next.time - 1, terms })
}

/// Rejuvenated merge at time `i`: `p^N(a_i, z | y_{1:i-1}) g(a_i, z; y_i) t_i^N(a_i, z)`
/// for every regime. `rej = None` is the last time index, where `t` is one.
pub fn merge_rejuvenated(
    model: &RegimeModel,
    fwd: &ForwardPredictiveMixture,
    rej: Option<&RejuvenationMixture>,
    y: &DVector<f64>,
    time: usize,
) -> Result<TimeMarginal> {
    let jn = model.n_regimes();
    let obs: Vec<GaussianQuadForm> = (0..jn).map(|j| GaussianQuadForm::from_observation(model, j, y)).collect();
    let mut comps = Vec::new();
    for c in &fwd.components {
        let a = c.regime;
        let base = c.form.product(&obs[a]);
        match rej {
            None => comps.push((a, base.to_weighted_normal()?)),
            Some(rej) => {
                for (l, term) in rej.terms.iter().enumerate() {
                    let lw = rej.log_weight(model, l, a);
                    if lw == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut wn = base.product(&term.form).to_weighted_normal()?;
                    wn.log_w += lw;
                    comps.push((a, wn));
                }
            }
        }
    }
    TimeMarginal::from_components(jn, comps, time)
}

/// Everything produced by a two-filter run.
#[derive(Debug, Clone)]
pub struct TwoFilterOutput {
    pub gamma: ArtificialDensitySchedule,
    pub predictive: Vec<ForwardPredictiveMixture>,
    pub backward: Vec<BackwardParticleCloud>,
}

impl TwoFilterOutput {
    pub fn run(
        model: &RegimeModel,
        fwd: &ForwardPass,
        ys: &[DVector<f64>],
        n_particles: usize,
        seed: u64,
        full_mixture: bool,
    ) -> Result<Self> {
        if fwd.len() != ys.len() {
            return Err(Error::Validation("forward pass and observations differ in length".into()));
        }
        let gamma = default_gamma_schedule(model, fwd, full_mixture)?;
        let predictive = forward_predictive_mixtures(model, fwd)?;
        let backward = backward_filter_pass(model, ys, &gamma, n_particles, seed)?;
        Ok(Self { gamma, predictive, backward })
    }

    pub fn plain_marginals(&self, model: &RegimeModel) -> Result<SmoothingMarginals> {
        let times = self
            .predictive
            .iter()
            .zip(&self.backward)
            .map(|(f, b)| merge_plain(model, f, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(SmoothingMarginals { times })
    }

    pub fn rejuvenation_mixtures(&self, model: &RegimeModel) -> Result<Vec<RejuvenationMixture>> {
        self.backward[1..].iter().map(|b| rejuvenation_mixture(model, b)).collect()
    }

    pub fn rejuvenated_marginals(&self, model: &RegimeModel, ys: &[DVector<f64>]) -> Result<SmoothingMarginals> {
        let n = ys.len();
        let rej = self.rejuvenation_mixtures(model)?;
        let times = (0..n)
            .map(|t| merge_rejuvenated(model, &self.predictive[t], rej.get(t), &ys[t], t + 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(SmoothingMarginals { times })
    }
}
