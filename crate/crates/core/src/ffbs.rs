//! Backward simulation of regime trajectories from a forward pass.
//!
//! Plain sampling restricts `ã_i` to the regimes carried by the forward cloud
//! at time `i`. The rejuvenated sampler integrates over every ancestor at
//! `i-1` and every regime at `i`, so `ã_i` ranges over all of `{1..J}`.
//!
//! Trajectories sharing the same sampled suffix `ã_{i+1:n}` share their
//! backward statistics, so the sampler works on groups of identical suffixes
//! and draws the children of each group multinomially.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::forward::{ForwardPass, OffspringTable, ParticleCloud};
use crate::kalman::{gaussian_ffbs_weight, FfbsBackwardStat};
use crate::linalg;
use crate::marginals::{SmoothingMarginals, TimeMarginal};
use crate::model::RegimeModel;
use crate::oracle::rts_given_regimes;
use crate::quadform::WeightedNormal;
use crate::rng;

/// A sampled regime path `ã_{1:n}` with the backward statistics met along the way.
#[derive(Debug, Clone)]
pub struct BackwardTrajectory {
    pub regimes: Vec<usize>,
    /// `stats[i]` is the statistic of the suffix `ã_{i:n}` (shared between trajectories).
    pub stats: Vec<Arc<FfbsBackwardStat>>,
}

#[derive(Clone)]
struct Group {
    /// `ã_{i:n}` in reverse time order.
    regimes_rev: Vec<usize>,
    stats_rev: Vec<Arc<FfbsBackwardStat>>,
    count: usize,
}

impl Group {
    fn head(&self) -> (usize, &FfbsBackwardStat) {
        (*self.regimes_rev.last().unwrap(), self.stats_rev.last().unwrap())
    }

    fn child(&self, regime: usize, stat: FfbsBackwardStat, count: usize) -> Group {
        let mut regimes_rev = self.regimes_rev.clone();
        regimes_rev.push(regime);
        let mut stats_rev = self.stats_rev.clone();
        stats_rev.push(Arc::new(stat));
        Group { regimes_rev, stats_rev, count }
    }
}

/// Square-root factors of the filtered covariances of a cloud.
fn cloud_factors(cloud: &ParticleCloud) -> Vec<DMatrix<f64>> {
    cloud.particles.iter().map(|p| linalg::psd_factor(&p.stat.cov)).collect()
}

fn table_factors(table: &OffspringTable) -> Vec<Option<DMatrix<f64>>> {
    table
        .entries
        .iter()
        .map(|e| if e.log_w > f64::NEG_INFINITY { Some(linalg::psd_factor(&e.stat.cov)) } else { None })
        .collect()
}

fn check_inputs(fwd: &ForwardPass, ys: &[DVector<f64>], n_tilde: usize) -> Result<()> {
    if fwd.is_empty() || fwd.len() != ys.len() {
        return Err(Error::Validation("forward pass and observations differ in length".into()));
    }
    if n_tilde == 0 {
        return Err(Error::Validation("backward trajectory count must be at least 1".into()));
    }
    Ok(())
}

fn expand(groups: Vec<Group>) -> Vec<BackwardTrajectory> {
    let mut out = Vec::new();
    for g in groups {
        let mut regimes = g.regimes_rev.clone();
        regimes.reverse();
        let mut stats = g.stats_rev.clone();
        stats.reverse();
        for _ in 0..g.count {
            out.push(BackwardTrajectory { regimes: regimes.clone(), stats: stats.clone() });
        }
    }
    out
}

/// Splits `count` draws over regimes from normalized log-probabilities.
fn split_by_regime<R: Rng>(r: &mut R, log_p: &[f64], regime_of: impl Fn(usize) -> usize, jn: usize, count: usize) -> Vec<usize> {
    let counts = rng::multinomial_counts(r, log_p, count);
    let mut per = vec![0; jn];
    for (k, c) in counts.into_iter().enumerate() {
        per[regime_of(k)] += c;
    }
    per
}

/// Plain backward simulation: `ã_i` is drawn among the forward particles at `i` with
/// weights `ω_i^k Q(a_i^k, ã_{i+1}) |Λ_i^k|^{-1/2} exp{-η_i^k/2}`.
pub fn ffbs_sample_plain(
    model: &RegimeModel,
    fwd: &ForwardPass,
    ys: &[DVector<f64>],
    n_tilde: usize,
    seed: u64,
) -> Result<Vec<BackwardTrajectory>> {
    check_inputs(fwd, ys, n_tilde)?;
    let n = ys.len();
    let jn = model.n_regimes();
    let mut r = rng::stream(seed, 1);
    let last = &fwd.clouds[n - 1];
    let per = split_by_regime(&mut r, &last.log_weights(), |k| last.particles[k].regime(), jn, n_tilde);
    let mut groups: Vec<Group> = per
        .iter()
        .enumerate()
        .filter(|(_, c)| **c > 0)
        .map(|(j, &c)| Group {
            regimes_rev: vec![j],
            stats_rev: vec![Arc::new(FfbsBackwardStat::terminal(model, j, &ys[n - 1]))],
            count: c,
        })
        .collect();
    for t in (0..n - 1).rev() {
        let cloud = &fwd.clouds[t];
        let factors = cloud_factors(cloud);
        let mut next = Vec::new();
        for g in &groups {
            let (a_next, stat) = g.head();
            let (omega, lambda) = stat.propagate(model, a_next);
            let mut lw: Vec<f64> = cloud
                .particles
                .iter()
                .zip(&factors)
                .map(|(p, f)| {
                    let lq = model.ln_q(p.regime(), a_next);
                    if lq == f64::NEG_INFINITY || p.log_w == f64::NEG_INFINITY {
                        return f64::NEG_INFINITY;
                    }
                    p.log_w + lq + gaussian_ffbs_weight(&p.stat.mean, f, &omega, &lambda)
                })
                .collect();
            if !linalg::normalize_log(&mut lw).is_finite() {
                return Err(Error::DegenerateWeights { time: t + 1, context: "backward simulation weights vanish".into() });
            }
            let per = split_by_regime(&mut r, &lw, |k| cloud.particles[k].regime(), jn, g.count);
            for (j, &c) in per.iter().enumerate() {
                if c > 0 {
                    let s = FfbsBackwardStat::from_parts(model, omega.clone(), lambda.clone(), j, &ys[t]);
                    next.push(g.child(j, s, c));
                }
            }
        }
        groups = next;
    }
    Ok(expand(groups))
}

/// Log-probabilities of `ã_i = j` under the rejuvenated kernel, before normalization.
///
/// `table` holds every `(ancestor at i-1, j)` pair with its normalized
/// `log ω̃_i^{j,k}` and filtered moments after `y_i`. With `next = None`
/// (time `n`) the weights are the table masses per regime.
pub fn rejuvenated_log_weights(
    model: &RegimeModel,
    table: &OffspringTable,
    factors: &[Option<DMatrix<f64>>],
    next: Option<(usize, &DMatrix<f64>, &DVector<f64>)>,
) -> Vec<f64> {
    let jn = model.n_regimes();
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); jn];
    for (e, f) in table.entries.iter().zip(factors) {
        let Some(f) = f else { continue };
        let term = match next {
            None => e.log_w,
            Some((_, omega, lambda)) => e.log_w + gaussian_ffbs_weight(&e.stat.mean, f, omega, lambda),
        };
        per[e.regime].push(term);
    }
    (0..jn)
        .map(|j| {
            let lq = match next {
                None => 0.0,
                Some((a_next, _, _)) => model.ln_q(j, a_next),
            };
            if lq == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                lq + linalg::log_sum_exp(&per[j])
            }
        })
        .collect()
}

/// Rejuvenated backward simulation: `ã_i` is drawn from `{1..J}` after summing over all ancestors at `i-1`.
pub fn ffbs_sample_rejuvenated(
    model: &RegimeModel,
    fwd: &ForwardPass,
    ys: &[DVector<f64>],
    n_tilde: usize,
    seed: u64,
) -> Result<Vec<BackwardTrajectory>> {
    check_inputs(fwd, ys, n_tilde)?;
    let n = ys.len();
    let jn = model.n_regimes();
    let mut r = rng::stream(seed, 2);
    let table = &fwd.tables[n - 1];
    let mut lw = rejuvenated_log_weights(model, table, &table_factors(table), None);
    if !linalg::normalize_log(&mut lw).is_finite() {
        return Err(Error::DegenerateWeights { time: n, context: "rejuvenated weights vanish".into() });
    }
    let per = rng::multinomial_counts(&mut r, &lw, n_tilde);
    let mut groups: Vec<Group> = per
        .iter()
        .enumerate()
        .filter(|(_, c)| **c > 0)
        .map(|(j, &c)| Group {
            regimes_rev: vec![j],
            stats_rev: vec![Arc::new(FfbsBackwardStat::terminal(model, j, &ys[n - 1]))],
            count: c,
        })
        .collect();
    for t in (0..n - 1).rev() {
        let table = &fwd.tables[t];
        let factors = table_factors(table);
        let mut next = Vec::new();
        for g in &groups {
            let (a_next, stat) = g.head();
            let (omega, lambda) = stat.propagate(model, a_next);
            let mut lw = rejuvenated_log_weights(model, table, &factors, Some((a_next, &omega, &lambda)));
            if !linalg::normalize_log(&mut lw).is_finite() {
                return Err(Error::DegenerateWeights { time: t + 1, context: "rejuvenated weights vanish".into() });
            }
            let per = rng::multinomial_counts(&mut r, &lw, g.count);
            for (j, &c) in per.iter().enumerate() {
                if c > 0 {
                    let s = FfbsBackwardStat::from_parts(model, omega.clone(), lambda.clone(), j, &ys[t]);
                    next.push(g.child(j, s, c));
                }
            }
        }
        groups = next;
    }
    debug_assert!(groups.iter().all(|g| g.regimes_rev.iter().all(|&a| a < jn)));
    Ok(expand(groups))
}

/// Frequencies of the sampled regimes, with state moments from the
/// regime-conditional RTS smoother averaged over trajectories.
pub fn marginal_estimate(
    model: &RegimeModel,
    ys: &[DVector<f64>],
    trajectories: &[BackwardTrajectory],
) -> Result<SmoothingMarginals> {
    if trajectories.is_empty() {
        return Err(Error::Validation("no trajectories".into()));
    }
    let n = ys.len();
    let mut unique: BTreeMap<&[usize], usize> = BTreeMap::new();
    for t in trajectories {
        *unique.entry(t.regimes.as_slice()).or_default() += 1;
    }
    let total = trajectories.len() as f64;
    let mut comps: Vec<Vec<(usize, WeightedNormal)>> = vec![Vec::new(); n];
    for (seq, count) in unique {
        let rts = rts_given_regimes(model, seq, ys)?;
        let lw = (count as f64 / total).ln();
        for (i, s) in rts.smoothed.into_iter().enumerate() {
            comps[i].push((seq[i], WeightedNormal { log_w: lw, mean: s.mean, cov: s.cov }));
        }
    }
    let times = comps
        .into_iter()
        .enumerate()
        .map(|(i, c)| TimeMarginal::from_components(model.n_regimes(), c, i + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(SmoothingMarginals { times })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{forward_pass, SelectionScheme};
    use crate::kalman::ffbs_backward_stats;
    use crate::model::scalar_model;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn data() -> Vec<DVector<f64>> {
        [0.2, 0.9, 1.3, 1.2, 1.9, 2.6].iter().map(|&y| v1(y)).collect()
    }

    #[test]
    fn single_regime_paths() {
        let m = scalar_model(vec![1.0], DMatrix::from_element(1, 1, 1.0), &[(0.1, 0.9, 0.2, 0.0, 1.0, 0.5)], 0.0, 1.0)
            .unwrap();
        let ys = data();
        let fwd = forward_pass(&m, &ys, 10, SelectionScheme::KlOs, 1).unwrap();
        let a = ffbs_sample_plain(&m, &fwd, &ys, 7, 2).unwrap();
        let b = ffbs_sample_rejuvenated(&m, &fwd, &ys, 7, 2).unwrap();
        assert_eq!(a.len(), 7);
        for t in a.iter().chain(&b) {
            assert!(t.regimes.iter().all(|&r| r == 0));
        }
        let ma = marginal_estimate(&m, &ys, &a).unwrap();
        let mb = marginal_estimate(&m, &ys, &b).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn carried_stats_match_recomputation() {
        let m = RegimeModel::scalar_switching_benchmark();
        let ys = data();
        let fwd = forward_pass(&m, &ys, 30, SelectionScheme::KlOs, 3).unwrap();
        for trajs in [
            ffbs_sample_plain(&m, &fwd, &ys, 20, 4).unwrap(),
            ffbs_sample_rejuvenated(&m, &fwd, &ys, 20, 4).unwrap(),
        ] {
            for t in &trajs {
                let fresh = ffbs_backward_stats(&m, &t.regimes, &ys).unwrap();
                for (a, b) in t.stats.iter().zip(&fresh) {
                    assert!((&a.omega_hat - &b.omega_hat).abs().max() < 1e-10);
                    assert!((&a.lambda_hat - &b.lambda_hat).abs().max() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn frequencies() {
        let m = RegimeModel::scalar_switching_benchmark();
        let ys: Vec<_> = data().into_iter().take(3).collect();
        let mk = |r: Vec<usize>| BackwardTrajectory { regimes: r, stats: vec![] };
        let est = marginal_estimate(&m, &ys, &[mk(vec![0, 0, 1]), mk(vec![0, 1, 1])]).unwrap();
        assert_eq!(est.times[0].probs, vec![1.0, 0.0]);
        assert!((est.times[1].probs[0] - 0.5).abs() < 1e-15);
        assert_eq!(est.times[2].probs, vec![0.0, 1.0]);
    }
}
