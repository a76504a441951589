//! Exact inference for small instances: the Rauch-Tung-Striebel smoother for
//! a fixed regime sequence and brute-force enumeration of all `J^n` sequences.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kalman::{kalman_init_with_loglik, kalman_predict, kalman_predict_update, kalman_update, KalmanStat};
use crate::linalg;
use crate::model::RegimeModel;

/// Largest number of regime sequences [`enumerate_posterior`] accepts.
pub const MAX_SEQUENCES: f64 = 1e6;

#[derive(Debug, Clone)]
pub struct RtsResult {
    pub filtered: Vec<KalmanStat>,
    pub smoothed: Vec<KalmanStat>,
    /// `cross[i] = Cov(z_{i+1}, z_i | y_{1:n})` for `i < n-1`.
    pub cross: Vec<DMatrix<f64>>,
    /// `log p(y_{1:n} | a_{1:n})`.
    pub log_lik: f64,
}

/// Kalman filter followed by the RTS backward pass, for regimes `a` (0-based).
pub fn rts_given_regimes(model: &RegimeModel, a: &[usize], ys: &[DVector<f64>]) -> Result<RtsResult> {
    if a.is_empty() || a.len() != ys.len() {
        return Err(Error::Validation("regimes and observations must be nonempty and of equal length".into()));
    }
    let n = a.len();
    let mut filtered = Vec::with_capacity(n);
    let (s, mut log_lik) = kalman_init_with_loglik(model, a[0], &ys[0])?;
    filtered.push(s);
    for i in 1..n {
        let (s, ll) = kalman_predict_update(model, &filtered[i - 1], a[i], &ys[i])?;
        log_lik += ll;
        filtered.push(s);
    }
    let mut smoothed = filtered.clone();
    let mut cross = vec![DMatrix::zeros(model.state_dim(), model.state_dim()); n.saturating_sub(1)];
    for i in (0..n.saturating_sub(1)).rev() {
        let f = &filtered[i];
        let pred = kalman_predict(model, f, a[i + 1]);
        let ch = linalg::cholesky(&pred.cov, "predicted covariance")?;
        let t = &model.regime(a[i + 1]).t;
        // C = P T' P_pred⁻¹
        let gain = ch.solve(&(t * &f.cov)).transpose();
        let next = &smoothed[i + 1];
        let mean = &f.mean + &gain * (&next.mean - &pred.mean);
        let cov = linalg::symmetrized(&f.cov + &gain * (&next.cov - &pred.cov) * gain.transpose());
        cross[i] = &next.cov * gain.transpose();
        smoothed[i] = KalmanStat { mean, cov };
    }
    Ok(RtsResult { filtered, smoothed, cross, log_lik })
}

/// `log p(y_{1:n}, a_{1:n})`.
pub fn sequence_log_joint(model: &RegimeModel, a: &[usize], ys: &[DVector<f64>]) -> Result<f64> {
    let mut lp = model.ln_pi(a[0]);
    for w in a.windows(2) {
        lp += model.ln_q(w[0], w[1]);
    }
    if lp == f64::NEG_INFINITY {
        return Ok(lp);
    }
    Ok(lp + rts_given_regimes(model, a, ys)?.log_lik)
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    /// `log p(y_{1:n}, a_{1:n})` for every sequence in lexicographic order.
    pub sequence_log_joint: Vec<f64>,
    pub log_evidence: f64,
    /// `filtering[i][j] = P(a_i = j | y_{1:i})`.
    pub filtering: Vec<Vec<f64>>,
    /// `smoothing[i][j] = P(a_i = j | y_{1:n})`.
    pub smoothing: Vec<Vec<f64>>,
    /// `pairwise[i][j][k] = P(a_i = j, a_{i+1} = k | y_{1:n})`.
    pub pairwise: Vec<Vec<Vec<f64>>>,
    /// `E[z_i | y_{1:n}]`.
    pub state_mean: Vec<DVector<f64>>,
    /// `Cov(z_i | y_{1:n})`.
    pub state_cov: Vec<DMatrix<f64>>,
}

impl OracleResult {
    /// Regime sequence for a lexicographic index.
    pub fn sequence(&self, index: usize, n_regimes: usize) -> Vec<usize> {
        decode(index, n_regimes, self.smoothing.len())
    }
}

fn decode(mut index: usize, j: usize, n: usize) -> Vec<usize> {
    let mut out = vec![0; n];
    for i in (0..n).rev() {
        out[i] = index % j;
        index /= j;
    }
    out
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn check_size(model: &RegimeModel, n: usize) -> Result<()> {
    let count = (model.n_regimes() as f64).powi(n as i32);
    if count > MAX_SEQUENCES {
        return Err(Error::InstanceTooLarge { sequences: count, limit: MAX_SEQUENCES });
    }
    if n == 0 {
        return Err(Error::Validation("need at least one observation".into()));
    }
    Ok(())
}

struct Walker<'a> {
    model: &'a RegimeModel,
    ys: &'a [DVector<f64>],
    leaves: Vec<f64>,
    /// Running `log Σ p(a_{1:i}, y_{1:i})` per `(i, a_i)`.
    prefix: Vec<Vec<f64>>,
}

impl Walker<'_> {
    /// Depth-first walk reusing the Kalman pass of the shared prefix.
    fn visit(&mut self, depth: usize, prev: Option<(&KalmanStat, usize)>, log_joint: f64) -> Result<()> {
        let jn = self.model.n_regimes();
        let last = depth + 1 == self.ys.len();
        for j in 0..jn {
            let (stat, lp) = match prev {
                None => {
                    let (s, ll) = kalman_init_with_loglik(self.model, j, &self.ys[0])?;
                    (s, self.model.ln_pi(j) + ll)
                }
                Some((s_prev, a_prev)) => {
                    let lq = self.model.ln_q(a_prev, j);
                    if lq == f64::NEG_INFINITY {
                        self.skip(depth, j);
                        continue;
                    }
                    let pred = kalman_predict(self.model, s_prev, j);
                    let (s, ll) = kalman_update(self.model, &pred, j, &self.ys[depth])?;
                    (s, lq + ll)
                }
            };
            let lj = log_joint + lp;
            if lj == f64::NEG_INFINITY {
                self.skip(depth, j);
                continue;
            }
            self.prefix[depth][j] = log_add(self.prefix[depth][j], lj);
            if last {
                self.leaves.push(lj);
            } else {
                self.visit(depth + 1, Some((&stat, j)), lj)?;
            }
        }
        Ok(())
    }

    /// Fills the leaves below an impossible prefix with `-inf`.
    fn skip(&mut self, depth: usize, _j: usize) {
        let below = self.ys.len() - depth - 1;
        let count = self.model.n_regimes().pow(below as u32);
        self.leaves.extend(std::iter::repeat(f64::NEG_INFINITY).take(count));
    }
}

/// Exact posterior by enumerating every regime sequence.
pub fn enumerate_posterior(model: &RegimeModel, ys: &[DVector<f64>]) -> Result<OracleResult> {
    check_size(model, ys.len())?;
    let n = ys.len();
    let jn = model.n_regimes();
    let mut w = Walker { model, ys, leaves: Vec::new(), prefix: vec![vec![f64::NEG_INFINITY; jn]; n] };
    w.visit(0, None, 0.0)?;
    let leaves = w.leaves;
    let log_evidence = linalg::log_sum_exp(&leaves);
    if !log_evidence.is_finite() {
        return Err(Error::DegenerateWeights { time: n, context: "all regime sequences have zero probability".into() });
    }
    let filtering = w
        .prefix
        .iter()
        .map(|row| {
            let z = linalg::log_sum_exp(row);
            row.iter().map(|v| (v - z).exp()).collect()
        })
        .collect();

    let m = model.state_dim();
    let mut smoothing = vec![vec![0.0; jn]; n];
    let mut pairwise = vec![vec![vec![0.0; jn]; jn]; n.saturating_sub(1)];
    let mut mean_acc = vec![DVector::zeros(m); n];
    let mut second_acc = vec![DMatrix::zeros(m, m); n];
    for (idx, lj) in leaves.iter().enumerate() {
        let wt = (lj - log_evidence).exp();
        if wt == 0.0 {
            continue;
        }
        let seq = decode(idx, jn, n);
        for i in 0..n {
            smoothing[i][seq[i]] += wt;
            if i + 1 < n {
                pairwise[i][seq[i]][seq[i + 1]] += wt;
            }
        }
        let rts = rts_given_regimes(model, &seq, ys)?;
        for (i, s) in rts.smoothed.iter().enumerate() {
            mean_acc[i] += wt * &s.mean;
            second_acc[i] += wt * (&s.cov + &s.mean * s.mean.transpose());
        }
    }
    let state_cov = second_acc
        .iter()
        .zip(&mean_acc)
        .map(|(s, mu)| linalg::symmetrized(s - mu * mu.transpose()))
        .collect();
    Ok(OracleResult {
        sequence_log_joint: leaves,
        log_evidence,
        filtering,
        smoothing,
        pairwise,
        state_mean: mean_acc,
        state_cov,
    })
}

/// `log p(y_{1:n})` by a separate route: every sequence gets its own Kalman
/// pass from scratch and the joint terms are summed in reverse order.
pub fn log_evidence_by_sequences(model: &RegimeModel, ys: &[DVector<f64>]) -> Result<f64> {
    check_size(model, ys.len())?;
    let n = ys.len();
    let jn = model.n_regimes();
    let total = jn.pow(n as u32);
    let mut acc = f64::NEG_INFINITY;
    for idx in (0..total).rev() {
        let seq = decode(idx, jn, n);
        acc = log_add(acc, sequence_log_joint(model, &seq, ys)?);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::scalar_model;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn single_step_smoothed_is_filtered() {
        let m = RegimeModel::scalar_switching_benchmark();
        let r = rts_given_regimes(&m, &[1], &[v1(0.4)]).unwrap();
        assert_eq!(r.smoothed[0], r.filtered[0]);
    }

    #[test]
    fn independent_states_smooth_to_filtered() {
        let m = scalar_model(vec![1.0], DMatrix::from_element(1, 1, 1.0), &[(0.3, 0.0, 0.5, 0.0, 1.0, 0.2)], 0.0, 1.0)
            .unwrap();
        let ys: Vec<_> = [0.1, 0.9, -0.4].iter().map(|&y| v1(y)).collect();
        let r = rts_given_regimes(&m, &[0, 0, 0], &ys).unwrap();
        for (s, f) in r.smoothed.iter().zip(&r.filtered) {
            assert!((s.mean[0] - f.mean[0]).abs() < 1e-14);
            assert!((s.cov[(0, 0)] - f.cov[(0, 0)]).abs() < 1e-14);
        }
    }

    #[test]
    fn symmetric_regimes_give_half() {
        let q = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]);
        let p = (0.2, 0.8, 0.3, 0.1, 1.0, 0.4);
        let m = scalar_model(vec![0.5, 0.5], q, &[p, p], 0.0, 1.0).unwrap();
        let ys: Vec<_> = [0.1, 0.9, -0.4, 0.3].iter().map(|&y| v1(y)).collect();
        let o = enumerate_posterior(&m, &ys).unwrap();
        for row in o.smoothing.iter().chain(&o.filtering) {
            assert!((row[0] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn evidence_two_routes_agree() {
        let m = RegimeModel::scalar_switching_benchmark();
        let ys: Vec<_> = [0.1, 0.7, 1.1, 1.2, 1.9, 2.0].iter().map(|&y| v1(y)).collect();
        let o = enumerate_posterior(&m, &ys).unwrap();
        let alt = log_evidence_by_sequences(&m, &ys).unwrap();
        assert!((o.log_evidence - alt).abs() < 1e-12);
        let last = o.filtering.last().unwrap();
        let sm = o.smoothing.last().unwrap();
        for j in 0..2 {
            assert!((last[j] - sm[j]).abs() < 1e-12);
        }
        for row in &o.smoothing {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for (i, pair) in o.pairwise.iter().enumerate() {
            for j in 0..2 {
                let s: f64 = pair[j].iter().sum();
                assert!((s - o.smoothing[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn size_guard() {
        let m = RegimeModel::scalar_switching_benchmark();
        let ys = vec![v1(0.0); 25];
        assert!(matches!(enumerate_posterior(&m, &ys), Err(Error::InstanceTooLarge { .. })));
    }
}
