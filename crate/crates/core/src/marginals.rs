//! Per-time smoothing output shared by every smoother.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::quadform::{moment_match, WeightedNormal};

/// `p(a_i, z_i | y_{1:n})` summarized by regime probabilities and Gaussian moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeMarginal {
    /// `P(a_i = j | y_{1:n})`, summing to one.
    pub probs: Vec<f64>,
    /// `E[z_i | y_{1:n}]`.
    pub mean: DVector<f64>,
    /// `Cov(z_i | y_{1:n})`.
    pub cov: DMatrix<f64>,
    /// Moments of `z_i` given `a_i = j`; `log_w` is `log P(a_i = j | y_{1:n})`.
    pub by_regime: Vec<Option<WeightedNormal>>,
}

impl TimeMarginal {
    /// Builds the marginal from unnormalized components tagged with their regime.
    pub fn from_components(n_regimes: usize, components: Vec<(usize, WeightedNormal)>, time: usize) -> Result<Self> {
        let mut per: Vec<Vec<WeightedNormal>> = vec![Vec::new(); n_regimes];
        for (j, c) in components {
            if c.log_w > f64::NEG_INFINITY {
                per[j].push(c);
            }
        }
        let merged: Vec<Option<WeightedNormal>> =
            per.iter().map(|cs| if cs.is_empty() { None } else { moment_match(cs) }).collect();
        let logs: Vec<f64> = merged.iter().map(|m| m.as_ref().map_or(f64::NEG_INFINITY, |c| c.log_w)).collect();
        let total = linalg::log_sum_exp(&logs);
        if !total.is_finite() {
            return Err(Error::DegenerateWeights { time, context: "smoothing merge has no mass".into() });
        }
        let by_regime: Vec<Option<WeightedNormal>> = merged
            .into_iter()
            .map(|m| {
                m.map(|mut c| {
                    c.log_w -= total;
                    c
                })
            })
            .collect();
        let probs: Vec<f64> = logs.iter().map(|l| (l - total).exp()).collect();
        let present: Vec<WeightedNormal> = by_regime.iter().flatten().cloned().collect();
        let all = moment_match(&present).expect("at least one regime has mass");
        Ok(Self { probs, mean: all.mean, cov: all.cov, by_regime })
    }
}

/// Smoothing marginals for `i = 1..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingMarginals {
    pub times: Vec<TimeMarginal>,
}

impl SmoothingMarginals {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `P̂(a_i = j | y_{1:n})` as an `n × J` table.
    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        self.times.iter().map(|t| t.probs.clone()).collect()
    }

    /// `P̂(a_i = regime | y_{1:n})` for every `i`.
    pub fn regime_probability(&self, regime: usize) -> Vec<f64> {
        self.times.iter().map(|t| t.probs[regime]).collect()
    }

    /// Mean absolute difference to a reference `n × J` table.
    pub fn mean_abs_error(&self, reference: &[Vec<f64>]) -> f64 {
        let mut s = 0.0;
        let mut c = 0usize;
        for (t, r) in self.times.iter().zip(reference) {
            for (a, b) in t.probs.iter().zip(r) {
                s += (a - b).abs();
                c += 1;
            }
        }
        s / c as f64
    }

    /// Writes `time,p_1..p_J,mean_1..mean_m` rows.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        if let Some(first) = self.times.first() {
            let mut header = vec!["time".to_string()];
            header.extend((1..=first.probs.len()).map(|j| format!("p_regime_{j}")));
            header.extend((1..=first.mean.len()).map(|k| format!("state_mean_{k}")));
            wr.write_record(&header)?;
        }
        for (i, t) in self.times.iter().enumerate() {
            let mut rec = vec![(i + 1).to_string()];
            rec.extend(t.probs.iter().map(|p| format!("{p:.17e}")));
            rec.extend(t.mean.iter().map(|p| format!("{p:.17e}")));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wn(lw: f64, m: f64, v: f64) -> WeightedNormal {
        WeightedNormal { log_w: lw, mean: DVector::from_element(1, m), cov: DMatrix::from_element(1, 1, v) }
    }

    #[test]
    fn normalizes_and_mixes() {
        let t = TimeMarginal::from_components(
            2,
            vec![(0, wn(1.0f64.ln(), 0.0, 1.0)), (1, wn(2.0f64.ln(), 1.0, 1.0)), (1, wn(1.0f64.ln(), 1.0, 1.0))],
            1,
        )
        .unwrap();
        assert!((t.probs[0] - 0.25).abs() < 1e-15);
        assert!((t.probs.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((t.mean[0] - 0.75).abs() < 1e-15);
        assert!((t.cov[(0, 0)] - (1.0 + 0.75 * 0.25)).abs() < 1e-14);
    }

    #[test]
    fn empty_regime_is_none() {
        let t = TimeMarginal::from_components(3, vec![(2, wn(-700.0, 0.0, 1.0))], 4).unwrap();
        assert_eq!(t.probs, vec![0.0, 0.0, 1.0]);
        assert!(t.by_regime[0].is_none());
        assert!(TimeMarginal::from_components(2, vec![], 4).is_err());
    }
}
