//! Two-factor spot / convenience-yield model with Markov switching.
//!
//! ```text
//! dS = (r - δ) S dt + σ_a S dW¹
//! dδ = κ(α_a - δ) dt + η_a dW²,      d<W¹, W²> = ρ_a dt
//! ```
//!
//! With `Z = (ln S, δ)` sampled every `τ` years this is a regime-switching
//! linear Gaussian model, and log futures prices are affine in `Z`.

use std::io::{Read, Write};

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector, Matrix2, RowVector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{RegimeModel, RegimeParams};

/// Maturities in weeks of the F1, F4, F6 and F13 contracts.
pub const DEFAULT_MATURITIES: [usize; 4] = [4, 16, 26, 56];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoFactorParams {
    pub kappa: f64,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
    pub eta: Vec<f64>,
    pub rho: Vec<f64>,
    /// Observation noise standard deviation per contract.
    pub g: Vec<f64>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    pub pi: Vec<f64>,
    pub mu1: Vec<f64>,
    #[serde(rename = "Sigma1")]
    pub sigma1: Vec<Vec<f64>>,
    /// Interest rate.
    pub r: f64,
    /// Sampling period in years.
    pub tau: f64,
}

impl Default for TwoFactorParams {
    /// Starting values of the calibration: backwardation is regime 1, contango regime 2.
    fn default() -> Self {
        Self {
            kappa: 5.0,
            alpha: vec![0.1, -0.05],
            sigma: vec![0.4, 0.4],
            eta: vec![0.5, 0.5],
            rho: vec![0.75, 0.65],
            g: vec![0.1; 4],
            q: vec![vec![0.98, 0.02], vec![0.03, 0.97]],
            pi: vec![0.5, 0.5],
            mu1: vec![4.0, 0.0],
            sigma1: vec![vec![0.05, 0.0], vec![0.0, 0.05]],
            r: 0.0296,
            tau: 1.0 / 52.0,
        }
    }
}

/// `(d_h, T_h, H̄_h)` and the lower Cholesky factor `H_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretization {
    pub d: DVector<f64>,
    pub t: DMatrix<f64>,
    pub hbar: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

impl TwoFactorParams {
    pub fn n_regimes(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        let jn = self.alpha.len();
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        if jn == 0 || [self.sigma.len(), self.eta.len(), self.rho.len(), self.pi.len(), self.q.len()] != [jn; 5] {
            return bad("alpha, sigma, eta, rho, pi and Q must have one entry per regime");
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return bad("kappa must be positive");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if self.sigma.iter().chain(&self.eta).chain(&self.g).any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("sigma, eta and g must be positive");
        }
        if self.rho.iter().any(|v| !(v.abs() < 1.0)) {
            return bad("rho must lie in (-1, 1)");
        }
        if self.alpha.iter().any(|v| !v.is_finite()) || !self.r.is_finite() {
            return bad("alpha and r must be finite");
        }
        if self.g.is_empty() {
            return bad("g needs one entry per contract");
        }
        if self.mu1.len() != 2 || self.sigma1.len() != 2 {
            return bad("mu1 and Sigma1 must be two-dimensional");
        }
        Ok(())
    }

    /// Exact transition of `(ln S, δ)` over `h` years under regime `j`.
    pub fn discretize_sde(&self, j: usize, h: f64) -> Result<Discretization> {
        if !(h > 0.0) {
            return Err(Error::Validation("step length must be positive".into()));
        }
        let (k, a, s, e, rho) = (self.kappa, self.alpha[j], self.sigma[j], self.eta[j], self.rho[j]);
        let e1 = -(-k * h).exp_m1();
        let e2 = -(-2.0 * k * h).exp_m1();
        let d = DVector::from_vec(vec![(self.r - a - s * s / 2.0) * h + a * e1 / k, a * e1]);
        let t = DMatrix::from_row_slice(2, 2, &[1.0, -e1 / k, 0.0, (-k * h).exp()]);
        let h11 = s * s * h + e * e * (h + e2 / (2.0 * k) - 2.0 * e1 / k) / (k * k) - 2.0 * rho * e * s * (h - e1 / k) / k;
        let h12 = (rho * e * s - e * e / k) * e1 / k + e * e * e2 / (2.0 * k * k);
        let h22 = e * e * e2 / (2.0 * k);
        let hbar = DMatrix::from_row_slice(2, 2, &[h11, h12, h12, h22]);
        let h = hbar
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite(format!("discretized state covariance of regime {}", j + 1)))?
            .l();
        Ok(Discretization { d, t, hbar, h })
    }

    /// One-period discretizations for every regime.
    pub fn discretize_all(&self) -> Result<Vec<Discretization>> {
        (0..self.n_regimes()).map(|j| self.discretize_sde(j, self.tau)).collect()
    }

    /// `𝖠_m(j)` and `𝖡_m` for `m = 0..=max_m` weeks.
    pub fn term_structure(&self, max_m: usize) -> Result<TermStructure> {
        if max_m == 0 {
            return Err(Error::Validation("maximum maturity must be at least one period".into()));
        }
        let disc = self.discretize_all()?;
        let q = linalg::matrix_from_rows(&self.q, "Q")?;
        let jn = self.n_regimes();
        let tm = Matrix2::from_fn(|r, c| disc[0].t[(r, c)]);
        let mut b = vec![RowVector2::new(1.0, 0.0)];
        let mut a = vec![vec![0.0; jn]];
        for m in 1..=max_m {
            let bp = b[m - 1];
            let ap = &a[m - 1];
            let mut row = Vec::with_capacity(jn);
            for (j, dj) in disc.iter().enumerate() {
                let terms: Vec<f64> = (0..jn).map(|k| linalg::ln_prob(q[(j, k)]) + ap[k]).collect();
                let quad = (bp * &dj.hbar * bp.transpose())[(0, 0)];
                row.push(linalg::log_sum_exp(&terms) + (bp * &dj.d)[(0, 0)] + 0.5 * quad);
            }
            b.push(bp * tm);
            a.push(row);
        }
        Ok(TermStructure { a, b })
    }

    /// The regime-switching linear Gaussian model observed through log futures prices.
    pub fn build_clgm(&self, maturities: &[usize]) -> Result<RegimeModel> {
        self.validate()?;
        if maturities.is_empty() {
            return Err(Error::Validation("at least one maturity is required".into()));
        }
        if maturities.len() != self.g.len() {
            return Err(Error::Validation(format!(
                "{} maturities but {} observation noise scales",
                maturities.len(),
                self.g.len()
            )));
        }
        let disc = self.discretize_all()?;
        let ts = self.term_structure(*maturities.iter().max().unwrap())?;
        let p = maturities.len();
        let mut bmat = DMatrix::zeros(p, 2);
        for (row, &m) in maturities.iter().enumerate() {
            bmat[(row, 0)] = ts.b[m][0];
            bmat[(row, 1)] = ts.b[m][1];
        }
        let g = DMatrix::from_diagonal(&DVector::from_vec(self.g.clone()));
        let regimes = disc
            .into_iter()
            .enumerate()
            .map(|(j, dj)| RegimeParams {
                d: dj.d,
                t: dj.t,
                h: dj.h,
                c: DVector::from_iterator(p, maturities.iter().map(|&m| ts.a[m][j])),
                b: bmat.clone(),
                g: g.clone(),
            })
            .collect();
        RegimeModel::new(
            self.pi.clone(),
            linalg::matrix_from_rows(&self.q, "Q")?,
            regimes,
            DVector::from_vec(self.mu1.clone()),
            linalg::matrix_from_rows(&self.sigma1, "Sigma1")?,
        )
    }

    /// Initial state from the first panel row: the nearest log price and the slope-implied yield.
    pub fn mu1_from_panel(&self, panel: &FuturesPanel) -> Result<Vec<f64>> {
        if panel.maturities.len() < 2 || panel.log_prices.is_empty() {
            return Err(Error::Validation("need two contracts and one date to set the initial state".into()));
        }
        let y = &panel.log_prices[0];
        let span = (panel.maturities[1] as f64 - panel.maturities[0] as f64) * self.tau;
        Ok(vec![y[0], self.r - (y[1] - y[0]) / span])
    }
}

/// Futures term-structure coefficients: `ln F_{t,m} = 𝖠_m(a_t) + 𝖡_m Z_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TermStructure {
    /// `a[m][j] = 𝖠_m(j)`.
    pub a: Vec<Vec<f64>>,
    /// `b[m] = 𝖡_m`.
    pub b: Vec<RowVector2<f64>>,
}

/// Weekly log futures prices with one column per contract.
#[derive(Debug, Clone, PartialEq)]
pub struct FuturesPanel {
    pub dates: Vec<NaiveDate>,
    pub contracts: Vec<String>,
    /// Time to maturity in weeks of each contract column.
    pub maturities: Vec<usize>,
    pub log_prices: Vec<DVector<f64>>,
}

impl FuturesPanel {
    pub fn len(&self) -> usize {
        self.log_prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_prices.is_empty()
    }
}

/// Reads `date,<contract>,...` with prices (not logs); dates as `YYYY-MM-DD`, strictly increasing.
pub fn ingest_futures_csv<R: Read>(rd: R, maturities: &[usize]) -> Result<FuturesPanel> {
    let mut rdr = csv::Reader::from_reader(rd);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 || headers[0].trim() != "date" {
        return Err(Error::Parse { row: 1, message: "header must start with date followed by contract columns".into() });
    }
    let contracts: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    if contracts.len() != maturities.len() {
        return Err(Error::Validation(format!(
            "{} contract columns but {} maturities",
            contracts.len(),
            maturities.len()
        )));
    }
    let mut dates: Vec<NaiveDate> = Vec::new();
    let mut log_prices = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(Error::Parse { row, message: format!("expected {} cells, found {}", headers.len(), rec.len()) });
        }
        let date = NaiveDate::parse_from_str(rec[0].trim(), "%Y-%m-%d")
            .map_err(|e| Error::Parse { row, message: format!("date {:?}: {e}", &rec[0]) })?;
        if let Some(prev) = dates.last() {
            if date <= *prev {
                return Err(Error::Parse { row, message: format!("date {date} does not follow {prev}") });
            }
        }
        let mut y = DVector::zeros(contracts.len());
        for (k, name) in contracts.iter().enumerate() {
            let cell = rec[k + 1].trim();
            let price: f64 = cell
                .parse()
                .map_err(|_| Error::Parse { row, message: format!("{name} is not a number: {cell:?}") })?;
            if !(price > 0.0 && price.is_finite()) {
                return Err(Error::Parse { row, message: format!("{name} must be a positive price, found {cell}") });
            }
            y[k] = price.ln();
        }
        dates.push(date);
        log_prices.push(y);
    }
    if log_prices.is_empty() {
        return Err(Error::Parse { row: 2, message: "no price rows".into() });
    }
    Ok(FuturesPanel { dates, contracts, maturities: maturities.to_vec(), log_prices })
}

/// Writes prices (exponentiated) in the format read by [`ingest_futures_csv`].
pub fn write_futures_csv<W: Write>(panel: &FuturesPanel, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["date".to_string()];
    header.extend(panel.contracts.iter().cloned());
    wr.write_record(&header)?;
    for (d, y) in panel.dates.iter().zip(&panel.log_prices) {
        let mut rec = vec![d.format("%Y-%m-%d").to_string()];
        rec.extend(y.iter().map(|v| format!("{:.17e}", v.exp())));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

/// Wraps simulated log prices into a weekly panel starting at `start`.
pub fn panel_from_log_prices(start: NaiveDate, maturities: &[usize], log_prices: Vec<DVector<f64>>) -> FuturesPanel {
    let contracts = maturities.iter().map(|m| format!("M{m}")).collect();
    let dates = (0..log_prices.len()).map(|i| start + chrono::Duration::weeks(i as i64)).collect();
    FuturesPanel { dates, contracts, maturities: maturities.to_vec(), log_prices }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_entries() {
        let p = TwoFactorParams::default();
        let d = p.discretize_sde(0, 0.1).unwrap();
        assert!((d.hbar[(1, 1)] - 0.25 * (1.0 - (-1.0f64).exp()) / 10.0).abs() < 1e-15);
        assert!((d.hbar[(1, 1)] - 0.015_803_0).abs() < 1e-7);
        assert!((d.t[(0, 1)] - (-0.078_693_9)).abs() < 1e-7);
    }

    #[test]
    fn short_step_limit() {
        let p = TwoFactorParams::default();
        let d = p.discretize_sde(1, 1e-8).unwrap();
        assert!((&d.t - DMatrix::identity(2, 2)).abs().max() < 1e-6);
        assert!(d.d.abs().max() < 1e-6);
        assert!(d.hbar.abs().max() < 1e-6);
    }

    #[test]
    fn b_closed_form() {
        let p = TwoFactorParams::default();
        let ts = p.term_structure(60).unwrap();
        for m in 0..=60 {
            let closed = -(1.0 - (-p.kappa * m as f64 * p.tau).exp()) / p.kappa;
            assert_eq!(ts.b[m][0], 1.0);
            assert!((ts.b[m][1] - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn default_model_builds() {
        let p = TwoFactorParams::default();
        let m = p.build_clgm(&DEFAULT_MATURITIES).unwrap();
        assert_eq!(m.obs_dim(), 4);
        assert_eq!(m.state_dim(), 2);
        let b = &m.regime(0).b;
        assert!((0..4).all(|r| b[(r, 0)] == 1.0));
    }

    #[test]
    fn zero_price_rejected() {
        let csv = "date,F1,F4\n2000-01-05,20.1,20.3\n2000-01-12,0,20.5\n";
        let e = ingest_futures_csv(csv.as_bytes(), &[4, 16]).unwrap_err();
        match e {
            Error::Parse { row, message } => {
                assert_eq!(row, 3);
                assert!(message.contains("F1"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn two_rows_and_round_trip() {
        let csv = "date,F1,F4\n2000-01-05,20.1,20.3\n2000-01-12,21,20.5\n";
        let p = ingest_futures_csv(csv.as_bytes(), &[4, 16]).unwrap();
        assert_eq!(p.len(), 2);
        let mut buf = Vec::new();
        write_futures_csv(&p, &mut buf).unwrap();
        let q = ingest_futures_csv(buf.as_slice(), &[4, 16]).unwrap();
        assert_eq!(p.dates, q.dates);
        for (a, b) in p.log_prices.iter().zip(&q.log_prices) {
            assert!((a - b).abs().max() < 1e-14);
        }
    }
}
