//! The conditionally linear Gaussian regime-switching model.
//!
//! Given a regime sequence `a_1..a_n` drawn from a Markov chain `(pi, Q)`:
//!
//! ```text
//! Z_1 ~ N(mu1, Sigma1)
//! Z_i = d[a_i] + T[a_i] Z_{i-1} + H[a_i] eps_i
//! Y_i = c[a_i] + B[a_i] Z_i     + G[a_i] eta_i
//! ```
//!
//! Regimes are 0-based internally; the JSON document and the CLI keep the
//! same 0-based order but human-facing outputs label them `1..J`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, LOG_2PI};

/// Per-regime parameters `(d, T, H, c, B, G)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeParams {
    pub d: DVector<f64>,
    pub t: DMatrix<f64>,
    /// Factor of the state noise covariance, `H̄ = H H'`.
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub b: DMatrix<f64>,
    /// Factor of the observation noise covariance, `Ḡ = G G'`.
    pub g: DMatrix<f64>,
}

#[derive(Debug, Clone)]
struct RegimeCache {
    hbar: DMatrix<f64>,
    hbar_inv: Option<DMatrix<f64>>,
    hbar_logdet: Option<f64>,
    gbar: DMatrix<f64>,
    gbar_inv: DMatrix<f64>,
    gbar_logdet: f64,
    /// `B' Ḡ⁻¹`
    bt_ginv: DMatrix<f64>,
    /// `B' Ḡ⁻¹ B`
    bt_ginv_b: DMatrix<f64>,
}

/// Full parameter set of a regime-switching linear Gaussian model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ModelDocument", into = "ModelDocument")]
pub struct RegimeModel {
    pi: Vec<f64>,
    q: DMatrix<f64>,
    regimes: Vec<RegimeParams>,
    mu1: DVector<f64>,
    sigma1: DMatrix<f64>,
    ln_pi: Vec<f64>,
    ln_q: DMatrix<f64>,
    cache: Vec<RegimeCache>,
}

impl PartialEq for RegimeModel {
    fn eq(&self, other: &Self) -> bool {
        self.pi == other.pi
            && self.q == other.q
            && self.regimes == other.regimes
            && self.mu1 == other.mu1
            && self.sigma1 == other.sigma1
    }
}

const STOCHASTIC_TOL: f64 = 1e-12;

impl RegimeModel {
    /// Validates and assembles a model.
    pub fn new(
        pi: Vec<f64>,
        q: DMatrix<f64>,
        regimes: Vec<RegimeParams>,
        mu1: DVector<f64>,
        sigma1: DMatrix<f64>,
    ) -> Result<Self> {
        let nj = regimes.len();
        if nj == 0 {
            return Err(Error::Validation("at least one regime is required".into()));
        }
        if pi.len() != nj {
            return Err(Error::Validation(format!("pi has length {}, expected {nj}", pi.len())));
        }
        if q.nrows() != nj || q.ncols() != nj {
            return Err(Error::Validation(format!("Q must be {nj}x{nj}")));
        }
        if pi.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::Validation("pi entries must be finite and nonnegative".into()));
        }
        if (pi.iter().sum::<f64>() - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::Validation("pi must sum to 1".into()));
        }
        for i in 0..nj {
            let row = q.row(i);
            if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(Error::Validation(format!("Q row {i} has negative or non-finite entries")));
            }
            if (row.sum() - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Validation(format!("Q row {i} must sum to 1")));
            }
        }
        let m = mu1.len();
        if m == 0 {
            return Err(Error::Validation("state dimension must be positive".into()));
        }
        if sigma1.nrows() != m || sigma1.ncols() != m {
            return Err(Error::Validation("Sigma1 must be m x m".into()));
        }
        if !linalg::is_symmetric(&sigma1, 1e-12) {
            return Err(Error::Validation("Sigma1 must be symmetric".into()));
        }
        linalg::cholesky(&sigma1, "Sigma1")
            .map_err(|_| Error::Validation("Sigma1 must be positive definite".into()))?;
        let p = regimes[0].c.len();
        if p == 0 {
            return Err(Error::Validation("observation dimension must be positive".into()));
        }
        let mut cache = Vec::with_capacity(nj);
        for (j, r) in regimes.iter().enumerate() {
            let dims_ok = r.d.len() == m
                && r.t.shape() == (m, m)
                && r.h.shape() == (m, m)
                && r.c.len() == p
                && r.b.shape() == (p, m)
                && r.g.shape() == (p, p);
            if !dims_ok {
                return Err(Error::Validation(format!(
                    "regime {j}: inconsistent dimensions (expected m={m}, p={p})"
                )));
            }
            let all_finite = r.d.iter().chain(r.t.iter()).chain(r.h.iter()).chain(r.c.iter())
                .chain(r.b.iter()).chain(r.g.iter()).all(|v| v.is_finite());
            if !all_finite {
                return Err(Error::Validation(format!("regime {j}: non-finite parameter")));
            }
            let hbar = linalg::symmetrized(&r.h * r.h.transpose());
            let (hbar_inv, hbar_logdet) = match nalgebra::Cholesky::new(hbar.clone()) {
                Some(ch) => (Some(linalg::symmetrized(ch.inverse())), Some(linalg::logdet(&ch))),
                None => (None, None),
            };
            let gbar = linalg::symmetrized(&r.g * r.g.transpose());
            let gch = nalgebra::Cholesky::new(gbar.clone()).ok_or_else(|| {
                Error::Validation(format!("regime {j}: G G' must be positive definite"))
            })?;
            let gbar_inv = linalg::symmetrized(gch.inverse());
            let bt_ginv = r.b.transpose() * &gbar_inv;
            let bt_ginv_b = linalg::symmetrized(&bt_ginv * &r.b);
            cache.push(RegimeCache {
                hbar,
                hbar_inv,
                hbar_logdet,
                gbar,
                gbar_inv,
                gbar_logdet: linalg::logdet(&gch),
                bt_ginv,
                bt_ginv_b,
            });
        }
        let ln_pi = pi.iter().map(|&p| linalg::ln_prob(p)).collect();
        let ln_q = q.map(linalg::ln_prob);
        Ok(Self { pi, q, regimes, mu1, sigma1, ln_pi, ln_q, cache })
    }

    pub fn n_regimes(&self) -> usize {
        self.regimes.len()
    }

    pub fn state_dim(&self) -> usize {
        self.mu1.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.regimes[0].c.len()
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn ln_pi(&self, j: usize) -> f64 {
        self.ln_pi[j]
    }

    pub fn ln_q(&self, from: usize, to: usize) -> f64 {
        self.ln_q[(from, to)]
    }

    pub fn regime(&self, j: usize) -> &RegimeParams {
        &self.regimes[j]
    }

    pub fn regimes(&self) -> &[RegimeParams] {
        &self.regimes
    }

    pub fn mu1(&self) -> &DVector<f64> {
        &self.mu1
    }

    pub fn sigma1(&self) -> &DMatrix<f64> {
        &self.sigma1
    }

    /// `H̄_j = H_j H_j'`
    pub fn hbar(&self, j: usize) -> &DMatrix<f64> {
        &self.cache[j].hbar
    }

    /// `H̄_j⁻¹`, or a validation error when `H̄_j` is singular.
    pub fn hbar_inv(&self, j: usize) -> Result<&DMatrix<f64>> {
        self.cache[j]
            .hbar_inv
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("regime {j}: H H' is singular")))
    }

    pub fn hbar_logdet(&self, j: usize) -> Result<f64> {
        self.cache[j]
            .hbar_logdet
            .ok_or_else(|| Error::Validation(format!("regime {j}: H H' is singular")))
    }

    /// `Ḡ_j = G_j G_j'`
    pub fn gbar(&self, j: usize) -> &DMatrix<f64> {
        &self.cache[j].gbar
    }

    pub fn gbar_inv(&self, j: usize) -> &DMatrix<f64> {
        &self.cache[j].gbar_inv
    }

    pub fn gbar_logdet(&self, j: usize) -> f64 {
        self.cache[j].gbar_logdet
    }

    /// Observation precision contributed to the state, `B' Ḡ⁻¹ B`.
    pub fn obs_precision(&self, j: usize) -> &DMatrix<f64> {
        &self.cache[j].bt_ginv_b
    }

    /// Observation information vector `B' Ḡ⁻¹ (y - c)`.
    pub fn obs_information(&self, j: usize, y: &DVector<f64>) -> DVector<f64> {
        &self.cache[j].bt_ginv * (y - &self.regimes[j].c)
    }

    /// `p log 2π + log|Ḡ| + ‖y - c‖²_Ḡ`, the constant of `-2 log g` at `z = 0`.
    pub fn obs_constant(&self, j: usize, y: &DVector<f64>) -> f64 {
        let r = y - &self.regimes[j].c;
        let quad = (r.transpose() * &self.cache[j].gbar_inv * &r)[(0, 0)];
        self.obs_dim() as f64 * LOG_2PI + self.cache[j].gbar_logdet + quad
    }

    fn check_regime(&self, j: usize) -> Result<()> {
        if j >= self.n_regimes() {
            return Err(Error::Validation(format!(
                "regime index {j} out of range (J = {})",
                self.n_regimes()
            )));
        }
        Ok(())
    }

    /// `log m(a, z_prev; z)`: log density of `Z_i = z` given `Z_{i-1} = z_prev` in regime `a`.
    pub fn transition_logdensity(&self, a: usize, z_prev: &DVector<f64>, z: &DVector<f64>) -> Result<f64> {
        self.check_regime(a)?;
        let r = &self.regimes[a];
        let resid = z - &r.d - &r.t * z_prev;
        let inv = self.hbar_inv(a)?;
        let quad = (resid.transpose() * inv * &resid)[(0, 0)];
        Ok(-0.5 * (self.state_dim() as f64 * LOG_2PI + self.hbar_logdet(a)? + quad))
    }

    /// `log g(a, z; y)`: log density of `Y_i = y` given `Z_i = z` in regime `a`.
    pub fn observation_logdensity(&self, a: usize, z: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        self.check_regime(a)?;
        let r = &self.regimes[a];
        let resid = y - &r.c - &r.b * z;
        let quad = (resid.transpose() * self.gbar_inv(a) * &resid)[(0, 0)];
        Ok(-0.5 * (self.obs_dim() as f64 * LOG_2PI + self.gbar_logdet(a) + quad))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// The two-regime scalar random-walk model used by the simulated benchmark.
    ///
    /// `d = (0.5, 0)`, `c = (0.1, 0)`, `T = B = 1`, `H̄ = 0.1`, `Ḡ = (0.3, 0.1)`,
    /// `Q = [[0.99, 0.01], [0.03, 0.97]]`, `pi = (0.5, 0.5)`, and a standard
    /// normal initial state.
    pub fn scalar_switching_benchmark() -> Self {
        let one = DMatrix::from_element(1, 1, 1.0);
        let reg = |d: f64, c: f64, gbar: f64| RegimeParams {
            d: DVector::from_element(1, d),
            t: one.clone(),
            h: DMatrix::from_element(1, 1, 0.1f64.sqrt()),
            c: DVector::from_element(1, c),
            b: one.clone(),
            g: DMatrix::from_element(1, 1, gbar.sqrt()),
        };
        Self::new(
            vec![0.5, 0.5],
            DMatrix::from_row_slice(2, 2, &[0.99, 0.01, 0.03, 0.97]),
            vec![reg(0.5, 0.1, 0.3), reg(0.0, 0.0, 0.1)],
            DVector::zeros(1),
            one,
        )
        .expect("benchmark model is valid")
    }
}

/// Serialized form: field names follow the model's symbols, matrices are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    pub pi: Vec<f64>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    #[serde(rename = "T")]
    pub t: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "H")]
    pub h: Vec<Vec<Vec<f64>>>,
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "G")]
    pub g: Vec<Vec<Vec<f64>>>,
    pub mu1: Vec<f64>,
    #[serde(rename = "Sigma1")]
    pub sigma1: Vec<Vec<f64>>,
}

impl TryFrom<ModelDocument> for RegimeModel {
    type Error = Error;

    fn try_from(doc: ModelDocument) -> Result<Self> {
        let nj = doc.pi.len();
        let counts = [doc.d.len(), doc.t.len(), doc.h.len(), doc.c.len(), doc.b.len(), doc.g.len()];
        if counts.iter().any(|&c| c != nj) {
            return Err(Error::Validation(
                "d, T, H, c, B, G must each list one entry per regime".into(),
            ));
        }
        let mut regimes = Vec::with_capacity(nj);
        for j in 0..nj {
            regimes.push(RegimeParams {
                d: DVector::from_vec(doc.d[j].clone()),
                t: linalg::matrix_from_rows(&doc.t[j], "T")?,
                h: linalg::matrix_from_rows(&doc.h[j], "H")?,
                c: DVector::from_vec(doc.c[j].clone()),
                b: linalg::matrix_from_rows(&doc.b[j], "B")?,
                g: linalg::matrix_from_rows(&doc.g[j], "G")?,
            });
        }
        RegimeModel::new(
            doc.pi,
            linalg::matrix_from_rows(&doc.q, "Q")?,
            regimes,
            DVector::from_vec(doc.mu1),
            linalg::matrix_from_rows(&doc.sigma1, "Sigma1")?,
        )
    }
}

impl From<RegimeModel> for ModelDocument {
    fn from(m: RegimeModel) -> Self {
        let rows = linalg::matrix_to_rows;
        ModelDocument {
            pi: m.pi.clone(),
            q: rows(&m.q),
            d: m.regimes.iter().map(|r| r.d.iter().cloned().collect()).collect(),
            t: m.regimes.iter().map(|r| rows(&r.t)).collect(),
            h: m.regimes.iter().map(|r| rows(&r.h)).collect(),
            c: m.regimes.iter().map(|r| r.c.iter().cloned().collect()).collect(),
            b: m.regimes.iter().map(|r| rows(&r.b)).collect(),
            g: m.regimes.iter().map(|r| rows(&r.g)).collect(),
            mu1: m.mu1.iter().cloned().collect(),
            sigma1: rows(&m.sigma1),
        }
    }
}

/// Builds a one-dimensional model from scalars; handy for tests and examples.
pub fn scalar_model(
    pi: Vec<f64>,
    q: DMatrix<f64>,
    params: &[(f64, f64, f64, f64, f64, f64)],
    mu1: f64,
    sigma1: f64,
) -> Result<RegimeModel> {
    let regimes = params
        .iter()
        .map(|&(d, t, hbar, c, b, gbar)| RegimeParams {
            d: DVector::from_element(1, d),
            t: DMatrix::from_element(1, 1, t),
            h: DMatrix::from_element(1, 1, hbar.sqrt()),
            c: DVector::from_element(1, c),
            b: DMatrix::from_element(1, 1, b),
            g: DMatrix::from_element(1, 1, gbar.sqrt()),
        })
        .collect();
    RegimeModel::new(pi, q, regimes, DVector::from_element(1, mu1), DMatrix::from_element(1, 1, sigma1))
}
