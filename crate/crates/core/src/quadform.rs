//! Unnormalized Gaussian functions in precision form.
//!
//! A [`GaussianQuadForm`] represents `z ↦ exp{-½ z'Az + z'b - ½c}`. Every
//! merge and marginalization in the smoothers is a product of such forms
//! followed by an integral over `z`.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, LOG_2PI};
use crate::model::RegimeModel;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianQuadForm {
    /// Precision-like matrix (symmetric positive semidefinite).
    pub a: DMatrix<f64>,
    /// Linear term.
    pub b: DVector<f64>,
    /// Log-constant, entering as `-½ c`.
    pub c: f64,
}

/// A weighted Gaussian component `exp(log_w) N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedNormal {
    pub log_w: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianQuadForm {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c: f64) -> Self {
        debug_assert_eq!(a.nrows(), b.len());
        Self { a: linalg::symmetrized(a), b, c }
    }

    /// The constant function 1.
    pub fn unit(dim: usize) -> Self {
        Self { a: DMatrix::zeros(dim, dim), b: DVector::zeros(dim), c: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// `log N(z; mean, cov)` as a quadratic form in `z`.
    pub fn from_gaussian(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let ch = linalg::cholesky(cov, "Gaussian covariance")?;
        let a = linalg::symmetrized(ch.inverse());
        let b = &a * mean;
        let c = mean.len() as f64 * LOG_2PI + linalg::logdet(&ch) + mean.dot(&b);
        Ok(Self { a, b, c })
    }

    /// `z ↦ g(j, z; y)`, the observation density seen as a function of the state.
    pub fn from_observation(model: &RegimeModel, j: usize, y: &DVector<f64>) -> Self {
        Self {
            a: model.obs_precision(j).clone(),
            b: model.obs_information(j, y),
            c: model.obs_constant(j, y),
        }
    }

    /// Multiplies the represented function by `exp(log_w)`.
    pub fn scaled(mut self, log_w: f64) -> Self {
        self.c -= 2.0 * log_w;
        self
    }

    pub fn log_eval(&self, z: &DVector<f64>) -> f64 {
        -0.5 * (z.transpose() * &self.a * z)[(0, 0)] + self.b.dot(z) - 0.5 * self.c
    }

    /// Pointwise product: `(A₁ + A₂, b₁ + b₂, c₁ + c₂)`.
    pub fn product(&self, other: &Self) -> Self {
        Self { a: &self.a + &other.a, b: &self.b + &other.b, c: self.c + other.c }
    }

    fn strict_cholesky(&self) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        if self.a.iter().any(|v| !v.is_finite()) || self.b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonNormalizable("non-finite coefficients".into()));
        }
        Cholesky::new(self.a.clone())
            .ok_or_else(|| Error::NonNormalizable("precision matrix is not positive definite".into()))
    }

    /// `log ∫ exp{-½ z'Az + z'b - ½c} dz = (m/2) log 2π - ½ log|A| + ½ b'A⁻¹b - ½c`.
    pub fn integral_log(&self) -> Result<f64> {
        let ch = self.strict_cholesky()?;
        Ok(self.integral_with(&ch))
    }

    fn integral_with(&self, ch: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
        0.5 * (self.dim() as f64 * LOG_2PI - linalg::logdet(ch) + linalg::norm_sq_inv_chol(ch, &self.b)
            - self.c)
    }

    /// Normalizes the form into a weighted Gaussian: total mass, mean `A⁻¹b`, covariance `A⁻¹`.
    pub fn to_weighted_normal(&self) -> Result<WeightedNormal> {
        let ch = self.strict_cholesky()?;
        let log_w = self.integral_with(&ch);
        let mean = ch.solve(&self.b);
        let cov = linalg::symmetrized(ch.inverse());
        Ok(WeightedNormal { log_w, mean, cov })
    }

    /// Lifts a form on a `dim()`-block into a larger space, placing it at `offset`.
    pub fn embed(&self, total: usize, offset: usize) -> Self {
        let k = self.dim();
        let mut a = DMatrix::zeros(total, total);
        a.view_mut((offset, offset), (k, k)).copy_from(&self.a);
        let mut b = DVector::zeros(total);
        b.rows_mut(offset, k).copy_from(&self.b);
        Self { a, b, c: self.c }
    }
}

/// Free-function spelling of [`GaussianQuadForm::integral_log`].
pub fn quadform_integral(q: &GaussianQuadForm) -> Result<f64> {
    q.integral_log()
}

/// Free-function spelling of [`GaussianQuadForm::product`].
pub fn quadform_product(q1: &GaussianQuadForm, q2: &GaussianQuadForm) -> GaussianQuadForm {
    q1.product(q2)
}

/// Moment-matches a mixture of weighted Gaussians into a single one.
///
/// Returns `None` when the total weight is zero. The weight of the result is
/// the log of the summed weights.
pub fn moment_match(components: &[WeightedNormal]) -> Option<WeightedNormal> {
    let logs: Vec<f64> = components.iter().map(|c| c.log_w).collect();
    let total = linalg::log_sum_exp(&logs);
    if !total.is_finite() {
        return None;
    }
    let dim = components[0].mean.len();
    let mut mean = DVector::zeros(dim);
    for c in components {
        mean += (c.log_w - total).exp() * &c.mean;
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for c in components {
        let w = (c.log_w - total).exp();
        if w == 0.0 {
            continue;
        }
        let dev = &c.mean - &mean;
        cov += w * (&c.cov + &dev * dev.transpose());
    }
    Some(WeightedNormal { log_w: total, mean, cov: linalg::symmetrized(cov) })
}
