//! Rao-Blackwellized sequential Monte Carlo for conditionally linear Gaussian
//! models with Markov regime switching.
//!
//! The regime `a_i` is simulated while the continuous state `z_i` is
//! integrated out with Kalman recursions. Filters, two smoothers (backward
//! simulation and two-filter), an exact enumeration oracle, a two-factor
//! commodity model and Monte Carlo EM calibration are provided.

pub mod error;
pub mod cmaes;
pub mod commodity;
pub mod em;
pub mod experiment;
pub mod ffbs;
pub mod forward;
pub mod kalman;
pub mod linalg;
pub mod marginals;
pub mod model;
pub mod oracle;
pub mod quadform;
pub mod rng;
pub mod simulate;
pub mod two_filter;

pub use error::{Error, Result};
pub use forward::{ForwardPass, ParticleCloud, SelectionScheme};
pub use kalman::{BackwardInfoStat, FfbsBackwardStat, KalmanStat};
pub use model::{RegimeModel, RegimeParams};
pub use quadform::{GaussianQuadForm, WeightedNormal};
pub use marginals::{SmoothingMarginals, TimeMarginal};
