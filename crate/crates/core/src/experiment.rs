//! Repeated-run comparison of the smoothers against a reference.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commodity::{TwoFactorParams, DEFAULT_MATURITIES};
use crate::error::{Error, Result};
use crate::ffbs::{ffbs_sample_plain, ffbs_sample_rejuvenated, marginal_estimate};
use crate::forward::{forward_pass, SelectionScheme};
use crate::marginals::{SmoothingMarginals, TimeMarginal};
use crate::model::RegimeModel;
use crate::oracle::{enumerate_posterior, MAX_SEQUENCES};
use crate::rng::derive_seed;
use crate::simulate::simulate;
use crate::two_filter::TwoFilterOutput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ffbs,
    FfbsRejuv,
    TwoFilter,
    TwoFilterRejuv,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ffbs, Method::FfbsRejuv, Method::TwoFilter, Method::TwoFilterRejuv, Method::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ffbs => "ffbs",
            Method::FfbsRejuv => "ffbs-rejuv",
            Method::TwoFilter => "two-filter",
            Method::TwoFilterRejuv => "two-filter-rejuv",
            Method::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown method {s:?}; expected one of ffbs, ffbs-rejuv, two-filter, two-filter-rejuv, oracle")))
    }
}

/// Particle counts used by [`smooth`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmootherSettings {
    /// Forward particles (and backward particles for the two-filter methods).
    pub particles: usize,
    /// Backward trajectories of the FFBS methods.
    pub trajectories: usize,
    pub selection: SelectionScheme,
}

/// Smoothing marginals from one method.
pub fn smooth(
    model: &RegimeModel,
    ys: &[DVector<f64>],
    method: Method,
    settings: &SmootherSettings,
    seed: u64,
) -> Result<SmoothingMarginals> {
    if method == Method::Oracle {
        return oracle_marginals(model, ys);
    }
    if settings.particles == 0 || settings.trajectories == 0 {
        return Err(Error::Validation("particle counts must be positive".into()));
    }
    let fwd = forward_pass(model, ys, settings.particles, settings.selection, seed)?;
    match method {
        Method::Ffbs => marginal_estimate(model, ys, &ffbs_sample_plain(model, &fwd, ys, settings.trajectories, seed)?),
        Method::FfbsRejuv => {
            marginal_estimate(model, ys, &ffbs_sample_rejuvenated(model, &fwd, ys, settings.trajectories, seed)?)
        }
        Method::TwoFilter => TwoFilterOutput::run(model, &fwd, ys, settings.particles, seed, false)?.plain_marginals(model),
        Method::TwoFilterRejuv => {
            TwoFilterOutput::run(model, &fwd, ys, settings.particles, seed, false)?.rejuvenated_marginals(model, ys)
        }
        Method::Oracle => unreachable!(),
    }
}

/// Exact marginals by enumeration.
pub fn oracle_marginals(model: &RegimeModel, ys: &[DVector<f64>]) -> Result<SmoothingMarginals> {
    let or = enumerate_posterior(model, ys)?;
    let times = or
        .smoothing
        .iter()
        .zip(or.state_mean.iter().zip(&or.state_cov))
        .map(|(p, (mean, cov))| TimeMarginal {
            probs: p.clone(),
            mean: mean.clone(),
            cov: cov.clone(),
            by_regime: vec![None; p.len()],
        })
        .collect();
    Ok(SmoothingMarginals { times })
}

/// Commodity model given by its SDE parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommoditySource {
    #[serde(default)]
    pub params: TwoFactorParams,
    #[serde(default = "default_maturities")]
    pub maturities: Vec<usize>,
}

fn default_maturities() -> Vec<usize> {
    DEFAULT_MATURITIES.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    /// A model document inline.
    Model(RegimeModel),
    Commodity(CommoditySource),
}

impl ModelSource {
    pub fn build(&self) -> Result<RegimeModel> {
        match self {
            ModelSource::Model(m) => Ok(m.clone()),
            ModelSource::Commodity(c) => c.params.build_clgm(&c.maturities),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source: ModelSource,
    /// Length of the simulated series.
    pub n: usize,
    /// Forward particles of the FFBS methods.
    pub particles: usize,
    /// Backward trajectories of the FFBS methods.
    pub trajectories: usize,
    /// Forward and backward particles of the two-filter methods.
    pub two_filter_particles: usize,
    pub methods: Vec<Method>,
    pub runs: usize,
    /// Trajectories of the rejuvenated FFBS reference when enumeration is too large.
    pub benchmark_particles: usize,
    #[serde(default = "default_selection")]
    pub selection: SelectionScheme,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_selection() -> SelectionScheme {
    SelectionScheme::KlOs
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.n, self.particles, self.trajectories, self.two_filter_particles, self.runs, self.benchmark_particles];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Validation("n, particle counts, runs and benchmark_particles must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Validation("at least one method is required".into()));
        }
        Ok(())
    }

    fn settings(&self, method: Method) -> SmootherSettings {
        let particles = match method {
            Method::TwoFilter | Method::TwoFilterRejuv => self.two_filter_particles,
            _ => self.particles,
        };
        SmootherSettings { particles, trajectories: self.trajectories, selection: self.selection }
    }
}

/// Per-time error and variance of `P̂(a_i = 1 | y_{1:n})` across runs.
#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub methods: Vec<Method>,
    /// The reference `P(a_i = 1 | y_{1:n})`.
    pub benchmark: Vec<f64>,
    pub benchmark_is_exact: bool,
    /// `estimates[run][method][i]`.
    pub estimates: Vec<Vec<Vec<f64>>>,
    /// `error[i][method]`: mean over runs of the absolute difference to the reference.
    pub error: Vec<Vec<f64>>,
    /// `variance[i][method]`: empirical variance over runs of the estimate.
    pub variance: Vec<Vec<f64>>,
}

impl BenchmarkReport {
    /// Time average of a table column.
    pub fn time_average(table: &[Vec<f64>], column: usize) -> f64 {
        table.iter().map(|r| r[column]).sum::<f64>() / table.len() as f64
    }

    pub fn column(&self, method: Method) -> Option<usize> {
        self.methods.iter().position(|&m| m == method)
    }

    fn write_table<W: Write>(&self, table: &[Vec<f64>], w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["time_index".to_string()];
        header.extend(self.methods.iter().map(|m| m.name().to_string()));
        wr.write_record(&header)?;
        for (i, row) in table.iter().enumerate() {
            let mut rec = vec![(i + 1).to_string()];
            rec.extend(row.iter().map(|v| format!("{v:.16e}")));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_error_csv<W: Write>(&self, w: W) -> Result<()> {
        self.write_table(&self.error, w)
    }

    pub fn write_variance_csv<W: Write>(&self, w: W) -> Result<()> {
        self.write_table(&self.variance, w)
    }

    /// Writes `error.csv` and `variance.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_error_csv(std::fs::File::create(dir.join("error.csv"))?)?;
        self.write_variance_csv(std::fs::File::create(dir.join("variance.csv"))?)?;
        Ok(())
    }
}

/// Simulates one series, then runs every method `runs` times with independent seeds.
///
/// The reference is the exact enumeration when `J^n` is within its guard, and
/// otherwise the rejuvenated FFBS smoother with `benchmark_particles`.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let model = cfg.source.build()?;
    let data = simulate(&model, cfg.n, derive_seed(cfg.seed, 0))?;
    let ys = &data.observations;
    let exact = (model.n_regimes() as f64).powi(cfg.n as i32) <= MAX_SEQUENCES;
    let reference = if exact {
        oracle_marginals(&model, ys)?
    } else {
        let s = SmootherSettings {
            particles: cfg.benchmark_particles,
            trajectories: cfg.benchmark_particles,
            selection: cfg.selection,
        };
        smooth(&model, ys, Method::FfbsRejuv, &s, derive_seed(cfg.seed, u64::MAX))?
    };
    let benchmark = reference.regime_probability(0);

    let estimates: Vec<Vec<Vec<f64>>> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let seed = derive_seed(cfg.seed, run as u64 + 1);
            cfg.methods
                .iter()
                .map(|&m| {
                    if m == Method::Oracle {
                        Ok(benchmark.clone())
                    } else {
                        Ok(smooth(&model, ys, m, &cfg.settings(m), seed)?.regime_probability(0))
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let runs = cfg.runs as f64;
    let nm = cfg.methods.len();
    let mut error = vec![vec![0.0; nm]; cfg.n];
    let mut variance = vec![vec![0.0; nm]; cfg.n];
    for i in 0..cfg.n {
        for k in 0..nm {
            let vals: Vec<f64> = estimates.iter().map(|e| e[k][i]).collect();
            error[i][k] = vals.iter().map(|v| (v - benchmark[i]).abs()).sum::<f64>() / runs;
            // shifted by the first run so identical estimates give exactly zero
            let dev: Vec<f64> = vals.iter().map(|v| v - vals[0]).collect();
            let s1: f64 = dev.iter().sum();
            let s2: f64 = dev.iter().map(|d| d * d).sum();
            variance[i][k] = if cfg.runs > 1 { ((s2 - s1 * s1 / runs) / (runs - 1.0)).max(0.0) } else { 0.0 };
        }
    }
    Ok(BenchmarkReport {
        methods: cfg.methods.clone(),
        benchmark,
        benchmark_is_exact: exact,
        estimates,
        error,
        variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(methods: Vec<Method>) -> ExperimentConfig {
        ExperimentConfig {
            source: ModelSource::Model(RegimeModel::scalar_switching_benchmark()),
            n: 6,
            particles: 10,
            trajectories: 10,
            two_filter_particles: 10,
            methods,
            runs: 3,
            benchmark_particles: 50,
            selection: SelectionScheme::KlOs,
            seed: 4,
            output_dir: None,
        }
    }

    #[test]
    fn oracle_against_itself_is_zero() {
        let r = run_benchmark(&tiny(vec![Method::Oracle])).unwrap();
        assert!(r.benchmark_is_exact);
        assert!(r.error.iter().chain(&r.variance).all(|row| row[0] == 0.0));
    }

    #[test]
    fn tables_have_shape_and_replay() {
        let cfg = tiny(Method::ALL.to_vec());
        let a = run_benchmark(&cfg).unwrap();
        let b = run_benchmark(&cfg).unwrap();
        assert_eq!(a.error, b.error);
        assert_eq!(a.error.len(), 6);
        assert!(a.error.iter().all(|r| r.len() == 5 && r.iter().all(|v| v.is_finite())));
        let mut buf = Vec::new();
        a.write_error_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time_index,ffbs,ffbs-rejuv,two-filter,two-filter-rejuv,oracle\n"));
        assert_eq!(text.lines().count(), 7);
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = tiny(vec![Method::Ffbs, Method::TwoFilterRejuv]);
        let s = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        assert!("ffbs-rejuv".parse::<Method>().is_ok());
        assert!("smc".parse::<Method>().is_err());
    }
}
