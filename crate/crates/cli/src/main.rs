//! `rbsmc` command-line interface.
//!
//! Exit codes: 0 on success, 1 for invalid input, 2 for numerical failure.
//! Errors are reported on stderr as a single JSON object.

use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rbsmc::commodity::{ingest_futures_csv, DEFAULT_MATURITIES};
use rbsmc::em::{em_run, EmConfig};
use rbsmc::experiment::{run_benchmark, smooth, BenchmarkReport, ExperimentConfig, Method, ModelSource, SmootherSettings};
use rbsmc::forward::forward_pass;
use rbsmc::simulate::{read_observations_csv, simulate};
use rbsmc::{Error, RegimeModel, Result, SelectionScheme};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "rbsmc", version, about = "Particle filtering and smoothing for regime-switching linear Gaussian models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate regimes, states and observations from a model.
    Simulate {
        /// Model JSON (a model document, or {"model": ...} / {"commodity": ...}).
        #[arg(long)]
        config: PathBuf,
        /// Number of time steps.
        #[arg(long, short)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the forward filter and print filtering regime probabilities.
    Filter {
        #[arg(long)]
        config: PathBuf,
        /// Observations: a CSV with y_* columns, or a futures panel starting with a date column.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        particles: usize,
        #[arg(long, value_parser = parse_selection, default_value = "kl-os")]
        selection: SelectionScheme,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Smoothing marginals of the regimes and the state.
    Smooth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// ffbs, ffbs-rejuv, two-filter, two-filter-rejuv or oracle.
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 100)]
        particles: usize,
        /// Backward trajectories of the FFBS methods (defaults to --particles).
        #[arg(long)]
        trajectories: Option<usize>,
        #[arg(long, value_parser = parse_selection, default_value = "kl-os")]
        selection: SelectionScheme,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeated-run comparison of the smoothers; writes error.csv and variance.csv.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides every smoother particle count in the config.
        #[arg(long)]
        particles: Option<usize>,
        /// Output directory (defaults to the config's output_dir, then the current directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo EM calibration of the two-factor commodity model on a futures panel.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// Futures price panel: date column then one column per maturity.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        particles: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Output directory for trace.csv, params.json and posteriors.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_selection(s: &str) -> std::result::Result<SelectionScheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_source(path: &Path) -> Result<ModelSource> {
    let text = std::fs::read_to_string(path)?;
    match serde_json::from_str::<ModelSource>(&text) {
        Ok(s) => Ok(s),
        Err(_) => Ok(ModelSource::Model(RegimeModel::from_json_str(&text)?)),
    }
}

fn load_observations(path: &Path, source: &ModelSource) -> Result<Vec<nalgebra::DVector<f64>>> {
    let mut text = String::new();
    BufReader::new(File::open(path)?).read_to_string(&mut text)?;
    let first = text.split(',').next().unwrap_or("").trim();
    if first == "date" {
        let maturities = match source {
            ModelSource::Commodity(c) => c.maturities.clone(),
            ModelSource::Model(_) => DEFAULT_MATURITIES.to_vec(),
        };
        Ok(ingest_futures_csv(text.as_bytes(), &maturities)?.log_prices)
    } else {
        read_observations_csv(text.as_bytes())
    }
}

fn output(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_probabilities<W: Write>(probs: &[Vec<f64>], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let jn = probs.first().map_or(0, |p| p.len());
    let mut header = vec!["time".to_string()];
    header.extend((1..=jn).map(|j| format!("p_regime_{j}")));
    wr.write_record(&header)?;
    for (i, p) in probs.iter().enumerate() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(p.iter().map(|v| format!("{v:.17e}")));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { config, n, seed, out } => {
            let model = load_source(&config)?.build()?;
            simulate(&model, n, seed)?.write_csv(output(&out)?)
        }
        Command::Filter { config, data, particles, selection, seed, out } => {
            let source = load_source(&config)?;
            let model = source.build()?;
            let ys = load_observations(&data, &source)?;
            if particles == 0 {
                return Err(Error::Validation("particles must be positive".into()));
            }
            let fwd = forward_pass(&model, &ys, particles, selection, seed)?;
            write_probabilities(&fwd.filtering_marginals(model.n_regimes()), output(&out)?)?;
            Ok(())
        }
        Command::Smooth { config, data, method, particles, trajectories, selection, seed, out } => {
            let method: Method = method.parse()?;
            let source = load_source(&config)?;
            let model = source.build()?;
            let ys = load_observations(&data, &source)?;
            let settings = SmootherSettings { particles, trajectories: trajectories.unwrap_or(particles), selection };
            smooth(&model, &ys, method, &settings, seed)?.write_csv(output(&out)?)
        }
        Command::Benchmark { config, seed, particles, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(p) = particles {
                cfg.particles = p;
                cfg.trajectories = p;
                cfg.two_filter_particles = p;
            }
            let dir = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
            let report = run_benchmark(&cfg)?;
            report.write_dir(&dir)?;
            let summary: Vec<_> = report
                .methods
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    json!({
                        "method": m.name(),
                        "mean_error": BenchmarkReport::time_average(&report.error, k),
                        "mean_variance": BenchmarkReport::time_average(&report.variance, k),
                    })
                })
                .collect();
            println!("{}", json!({ "benchmark_is_exact": report.benchmark_is_exact, "methods": summary }));
            Ok(())
        }
        Command::Calibrate { config, data, seed, particles, iterations, out } => {
            let text = std::fs::read_to_string(&config)?;
            let mut cfg: EmConfig = serde_json::from_str(&text)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(p) = particles {
                cfg.particles = p;
            }
            if let Some(it) = iterations {
                cfg.iterations = it;
            }
            let panel = ingest_futures_csv(BufReader::new(File::open(&data)?), &cfg.maturities)?;
            let res = em_run(&cfg, &panel)?;
            std::fs::create_dir_all(&out)?;
            res.write_trace_csv(File::create(out.join("trace.csv"))?)?;
            std::fs::write(out.join("params.json"), serde_json::to_string_pretty(&res.final_params)? + "\n")?;
            res.posteriors.write_csv(File::create(out.join("posteriors.csv"))?)?;
            let ascents = res.trace.iter().filter(|it| it.ascent() >= 0.0).count();
            println!("{}", json!({ "iterations": res.trace.len(), "ascent_iterations": ascents }));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim_end() }));
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
