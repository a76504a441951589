//! Sampling from the generative model and observation CSV I/O.

use std::io::{Read, Write};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::RegimeModel;
use crate::rng;

/// A simulated path: regimes (0-based), states and observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPath {
    pub regimes: Vec<usize>,
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
}

fn std_normal<R: Rng>(r: &mut R, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| r.sample(StandardNormal))
}

fn categorical<R: Rng>(r: &mut R, p: impl Iterator<Item = f64>) -> usize {
    let u: f64 = r.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, pj) in p.enumerate() {
        if pj > 0.0 {
            last = j;
        }
        acc += pj;
        if u < acc {
            return j;
        }
    }
    last
}

/// Draws `(a_{1:n}, z_{1:n}, y_{1:n})`.
pub fn simulate(model: &RegimeModel, n: usize, seed: u64) -> Result<SimulatedPath> {
    if n == 0 {
        return Err(Error::Validation("simulation length must be at least 1".into()));
    }
    let mut r = rng::stream(seed, 7);
    let s1 = linalg::psd_factor(model.sigma1());
    let mut regimes = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    let mut observations = Vec::with_capacity(n);
    for i in 0..n {
        let a = if i == 0 {
            categorical(&mut r, model.pi().iter().copied())
        } else {
            let prev = regimes[i - 1];
            categorical(&mut r, model.q().row(prev).iter().copied())
        };
        let p = model.regime(a);
        let z = if i == 0 {
            model.mu1() + &s1 * std_normal(&mut r, model.state_dim())
        } else {
            &p.d + &p.t * &states[i - 1] + &p.h * std_normal(&mut r, p.h.ncols())
        };
        let y = &p.c + &p.b * &z + &p.g * std_normal(&mut r, p.g.ncols());
        regimes.push(a);
        states.push(z);
        observations.push(y);
    }
    Ok(SimulatedPath { regimes, states, observations })
}

impl SimulatedPath {
    /// Columns `time,regime,z_1..z_m,y_1..y_p`; regimes are written 1-based.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let m = self.states.first().map_or(0, |z| z.len());
        let p = self.observations.first().map_or(0, |y| y.len());
        let mut header = vec!["time".to_string(), "regime".to_string()];
        header.extend((1..=m).map(|k| format!("z_{k}")));
        header.extend((1..=p).map(|k| format!("y_{k}")));
        wr.write_record(&header)?;
        for i in 0..self.regimes.len() {
            let mut rec = vec![(i + 1).to_string(), (self.regimes[i] + 1).to_string()];
            rec.extend(self.states[i].iter().map(|v| format!("{v:.17e}")));
            rec.extend(self.observations[i].iter().map(|v| format!("{v:.17e}")));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Reads the `y_*` columns of an observation file (other columns are ignored).
pub fn read_observations_csv<R: Read>(rd: R) -> Result<Vec<DVector<f64>>> {
    let mut rdr = csv::Reader::from_reader(rd);
    let headers = rdr.headers()?.clone();
    let cols: Vec<usize> =
        headers.iter().enumerate().filter(|(_, h)| h.trim().starts_with("y_")).map(|(i, _)| i).collect();
    if cols.is_empty() {
        return Err(Error::Parse { row: 1, message: "no y_* columns in header".into() });
    }
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut y = DVector::zeros(cols.len());
        for (k, &c) in cols.iter().enumerate() {
            let cell = rec.get(c).unwrap_or("").trim();
            y[k] = cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                row: row + 2,
                message: format!("column {} is not a finite number: {cell:?}", &headers[c]),
            })?;
        }
        out.push(y);
    }
    if out.is_empty() {
        return Err(Error::Parse { row: 2, message: "no observations".into() });
    }
    Ok(out)
}
