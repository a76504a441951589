//! Seeded random streams and the categorical samplers used everywhere.
//!
//! Every stochastic routine takes a `u64` seed and draws from a ChaCha8
//! generator, so runs replay bit-identically. Independent replicates derive
//! their seeds with [`derive_seed`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SmcRng = ChaCha8Rng;

/// A generator for `seed` on sub-stream `stream`.
pub fn stream(seed: u64, stream: u64) -> SmcRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// SplitMix64 finalizer of `(master, index)`, used for per-run seeds.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws one index from normalized log-probabilities by inverse CDF in index order.
pub fn sample_log_categorical<R: Rng>(rng: &mut R, log_p: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, lp) in log_p.iter().enumerate() {
        if *lp == f64::NEG_INFINITY {
            continue;
        }
        acc += lp.exp();
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Draws `count` indices i.i.d. from normalized log-probabilities.
///
/// Returns per-index counts. Uses sorted uniforms so the cost is
/// `O(count log count + len)`.
pub fn multinomial_counts<R: Rng>(rng: &mut R, log_p: &[f64], count: usize) -> Vec<usize> {
    let mut us: Vec<f64> = (0..count).map(|_| rng.gen()).collect();
    us.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out = vec![0; log_p.len()];
    let last = match log_p.iter().rposition(|lp| *lp > f64::NEG_INFINITY) {
        Some(l) => l,
        None => return out,
    };
    let mut acc = 0.0;
    let mut idx = 0;
    for (i, lp) in log_p.iter().enumerate() {
        if *lp == f64::NEG_INFINITY {
            continue;
        }
        acc += lp.exp();
        let upper = if i == last { f64::INFINITY } else { acc };
        while idx < us.len() && us[idx] < upper {
            out[i] += 1;
            idx += 1;
        }
    }
    out
}

/// Systematic selection: given inclusion probabilities `p` (each in `[0, 1]`)
/// summing to an integer `K`, returns the indices of exactly `K` selected entries.
///
/// Entry `i` is selected with probability `p[i]`.
pub fn systematic_select<R: Rng>(rng: &mut R, p: &[f64]) -> Vec<usize> {
    let u: f64 = rng.gen();
    let mut out = Vec::new();
    let mut acc = 0.0;
    let mut next = u;
    for (i, pi) in p.iter().enumerate() {
        let lo = acc;
        acc += pi;
        // select if [lo, acc) contains u + m for some integer m
        if *pi > 0.0 && next < acc && next >= lo {
            out.push(i);
            next += 1.0;
        }
    }
    // rounding in the running sum can drop the final point
    let want = acc.round() as usize;
    if out.len() < want {
        if let Some(i) = (0..p.len()).rev().find(|i| p[*i] > 0.0 && !out.contains(i)) {
            out.push(i);
            out.sort_unstable();
        }
    }
    out
}

/// Systematic resampling of `count` indices from normalized log-weights.
pub fn systematic_resample<R: Rng>(rng: &mut R, log_w: &[f64], count: usize) -> Vec<usize> {
    let u: f64 = rng.gen();
    let mut out = Vec::with_capacity(count);
    let mut acc = 0.0;
    let last = log_w.iter().rposition(|lw| *lw > f64::NEG_INFINITY).unwrap_or(0);
    let mut i = 0;
    for m in 0..count {
        let target = (u + m as f64) / count as f64;
        while i < last && acc + log_w[i].exp() <= target {
            acc += log_w[i].exp();
            i += 1;
        }
        while i < last && log_w[i] == f64::NEG_INFINITY {
            i += 1;
        }
        out.push(i);
    }
    out
}
