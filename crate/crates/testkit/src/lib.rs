//! Numerical oracles for tests.
//!
//! Everything here is deliberately independent of the `rbsmc` implementation:
//! plain adaptive Gauss-Kronrod quadrature and helpers that operate on
//! closures. Nothing in this crate knows about Gaussian algebra.

/// Gauss-Kronrod 7/15 nodes on [-1, 1] (positive half, including 0).
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for i in 0..7 {
        let x = h * XGK[i];
        let s = f(c - x) + f(c + x);
        kron += WGK[i] * s;
        if i % 2 == 1 {
            gauss += WG[i / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Adaptive Gauss-Kronrod integration of `f` over `[a, b]`.
///
/// Bisects the interval with the largest error estimate until the total error
/// estimate drops below `max(abs_tol, rel_tol * |I|)`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> f64 {
    let mut segs = vec![{
        let (v, e) = gk15(&f, a, b);
        (a, b, v, e)
    }];
    for _ in 0..20_000 {
        let total: f64 = segs.iter().map(|s| s.2).sum();
        let err: f64 = segs.iter().map(|s| s.3).sum();
        if err <= abs_tol.max(rel_tol * total.abs()) {
            break;
        }
        let (idx, _) = segs
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.partial_cmp(&y.1 .3).unwrap())
            .unwrap();
        let (lo, hi, _, _) = segs.swap_remove(idx);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gk15(&f, lo, mid);
        let (v2, e2) = gk15(&f, mid, hi);
        segs.push((lo, mid, v1, e1));
        segs.push((mid, hi, v2, e2));
    }
    segs.iter().map(|s| s.2).sum()
}

/// `log ∫ exp(log_f(z)) dz` over the real line, robust to huge/tiny values.
///
/// The peak of `log_f` is located on a coarse grid over `[-span, span]`
/// around `center` and refined by golden-section search; the integrand is
/// then rescaled by the peak and integrated on a window wide enough for the
/// tails to be negligible.
pub fn log_integral_1d<F: Fn(f64) -> f64>(log_f: F, center: f64, span: f64) -> f64 {
    let grid = 4001;
    let mut best = (center, f64::NEG_INFINITY);
    for i in 0..grid {
        let z = center - span + 2.0 * span * i as f64 / (grid - 1) as f64;
        let v = log_f(z);
        if v > best.1 {
            best = (z, v);
        }
    }
    let step = 2.0 * span / (grid - 1) as f64;
    let peak = golden_max(&log_f, best.0 - step, best.0 + step);
    let top = log_f(peak);
    // find where the integrand falls below e^-60 of the peak on each side
    let mut left = peak;
    let mut w = step.max(1e-6);
    while log_f(left) - top > -60.0 && w < 1e8 {
        left = peak - w;
        w *= 1.5;
    }
    let mut right = peak;
    let mut w = step.max(1e-6);
    while log_f(right) - top > -60.0 && w < 1e8 {
        right = peak + w;
        w *= 1.5;
    }
    let v = integrate(|z| (log_f(z) - top).exp(), left, right, 1e-15, 1e-13);
    top + v.ln()
}

fn golden_max<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    for _ in 0..200 {
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
        if (b - a).abs() < 1e-14 * (1.0 + a.abs()) {
            break;
        }
    }
    0.5 * (a + b)
}

/// `log ∫∫ exp(log_f(x, y)) dx dy` by nested adaptive quadrature on a box.
pub fn log_integral_2d<F: Fn(f64, f64) -> f64>(
    log_f: F,
    center: (f64, f64),
    half_width: (f64, f64),
    log_scale: f64,
) -> f64 {
    let inner = |x: f64| {
        integrate(
            |y| (log_f(x, y) - log_scale).exp(),
            center.1 - half_width.1,
            center.1 + half_width.1,
            1e-16,
            1e-11,
        )
    };
    let v = integrate(
        inner,
        center.0 - half_width.0,
        center.0 + half_width.0,
        1e-16,
        1e-10,
    );
    log_scale + v.ln()
}

/// Numerically stable log-sum-exp, independent of the library's helper.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mean and standard error of a sample.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_standard_normal() {
        let v = log_integral_1d(|z| -0.5 * z * z, 0.3, 20.0);
        assert!((v - (2.0 * std::f64::consts::PI).sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn integrates_polynomial_exactly() {
        let v = integrate(|x| x * x * x - x, 0.0, 2.0, 1e-14, 1e-14);
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn integrates_2d_gaussian() {
        let v = log_integral_2d(
            |x, y| -0.5 * (x * x + y * y),
            (0.0, 0.0),
            (12.0, 12.0),
            0.0,
        );
        assert!((v - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-9);
    }
}
