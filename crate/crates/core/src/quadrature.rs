//! Adaptive Gauss–Kronrod (7/15) quadrature on finite and infinite
//! intervals, plus a composite Gauss–Legendre rule for tensor grids.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::scalar::Real;

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

#[derive(Debug, Clone, Copy)]
pub struct QuadratureOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-12,
            rel_tol: 0.0,
            max_intervals: 4000,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Estimate<S> {
    pub value: S,
    pub error: S,
    pub evaluations: usize,
}

struct Segment<S> {
    a: S,
    b: S,
    value: S,
    error: S,
}

impl<S: Real> PartialEq for Segment<S> {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl<S: Real> Eq for Segment<S> {}
impl<S: Real> PartialOrd for Segment<S> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<S: Real> Ord for Segment<S> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error
            .partial_cmp(&other.error)
            .unwrap_or(Ordering::Equal)
    }
}

fn kronrod<S: Real, F: FnMut(S) -> S>(f: &mut F, a: S, b: S) -> (S, S) {
    let center = S::half() * (a + b);
    let half = S::half() * (b - a);
    let fc = f(center);
    let mut res_k = fc * S::c(WGK[7]);
    let mut res_g = fc * S::c(WG[3]);
    let mut fv1 = [S::zero(); 7];
    let mut fv2 = [S::zero(); 7];
    for j in 0..7 {
        let dx = half * S::c(XGK[j]);
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        fv1[j] = f1;
        fv2[j] = f2;
        res_k += S::c(WGK[j]) * (f1 + f2);
        if j % 2 == 1 {
            res_g += S::c(WG[j / 2]) * (f1 + f2);
        }
    }
    let mean = res_k * S::half();
    let mut resasc = S::c(WGK[7]) * (fc - mean).abs();
    for j in 0..7 {
        resasc += S::c(WGK[j]) * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let value = res_k * half;
    resasc *= half.abs();
    let mut err = ((res_k - res_g) * half).abs();
    if resasc != S::zero() && err != S::zero() {
        err = resasc * S::one().min((S::c(200.0) * err / resasc).powf(S::c(1.5)));
    }
    (value, err)
}

fn adaptive<S: Real, F: FnMut(S) -> S>(
    mut f: F,
    a: S,
    b: S,
    opts: &QuadratureOptions,
) -> Result<Estimate<S>> {
    let (value, error) = kronrod(&mut f, a, b);
    let mut evaluations = 15;
    let mut heap = BinaryHeap::new();
    heap.push(Segment { a, b, value, error });
    let mut total = value;
    let mut total_err = error;
    loop {
        if !total.is_finite() || !total_err.is_finite() {
            return Err(Error::QuadratureTolerance {
                requested: opts.abs_tol,
                achieved: f64::INFINITY,
            });
        }
        let tol = S::c(opts.abs_tol).max(S::c(opts.rel_tol) * total.abs());
        if total_err <= tol {
            break;
        }
        if heap.len() >= opts.max_intervals {
            return Err(Error::QuadratureTolerance {
                requested: tol.f64(),
                achieved: total_err.f64(),
            });
        }
        let worst = heap.pop().expect("non-empty");
        let mid = S::half() * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // interval cannot be split further in this precision
            heap.push(worst);
            let achieved = total_err;
            if achieved <= tol * S::c(16.0) {
                break;
            }
            return Err(Error::QuadratureTolerance {
                requested: tol.f64(),
                achieved: achieved.f64(),
            });
        }
        let (v1, e1) = kronrod(&mut f, worst.a, mid);
        let (v2, e2) = kronrod(&mut f, mid, worst.b);
        evaluations += 30;
        total = total - worst.value + v1 + v2;
        total_err = total_err - worst.error + e1 + e2;
        heap.push(Segment {
            a: worst.a,
            b: mid,
            value: v1,
            error: e1,
        });
        heap.push(Segment {
            a: mid,
            b: worst.b,
            value: v2,
            error: e2,
        });
    }
    // Re-sum to avoid accumulated cancellation in the running totals.
    let value = heap.iter().map(|s| s.value).sum();
    let error = heap.iter().map(|s| s.error).sum();
    Ok(Estimate {
        value,
        error,
        evaluations,
    })
}

/// Integrates `f` over `[a, b]`; either end may be infinite. Infinite ends
/// are compactified around `center` with length scale `scale`.
pub fn integrate<S: Real, F: FnMut(S) -> S>(
    mut f: F,
    a: S,
    b: S,
    center: S,
    scale: S,
    opts: &QuadratureOptions,
) -> Result<Estimate<S>> {
    if a > b {
        return Err(Error::invalid("integration bounds out of order"));
    }
    if a == b {
        return Ok(Estimate {
            value: S::zero(),
            error: S::zero(),
            evaluations: 0,
        });
    }
    let one = S::one();
    let zero = S::zero();
    let guard = |v: S| if v.is_finite() { v } else { zero };
    match (a.is_finite(), b.is_finite()) {
        (true, true) => adaptive(f, a, b, opts),
        (false, false) => adaptive(
            |t: S| {
                let d = one - t * t;
                let x = center + scale * t / d;
                guard(f(x) * scale * (one + t * t) / (d * d))
            },
            -one,
            one,
            opts,
        ),
        (true, false) => adaptive(
            |t: S| {
                let d = one - t;
                let x = a + scale * t / d;
                guard(f(x) * scale / (d * d))
            },
            zero,
            one,
            opts,
        ),
        (false, true) => adaptive(
            |t: S| {
                let d = one - t;
                let x = b - scale * t / d;
                guard(f(x) * scale / (d * d))
            },
            zero,
            one,
            opts,
        ),
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else { p1 };
            dp = n as f64 * (x * p - p0) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Composite Gauss–Legendre rule on `[a, b]` with `panels` equal panels.
pub fn composite_gauss_legendre(a: f64, b: f64, panels: usize, order: usize) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut out = Vec::with_capacity(panels * order);
    for p in 0..panels {
        let lo = a + p as f64 * h;
        for (xi, wi) in x.iter().zip(&w) {
            out.push((lo + 0.5 * h * (xi + 1.0), 0.5 * h * wi));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn opts() -> QuadratureOptions {
        QuadratureOptions::default()
    }

    #[test]
    fn polynomial_is_exact() {
        let e = integrate(|x: f64| x.powi(5) - 3.0 * x * x, 0.0, 2.0, 0.0, 1.0, &opts()).unwrap();
        assert_relative_eq!(e.value, 64.0 / 6.0 - 8.0, epsilon = 1e-13);
    }

    #[test]
    fn gaussian_over_real_line() {
        let f = |x: f64| (-0.5 * x * x).exp();
        let e = integrate(f, f64::NEG_INFINITY, f64::INFINITY, 0.0, 1.0, &opts()).unwrap();
        assert_relative_eq!(e.value, (2.0 * std::f64::consts::PI).sqrt(), epsilon = 1e-11);
    }

    #[test]
    fn half_line_exponential() {
        let e = integrate(|x: f64| (-x).exp(), 0.0, f64::INFINITY, 0.0, 1.0, &opts()).unwrap();
        assert_relative_eq!(e.value, 1.0, epsilon = 1e-11);
        let e = integrate(|x: f64| x.exp(), f64::NEG_INFINITY, 0.0, 0.0, 1.0, &opts()).unwrap();
        assert_relative_eq!(e.value, 1.0, epsilon = 1e-11);
    }

    #[test]
    fn endpoint_singularity() {
        let e = integrate(|x: f64| 1.0 / x.sqrt(), 0.0, 1.0, 0.0, 1.0, &opts()).unwrap();
        assert_relative_eq!(e.value, 2.0, epsilon = 1e-10);
    }

    #[test]
    fn divergent_integral_fails() {
        let r = integrate(|x: f64| 1.0 / x, 0.0, 1.0, 0.0, 1.0, &opts());
        assert!(r.is_err());
    }

    #[test]
    fn gauss_legendre_integrates_degree_2n_minus_1() {
        let (x, w) = gauss_legendre(10);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(18)).sum();
        assert_relative_eq!(s, 2.0 / 19.0, epsilon = 1e-14);
        let rule = composite_gauss_legendre(0.0, 3.0, 7, 5);
        let s: f64 = rule.iter().map(|(x, w)| w * x.sin()).sum();
        assert_relative_eq!(s, 1.0 - 3f64.cos(), epsilon = 1e-12);
    }
}
