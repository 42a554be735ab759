//! Sample statistics, regression helpers and distribution tests.

use serde::Serialize;

/// Mean and standard error of a Monte Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub standard_error: f64,
}

impl MeanEstimate {
    /// `|mean − target| ≤ k · standard_error`
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.standard_error
    }

    pub fn z_score(&self, target: f64) -> f64 {
        (self.mean - target) / self.standard_error
    }
}

/// Sum / sum-of-squares accumulator. Merging is exact in the sense that the
/// result depends only on the merge order, which callers keep fixed.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    pub count: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Accumulator {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(&mut self, other: &Accumulator) {
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    pub fn variance(&self) -> f64 {
        let n = self.count as f64;
        if self.count < 2 {
            return f64::NAN;
        }
        ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0)
    }

    pub fn estimate(&self) -> MeanEstimate {
        MeanEstimate {
            mean: self.mean(),
            standard_error: (self.variance() / self.count as f64).sqrt(),
        }
    }
}

pub fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let mut acc = Accumulator::default();
    xs.iter().for_each(|&x| acc.push(x));
    (acc.mean(), acc.variance())
}

/// Straight-line fit `y = intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub intercept_se: f64,
    pub slope_se: f64,
    /// Weighted sum of squared residuals (χ² when weights are 1/σ²).
    pub residual: f64,
}

/// Weighted least squares line through `(x, y)` with per-point standard
/// errors `sigma`. The parameter standard errors are the propagated input
/// errors, not rescaled by the residual.
pub fn weighted_line_fit(x: &[f64], y: &[f64], sigma: &[f64]) -> Option<LineFit> {
    if x.len() < 2 || x.len() != y.len() || x.len() != sigma.len() {
        return None;
    }
    let (mut s, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((&xi, &yi), &si) in x.iter().zip(y).zip(sigma) {
        let w = 1.0 / (si * si);
        if !w.is_finite() {
            return None;
        }
        s += w;
        sx += w * xi;
        sy += w * yi;
        sxx += w * xi * xi;
        sxy += w * xi * yi;
    }
    let det = s * sxx - sx * sx;
    if det <= 0.0 || !det.is_finite() {
        return None;
    }
    let intercept = (sxx * sy - sx * sxy) / det;
    let slope = (s * sxy - sx * sy) / det;
    let residual = x
        .iter()
        .zip(y)
        .zip(sigma)
        .map(|((&xi, &yi), &si)| ((yi - intercept - slope * xi) / si).powi(2))
        .sum();
    Some(LineFit {
        intercept,
        slope,
        intercept_se: (sxx / det).sqrt(),
        slope_se: (s / det).sqrt(),
        residual,
    })
}

/// Ordinary least squares line.
pub fn line_fit(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let ones = vec![1.0; x.len()];
    weighted_line_fit(x, y, &ones)
}

pub fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    0.5 * (1.0 + libm::erf((x - mean) / (sd * std::f64::consts::SQRT_2)))
}

/// One-sample Kolmogorov–Smirnov distance `sup |F_n − F|`.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov–Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exact_line_is_recovered() {
        let x = [0.1, 0.2, 0.4];
        let y: Vec<f64> = x.iter().map(|x| 3.0 - 2.0 * x).collect();
        let fit = weighted_line_fit(&x, &y, &[1.0, 2.0, 0.5]).unwrap();
        assert_relative_eq!(fit.intercept, 3.0, epsilon = 1e-12);
        assert_relative_eq!(fit.slope, -2.0, epsilon = 1e-12);
        assert!(fit.residual < 1e-20);
    }

    #[test]
    fn degenerate_fit_is_none() {
        assert!(line_fit(&[1.0, 1.0], &[0.0, 2.0]).is_none());
        assert!(line_fit(&[1.0], &[0.0]).is_none());
    }

    #[test]
    fn accumulator_matches_two_pass() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let (m, v) = mean_and_variance(&xs);
        assert_relative_eq!(m, 3.75);
        assert_relative_eq!(v, (7.5625 + 3.0625 + 0.0625 + 18.0625) / 3.0);
    }

    #[test]
    fn ks_of_perfect_grid_is_small() {
        let n = 1000;
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let d = ks_distance(&xs, |x| x.clamp(0.0, 1.0));
        assert!(d <= 0.5 / n as f64 + 1e-12);
        assert_eq!(ks_two_sample(&xs, &xs), 0.0);
    }
}
