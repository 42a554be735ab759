//! Fisher–Rao geometry in expected-value coordinates.
//!
//! For an exponential family the metric is the Hessian `g_ij = −∂²S/∂A^i∂A^j`,
//! equivalently the inverse covariance of the sufficient statistics. Being a
//! Hessian metric, its lowered Christoffel symbols are
//! `Γ_kij = ½ ∂³Φ/∂A^k∂A^i∂A^j` with `Φ = −S`.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exp_family::{ExpFamilyModel, Family, ManifoldPoint};
use crate::linalg::{Matrix, Tensor3};
use crate::rng;
use crate::scalar::Real;
use crate::stats::{Accumulator, MeanEstimate};

/// Metric data at one point.
#[derive(Debug, Clone, Serialize)]
pub struct GeometryBundle<S> {
    pub point: ManifoldPoint<S>,
    pub g: Matrix<S>,
    pub g_inv: Matrix<S>,
    pub det_g: S,
    /// `Γ^i_jk`, indexed `(i, j, k)`.
    pub gamma: Tensor3<S>,
    /// `Γ^i = Γ^i_jk g^jk`.
    pub gamma_contracted: Vec<S>,
}

/// `∂_k g_ij` in closed form, indexed `(i, j, k)`. `None` for custom families.
fn metric_derivative_closed<S: Real>(model: &ExpFamilyModel<S>, a: &[S]) -> Option<Tensor3<S>> {
    let one = S::one();
    match model.family() {
        Family::Bernoulli => {
            let q = a[0] * (one - a[0]);
            let mut t = Tensor3::zeros(1);
            t[(0, 0, 0)] = (S::two() * a[0] - one) / (q * q);
            Some(t)
        }
        Family::GaussianMean => Some(Tensor3::zeros(1)),
        Family::GaussianMeanSecondMoment => {
            let (m, v) = (a[0], a[1] - a[0] * a[0]);
            let (v2, v3) = (v * v, v * v * v);
            let t111 = S::c(6.0) * m / v2 + S::c(8.0) * m * m * m / v3;
            let t112 = -one / v2 - S::c(4.0) * m * m / v3;
            let t122 = S::two() * m / v3;
            let t222 = -one / v3;
            let mut t = Tensor3::zeros(2);
            // fully symmetric: value depends on how many indices equal 1
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        t[(i, j, k)] = match i + j + k {
                            0 => t111,
                            1 => t112,
                            2 => t122,
                            _ => t222,
                        };
                    }
                }
            }
            Some(t)
        }
        Family::Categorical3 => {
            let p0 = one - a[0] - a[1];
            let c = one / (p0 * p0);
            let mut t = Tensor3::zeros(2);
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        t[(i, j, k)] = c;
                    }
                }
                t[(i, i, i)] = c - one / (a[i] * a[i]);
            }
            Some(t)
        }
        Family::Custom(_) => None,
    }
}

fn metric_closed<S: Real>(model: &ExpFamilyModel<S>, a: &[S]) -> Option<Matrix<S>> {
    let one = S::one();
    match model.family() {
        Family::Bernoulli => Some(Matrix::from_rows(&[vec![one / (a[0] * (one - a[0]))]])),
        Family::GaussianMean => Some(Matrix::identity(1)),
        Family::GaussianMeanSecondMoment => {
            let (m, v) = (a[0], a[1] - a[0] * a[0]);
            let v2 = v * v;
            Some(Matrix::from_rows(&[
                vec![(v + S::two() * m * m) / v2, -m / v2],
                vec![-m / v2, S::half() / v2],
            ]))
        }
        Family::Categorical3 => {
            let p0 = one - a[0] - a[1];
            let c = one / p0;
            Some(Matrix::from_rows(&[
                vec![one / a[0] + c, c],
                vec![c, one / a[1] + c],
            ]))
        }
        Family::Custom(_) => None,
    }
}

/// Fisher–Rao metric `g_ij(A)`.
pub fn metric<S: Real>(model: &ExpFamilyModel<S>, point: &ManifoldPoint<S>) -> Result<Matrix<S>> {
    model.check_point(point)?;
    if let Some(g) = metric_closed(model, point.coords()) {
        return Ok(g);
    }
    metric_from_covariance(model, point)
}

/// Metric as the inverse covariance of the sufficient statistics at `λ(A)`.
pub fn metric_from_covariance<S: Real>(
    model: &ExpFamilyModel<S>,
    point: &ManifoldPoint<S>,
) -> Result<Matrix<S>> {
    let lambda = model.natural_parameters(point)?;
    model.statistics_covariance(&lambda)?.inverse()
}

/// `log √det g(A)`, evaluated without the guards of [`metric`]. The point
/// must already be known to be inside the domain.
pub(crate) fn log_volume_unchecked<S: Real>(model: &ExpFamilyModel<S>, a: &[S]) -> Result<S> {
    let one = S::one();
    let half = S::half();
    Ok(match model.family() {
        Family::Bernoulli => -half * (a[0] * (one - a[0])).ln(),
        Family::GaussianMean => S::zero(),
        Family::GaussianMeanSecondMoment => {
            let v = a[1] - a[0] * a[0];
            -half * S::two().ln() - S::c(1.5) * v.ln()
        }
        Family::Categorical3 => -half * (a[0] * a[1] * (one - a[0] - a[1])).ln(),
        Family::Custom(_) => {
            let g = metric_from_covariance(model, &ManifoldPoint::new(a.to_vec()))?;
            half * g.determinant().ln()
        }
    })
}

/// Metric at an already validated coordinate vector.
pub(crate) fn metric_unchecked<S: Real>(model: &ExpFamilyModel<S>, a: &[S]) -> Result<Matrix<S>> {
    match metric_closed(model, a) {
        Some(g) => Ok(g),
        None => metric_from_covariance(model, &ManifoldPoint::new(a.to_vec())),
    }
}

/// `√det g(A)`.
pub fn volume_element<S: Real>(model: &ExpFamilyModel<S>, point: &ManifoldPoint<S>) -> Result<S> {
    model.check_point(point)?;
    Ok(log_volume_unchecked(model, point.coords())?.exp())
}

/// Central finite differences of the metric, `∂_k g_ij`, with step
/// `h = ε^{1/3}(1 + |A^k|)`.
pub fn metric_derivative_fd<S: Real>(
    model: &ExpFamilyModel<S>,
    point: &ManifoldPoint<S>,
) -> Result<Tensor3<S>> {
    let n = model.dim();
    let a = point.coords();
    let mut t = Tensor3::zeros(n);
    let base = S::epsilon().cbrt();
    for k in 0..n {
        let h = base * (S::one() + a[k].abs());
        let mut plus = a.to_vec();
        let mut minus = a.to_vec();
        plus[k] += h;
        minus[k] -= h;
        if !model.contains(&plus) || !model.contains(&minus) {
            return Err(Error::StepUnderflow {
                point: point.to_f64(),
            });
        }
        let gp = metric(model, &ManifoldPoint::new(plus))?;
        let gm = metric(model, &ManifoldPoint::new(minus))?;
        for i in 0..n {
            for j in 0..n {
                t[(i, j, k)] = (gp[(i, j)] - gm[(i, j)]) / (S::two() * h);
            }
        }
    }
    Ok(t)
}

/// `∂_k g_ij`: closed form for built-ins, finite differences otherwise.
pub fn metric_derivative<S: Real>(
    model: &ExpFamilyModel<S>,
    point: &ManifoldPoint<S>,
) -> Result<Tensor3<S>> {
    model.check_point(point)?;
    match metric_derivative_closed(model, point.coords()) {
        Some(t) => Ok(t),
        None => metric_derivative_fd(model, point),
    }
}

/// Second-kind symbols from a metric inverse and metric derivative `∂_k g_ij`
/// via the Levi-Civita formula.
pub fn christoffel_from_parts<S: Real>(
    g_inv: &Matrix<S>,
    dg: &Tensor3<S>,
) -> (Tensor3<S>, Vec<S>) {
    let n = g_inv.rows();
    // lowered Γ_ljk = ½(∂_j g_lk + ∂_k g_lj − ∂_l g_jk)
    let mut lower = Tensor3::zeros(n);
    for l in 0..n {
        for j in 0..n {
            for k in 0..n {
                lower[(l, j, k)] =
                    S::half() * (dg[(l, k, j)] + dg[(l, j, k)] - dg[(j, k, l)]);
            }
        }
    }
    let mut gamma = Tensor3::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                gamma[(i, j, k)] = (0..n).map(|l| g_inv[(i, l)] * lower[(l, j, k)]).sum();
            }
        }
    }
    let contracted = (0..n)
        .map(|i| {
            (0..n)
                .flat_map(|j| (0..n).map(move |k| (j, k)))
                .map(|(j, k)| gamma[(i, j, k)] * g_inv[(j, k)])
                .sum()
        })
        .collect();
    (gamma, contracted)
}

/// Christoffel symbols `Γ^i_jk` and their contraction `Γ^i`.
pub fn christoffel<S: Real>(
    model: &ExpFamilyModel<S>,
    point: &ManifoldPoint<S>,
) -> Result<(Tensor3<S>, Vec<S>)> {
    let g_inv = metric(model, point)?.inverse()?;
    let dg = metric_derivative(model, point)?;
    Ok(christoffel_from_parts(&g_inv, &dg))
}

/// Everything above at one point.
pub fn bundle<S: Real>(
    model: &ExpFamilyModel<S>,
    point: &ManifoldPoint<S>,
) -> Result<GeometryBundle<S>> {
    let g = metric(model, point)?;
    let g_inv = g.inverse()?;
    let dg = metric_derivative(model, point)?;
    let (gamma, gamma_contracted) = christoffel_from_parts(&g_inv, &dg);
    Ok(GeometryBundle {
        point: point.clone(),
        det_g: g.determinant(),
        g,
        g_inv,
        gamma,
        gamma_contracted,
    })
}

/// Monte Carlo estimate of `∫ρ (∂_i log ρ)(∂_j log ρ) dx` with the score
/// `∂_j log ρ = g_ji (a^i(x) − A^i)`. Entries carry standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct MetricEstimate {
    pub samples: usize,
    pub entries: Vec<Vec<MeanEstimate>>,
}

impl MetricEstimate {
    /// Largest `|estimate − reference| / se` over all entries.
    pub fn max_z_score(&self, reference: &Matrix<f64>) -> f64 {
        let mut z: f64 = 0.0;
        for (i, row) in self.entries.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                let d = (e.mean - reference[(i, j)]).abs();
                let zz = if e.standard_error > 0.0 {
                    d / e.standard_error
                } else if d < 1e-12 {
                    0.0
                } else {
                    f64::INFINITY
                };
                z = z.max(zz);
            }
        }
        z
    }
}

pub fn metric_integral_check<S: Real>(
    model: &ExpFamilyModel<S>,
    point: &ManifoldPoint<S>,
    samples: usize,
    seed: u64,
) -> Result<MetricEstimate> {
    let mut rng = rng::stream(seed, &[0x4D43]);
    metric_integral_check_with(model, point, samples, &mut rng)
}

pub fn metric_integral_check_with<S: Real, R: Rng + ?Sized>(
    model: &ExpFamilyModel<S>,
    point: &ManifoldPoint<S>,
    samples: usize,
    rng: &mut R,
) -> Result<MetricEstimate> {
    if samples < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let g = metric(model, point)?;
    let sampler = model.state_sampler(point)?;
    let n = model.dim();
    let a = point.coords();
    let mut acc = vec![vec![Accumulator::default(); n]; n];
    for _ in 0..samples {
        let x = sampler.sample(rng);
        let centered: Vec<S> = model
            .sufficient_statistics(x)
            .iter()
            .zip(a)
            .map(|(&s, &m)| s - m)
            .collect();
        let score = g.mul_vec(&centered);
        for i in 0..n {
            for j in 0..n {
                acc[i][j].push((score[i] * score[j]).f64());
            }
        }
    }
    Ok(MetricEstimate {
        samples,
        entries: acc
            .iter()
            .map(|row| row.iter().map(Accumulator::estimate).collect())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pt(a: &[f64]) -> ManifoldPoint<f64> {
        ManifoldPoint::from_f64(a)
    }

    #[test]
    fn metric_examples() {
        let g = ExpFamilyModel::<f64>::gaussian_mean();
        assert_eq!(metric(&g, &pt(&[3.7])).unwrap()[(0, 0)], 1.0);
        let b = ExpFamilyModel::<f64>::bernoulli();
        assert_relative_eq!(metric(&b, &pt(&[0.5])).unwrap()[(0, 0)], 4.0);
        assert_relative_eq!(metric(&b, &pt(&[0.25])).unwrap()[(0, 0)], 16.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn christoffel_examples() {
        let g = ExpFamilyModel::<f64>::gaussian_mean();
        let (gamma, c) = christoffel(&g, &pt(&[1.0])).unwrap();
        assert_eq!(gamma.max_abs(), 0.0);
        assert_eq!(c, vec![0.0]);

        let b = ExpFamilyModel::<f64>::bernoulli();
        let (gamma, _) = christoffel(&b, &pt(&[0.5])).unwrap();
        assert_eq!(gamma[(0, 0, 0)], 0.0);
        let (gamma, c) = christoffel(&b, &pt(&[0.75])).unwrap();
        assert_relative_eq!(gamma[(0, 0, 0)], 4.0 / 3.0, epsilon = 1e-13);
        assert_relative_eq!(c[0], 0.25, epsilon = 1e-13);
    }

    #[test]
    fn christoffel_closed_form_matches_finite_differences() {
        for (model, a) in [
            (ExpFamilyModel::<f64>::bernoulli(), vec![0.75]),
            (ExpFamilyModel::gaussian_mean_second_moment(), vec![0.3, 1.4]),
            (ExpFamilyModel::categorical3(), vec![0.2, 0.5]),
        ] {
            let p = ManifoldPoint::new(a);
            let closed = metric_derivative(&model, &p).unwrap();
            let fd = metric_derivative_fd(&model, &p).unwrap();
            let n = model.dim();
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        assert_relative_eq!(
                            closed[(i, j, k)],
                            fd[(i, j, k)],
                            max_relative = 1e-6,
                            epsilon = 1e-8
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn volume_element_examples() {
        let b = ExpFamilyModel::<f64>::bernoulli();
        assert_relative_eq!(volume_element(&b, &pt(&[0.5])).unwrap(), 2.0, epsilon = 1e-14);
        assert_relative_eq!(
            volume_element(&b, &pt(&[0.25])).unwrap(),
            (16.0f64 / 3.0).sqrt(),
            epsilon = 1e-14
        );
        let g = ExpFamilyModel::<f64>::gaussian_mean();
        assert_eq!(volume_element(&g, &pt(&[-5.0])).unwrap(), 1.0);
    }

    #[test]
    fn volume_element_matches_determinant() {
        for (model, a) in [
            (ExpFamilyModel::<f64>::gaussian_mean_second_moment(), vec![-0.4, 0.9]),
            (ExpFamilyModel::categorical3(), vec![0.1, 0.7]),
        ] {
            let p = ManifoldPoint::new(a);
            let det = metric(&model, &p).unwrap().determinant();
            assert_relative_eq!(volume_element(&model, &p).unwrap(), det.sqrt(), max_relative = 1e-13);
        }
    }

    #[test]
    fn metric_integral_examples() {
        let b = ExpFamilyModel::<f64>::bernoulli();
        for (a, target) in [(0.5, 4.0), (0.9, 1.0 / 0.09)] {
            let est = metric_integral_check(&b, &pt(&[a]), 100_000, 17).unwrap();
            assert!(est.entries[0][0].within(target, 3.0), "{est:?}");
        }
        let g = ExpFamilyModel::<f64>::gaussian_mean();
        let est = metric_integral_check(&g, &pt(&[1.0]), 100_000, 17).unwrap();
        assert!(est.entries[0][0].within(1.0, 3.0), "{est:?}");
    }

    #[test]
    fn custom_family_geometry_uses_fallbacks() {
        use crate::exp_family::CustomFamily;
        // q = e^{−x} on [0, ∞): g = 1/A², Γ^1_11 = −1/A
        let m = ExpFamilyModel::custom(
            "exponential",
            CustomFamily::new((0.0, f64::INFINITY), |x| x, |x| -x, (0.0, f64::INFINITY)),
        );
        let p = pt(&[2.0]);
        assert_relative_eq!(metric(&m, &p).unwrap()[(0, 0)], 0.25, epsilon = 1e-9);
        let (gamma, _) = christoffel(&m, &p).unwrap();
        assert_relative_eq!(gamma[(0, 0, 0)], -0.5, epsilon = 1e-5);
    }

    #[test]
    fn finite_difference_step_underflow_near_margin() {
        let b = ExpFamilyModel::<f64>::bernoulli();
        let p = pt(&[2e-9]);
        assert!(matches!(
            metric_derivative_fd(&b, &p),
            Err(Error::StepUnderflow { .. })
        ));
    }
}
