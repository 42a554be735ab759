//! Linearization of the entropic drift about the entropy maximum.
//!
//! At `A*` (where `λ = 0`) the drift `g^{ik}∂_kS` has Jacobian
//! `L = −g^{-1}g = −I`, so `γ = −L β^{-1}` with `β = g(A*)` is `g^{-1}(A*)`:
//! symmetric, i.e. Onsager-reciprocal.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exp_family::{DualCoordinates, ExpFamilyModel, ManifoldPoint};
use crate::geometry;
use crate::linalg::{norm_inf, Matrix};
use crate::scalar::Real;
use crate::stats::line_fit;

#[derive(Debug, Clone, Serialize)]
pub struct LinearizationReport<S> {
    pub fixed_point: ManifoldPoint<S>,
    /// Jacobian of `g^{ik}∂_kS` at the fixed point.
    pub l: Matrix<S>,
    /// Jacobian of the curvature correction `−Γ^i/2`, reported separately.
    pub l_curvature: Matrix<S>,
    pub beta: Matrix<S>,
    pub gamma: Matrix<S>,
    /// `‖γ − γᵀ‖_F / ‖γ‖_F`
    pub asymmetry: S,
    pub gradient_norm: S,
    pub step: S,
}

impl<S: Real> LinearizationReport<S> {
    /// `max |L + I|`
    pub fn identity_error(&self) -> S {
        self.l.add(&Matrix::identity(self.l.rows())).max_abs()
    }

    /// `max |γ − g^{-1}(A*)|`
    pub fn gamma_error(&self) -> Result<S> {
        Ok(self.gamma.sub(&self.beta.inverse()?).max_abs())
    }
}

/// `A* = mean_parameters(λ = 0)`.
pub fn find_fixed_point<S: Real>(model: &ExpFamilyModel<S>) -> Result<ManifoldPoint<S>> {
    if !model.is_normalizable() {
        return Err(Error::NoFixedPoint {
            model: model.name().to_string(),
        });
    }
    let a = match model.mean_parameters(&DualCoordinates::zeros(model.dim())) {
        Ok(a) => a,
        Err(Error::DivergentPartition { .. }) => {
            return Err(Error::NoFixedPoint {
                model: model.name().to_string(),
            })
        }
        Err(e) => return Err(e),
    };
    let grad = norm_inf(&model.entropy_gradient(&a)?);
    if grad > S::c(1e-10).max(S::tol(1e-10)) {
        return Err(Error::invalid(format!(
            "entropy gradient {:e} does not vanish at the fixed point",
            grad.f64()
        )));
    }
    Ok(a)
}

/// Default finite-difference step `10⁻⁵(1 + ‖A*‖∞)`.
pub fn default_step<S: Real>(fixed_point: &ManifoldPoint<S>) -> S {
    S::c(1e-5) * (S::one() + norm_inf(fixed_point.coords()))
}

/// Central-difference Jacobian with one Richardson refinement
/// (`(4 D(h/2) − D(h)) / 3`).
fn jacobian<S: Real>(
    model: &ExpFamilyModel<S>,
    at: &ManifoldPoint<S>,
    h: S,
    f: impl Fn(&ManifoldPoint<S>) -> Result<Vec<S>>,
) -> Result<Matrix<S>> {
    let n = model.dim();
    let mut out = Matrix::zeros(n, n);
    for j in 0..n {
        let diff = |step: S| -> Result<Vec<S>> {
            let mut e = vec![S::zero(); n];
            e[j] = step;
            let plus = at.offset(&e);
            e[j] = -step;
            let minus = at.offset(&e);
            if !model.contains(plus.coords()) || !model.contains(minus.coords()) {
                return Err(Error::StepUnderflow { point: at.to_f64() });
            }
            let (fp, fm) = (f(&plus)?, f(&minus)?);
            Ok(fp.iter().zip(&fm).map(|(&a, &b)| (a - b) / (S::two() * step)).collect())
        };
        let coarse = diff(h)?;
        let fine = diff(S::half() * h)?;
        for i in 0..n {
            out[(i, j)] = (S::c(4.0) * fine[i] - coarse[i]) / S::c(3.0);
        }
    }
    Ok(out)
}

/// Reciprocal drift `g^{ik}∂_kS`.
pub fn drift<S: Real>(model: &ExpFamilyModel<S>, a: &ManifoldPoint<S>) -> Result<Vec<S>> {
    let g_inv = geometry::metric(model, a)?.inverse()?;
    Ok(g_inv.mul_vec(&model.entropy_gradient(a)?))
}

pub fn linearize<S: Real>(model: &ExpFamilyModel<S>, h: Option<S>) -> Result<LinearizationReport<S>> {
    let a = find_fixed_point(model)?;
    let h = h.unwrap_or_else(|| default_step(&a));
    if !(h > S::zero()) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let l = jacobian(model, &a, h, |p| drift(model, p))?;
    let l_curvature = jacobian(model, &a, h, |p| {
        Ok(geometry::bundle(model, p)?
            .gamma_contracted
            .iter()
            .map(|&g| -S::half() * g)
            .collect())
    })?;
    let beta = geometry::metric(model, &a)?;
    let gamma = l.matmul(&beta.inverse()?).scale(-S::one());
    let asymmetry = gamma.asymmetry();
    Ok(LinearizationReport {
        gradient_norm: norm_inf(&model.entropy_gradient(&a)?),
        fixed_point: a,
        l,
        l_curvature,
        beta,
        gamma,
        asymmetry,
        step: h,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RelaxationReport {
    pub fixed_point: Vec<f64>,
    pub times: Vec<f64>,
    pub trajectory: Vec<Vec<f64>>,
    /// `‖A(t) − A*‖₂`
    pub distance: Vec<f64>,
    /// Decay rate from a log-linear fit of `distance` (`NaN` for zero
    /// displacement).
    pub rate: f64,
    pub rate_standard_error: f64,
    pub log_fit_residual: f64,
}

/// Integrates `dA/dt = g^{ij}∂_jS` from `A* + displacement` with RK4.
pub fn relaxation_check<S: Real>(
    model: &ExpFamilyModel<S>,
    displacement: &[S],
    t_max: S,
    dt: S,
) -> Result<RelaxationReport> {
    let star = find_fixed_point(model)?;
    if displacement.len() != model.dim() {
        return Err(Error::invalid("displacement has the wrong dimension"));
    }
    if !(t_max > S::zero()) || !(dt > S::zero()) {
        return Err(Error::invalid("t_max and dt must be positive"));
    }
    let start = star.offset(displacement);
    model.check_point(&start)?;
    let steps = (t_max / dt).ceil().to_usize().unwrap_or(0).max(1);
    let h = t_max / S::count(steps);
    let mut a = start;
    let mut times = vec![0.0];
    let mut trajectory = vec![a.to_f64()];
    let field = |p: &ManifoldPoint<S>, t: S| -> Result<Vec<S>> {
        if !model.contains(p.coords()) {
            return Err(Error::LeftDomain { t: t.f64() });
        }
        drift(model, p)
    };
    let scaled = |k: &[S], s: S| k.iter().map(|&v| v * s).collect::<Vec<S>>();
    for i in 0..steps {
        let t = S::count(i) * h;
        let k1 = field(&a, t)?;
        let k2 = field(&a.offset(&scaled(&k1, S::half() * h)), t)?;
        let k3 = field(&a.offset(&scaled(&k2, S::half() * h)), t)?;
        let k4 = field(&a.offset(&scaled(&k3, h)), t)?;
        let incr: Vec<S> = (0..k1.len())
            .map(|j| h / S::c(6.0) * (k1[j] + S::two() * (k2[j] + k3[j]) + k4[j]))
            .collect();
        a = a.offset(&incr);
        if !model.contains(a.coords()) {
            return Err(Error::LeftDomain { t: (t + h).f64() });
        }
        times.push((t + h).f64());
        trajectory.push(a.to_f64());
    }
    let star_f = star.to_f64();
    let distance: Vec<f64> = trajectory
        .iter()
        .map(|x| x.iter().zip(&star_f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect();
    let (mut rate, mut rate_se, mut residual) = (f64::NAN, f64::NAN, f64::NAN);
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(&distance)
        .filter(|(_, &d)| d > 0.0)
        .map(|(&t, &d)| (t, d.ln()))
        .collect();
    if pts.len() >= 3 {
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        if let Some(fit) = line_fit(&x, &y) {
            rate = -fit.slope;
            rate_se = fit.slope_se;
            residual = fit.residual;
        }
    }
    Ok(RelaxationReport {
        fixed_point: star_f,
        times,
        trajectory,
        distance,
        rate,
        rate_standard_error: rate_se,
        log_fit_residual: residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn fixed_points_of_builtin_families() {
        let b = find_fixed_point(&ExpFamilyModel::<f64>::bernoulli()).unwrap();
        assert_relative_eq!(b.coords()[0], 0.5, epsilon = 1e-12);
        let g = find_fixed_point(&ExpFamilyModel::<f64>::gaussian_mean()).unwrap();
        assert!(g.coords()[0].abs() < 1e-12);
        let m = find_fixed_point(&ExpFamilyModel::<f64>::gaussian_mean_second_moment()).unwrap();
        assert!(m.coords()[0].abs() < 1e-10);
        assert_relative_eq!(m.coords()[1], 1.0, epsilon = 1e-10);
        let c = find_fixed_point(&ExpFamilyModel::<f64>::categorical3()).unwrap();
        for &x in c.coords() {
            assert_relative_eq!(x, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gaussian_mean_linearization() {
        let r = linearize(&ExpFamilyModel::<f64>::gaussian_mean(), None).unwrap();
        assert_relative_eq!(r.l[(0, 0)], -1.0, epsilon = 1e-9);
        assert_relative_eq!(r.beta[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.gamma[(0, 0)], 1.0, epsilon = 1e-9);
        assert_eq!(r.asymmetry, 0.0);
        assert!(r.l_curvature.max_abs() < 1e-9, "flat family has no curvature drift");
    }

    #[test]
    fn bernoulli_linearization() {
        let r = linearize(&ExpFamilyModel::<f64>::bernoulli(), None).unwrap();
        assert_relative_eq!(r.l[(0, 0)], -1.0, epsilon = 1e-8);
        assert_relative_eq!(r.beta[(0, 0)], 4.0, epsilon = 1e-10);
        assert_relative_eq!(r.gamma[(0, 0)], 0.25, epsilon = 1e-8);
    }

    #[test]
    fn two_dimensional_linearizations_are_reciprocal() {
        for m in [
            ExpFamilyModel::<f64>::gaussian_mean_second_moment(),
            ExpFamilyModel::categorical3(),
        ] {
            let r = linearize(&m, None).unwrap();
            assert!(r.identity_error() < 1e-6, "{}: {:?}", m.name(), r.l);
            assert!(r.gamma_error().unwrap() < 1e-6);
            assert!(r.asymmetry < 1e-6);
            assert!(r.gamma.symmetrized().is_positive_definite());
        }
    }

    #[test]
    fn relaxation_rates() {
        let g = relaxation_check(&ExpFamilyModel::<f64>::gaussian_mean(), &[2.0], 3.0, 0.01).unwrap();
        assert_relative_eq!(g.rate, 1.0, epsilon = 1e-6);
        let last = g.trajectory.last().unwrap()[0];
        assert_relative_eq!(last, 2.0 * (-3.0f64).exp(), max_relative = 1e-8);

        let b = relaxation_check(&ExpFamilyModel::<f64>::bernoulli(), &[0.01], 3.0, 0.01).unwrap();
        assert!((b.rate - 1.0).abs() < 1e-3, "{}", b.rate);

        let z = relaxation_check(&ExpFamilyModel::<f64>::bernoulli(), &[0.0], 1.0, 0.1).unwrap();
        assert!(z.distance.iter().all(|&d| d < 1e-14));
        assert!(z.rate.is_nan());
    }

    #[test]
    fn relaxation_must_start_inside_the_domain() {
        let b = ExpFamilyModel::<f64>::bernoulli();
        assert!(relaxation_check(&b, &[0.6], 1.0, 0.01).is_err());
    }
}
