//! Short-step transition kernel
//!
//! ```text
//! P(A′|A) ∝ g^{1/2}(A′) exp( ∂_iS(A) ΔA^i − (1/2τ) g_ij ΔA^i ΔA^j )
//! ```
//!
//! and its samplers. The quadratic form stands for the squared distance
//! between `A` and `A′`. [`QuadraticForm::Midpoint`] evaluates the metric at
//! `(A+A′)/2`, which matches the squared geodesic distance through third
//! order and yields the drift `g^{ij}∂_jS − Γ^i/2`.
//! [`QuadraticForm::StartPoint`] freezes the metric at `A`; its first moment
//! carries `+Γ^i` instead.

use log::warn;
use rand::Rng;
use rand_distr::ChiSquared;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exp_family::{ExpFamilyModel, ManifoldPoint};
use crate::geometry::{self, log_volume_unchecked, metric_unchecked};
use crate::linalg::{dot, Matrix};
use crate::quadrature::{composite_gauss_legendre, integrate, QuadratureOptions};
use crate::rng::{self, standard_normal, uniform};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadraticForm {
    #[default]
    Midpoint,
    StartPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepParams<S> {
    /// Step duration; also the time increment.
    pub tau: S,
    /// Rejected proposals tolerated per draw before giving up.
    pub max_rejects: usize,
    /// Metropolis–Hastings iterations before the retained draw.
    pub burn_in: usize,
    pub form: QuadraticForm,
    /// Degrees of freedom of the Student-t proposal; infinite means Gaussian.
    /// The kernel's tails are heavier than Gaussian wherever the metric
    /// shrinks, and a Gaussian proposal then mixes slowly.
    pub proposal_dof: f64,
}

impl<S: Real> StepParams<S> {
    pub const DEFAULT_BURN_IN: usize = 16;
    pub const DEFAULT_MAX_REJECTS: usize = 10_000;
    pub const DEFAULT_PROPOSAL_DOF: f64 = 5.0;

    pub fn new(tau: S) -> Result<Self> {
        if !(tau > S::zero()) || !tau.is_finite() {
            return Err(Error::invalid(format!("tau must be positive, got {tau}")));
        }
        Ok(Self {
            tau,
            max_rejects: Self::DEFAULT_MAX_REJECTS,
            burn_in: Self::DEFAULT_BURN_IN,
            form: QuadraticForm::default(),
            proposal_dof: Self::DEFAULT_PROPOSAL_DOF,
        })
    }

    /// `dof` must exceed 2 (finite proposal variance) or be infinite.
    pub fn with_proposal_dof(mut self, dof: f64) -> Result<Self> {
        if !(dof > 2.0) {
            return Err(Error::invalid(format!("proposal dof must exceed 2, got {dof}")));
        }
        self.proposal_dof = dof;
        Ok(self)
    }

    pub fn with_max_rejects(mut self, max_rejects: usize) -> Self {
        self.max_rejects = max_rejects.max(1);
        self
    }

    pub fn with_burn_in(mut self, burn_in: usize) -> Self {
        self.burn_in = burn_in.max(1);
        self
    }

    pub fn with_form(mut self, form: QuadraticForm) -> Self {
        self.form = form;
        self
    }

    /// Fraction of proposal mass inside the domain at `point`, estimated
    /// from a fixed stream of 4096 proposals. Warns below 99%.
    pub fn check_at(&self, model: &ExpFamilyModel<S>, point: &ManifoldPoint<S>) -> Result<f64> {
        let ctx = StepContext::new(model, point, *self)?;
        let mut rng = rng::stream(0x5EED, &[]);
        let total = 4096;
        let inside = (0..total)
            .filter(|_| model.contains(&ctx.propose(&mut rng)))
            .count();
        let mass = inside as f64 / total as f64;
        if mass < 0.99 {
            warn!(
                "tau = {} keeps only {:.1}% of proposal mass inside the domain at {:?}",
                self.tau,
                100.0 * mass,
                point.to_f64()
            );
        }
        Ok(mass)
    }
}

/// One draw `A → A′`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepSample<S> {
    pub start: ManifoldPoint<S>,
    pub end: ManifoldPoint<S>,
    pub delta: Vec<S>,
    pub rejects: usize,
}

/// Quantities of the kernel that depend only on the start point.
#[derive(Debug, Clone)]
pub struct StepContext<'a, S> {
    model: &'a ExpFamilyModel<S>,
    start: ManifoldPoint<S>,
    params: StepParams<S>,
    g: Matrix<S>,
    grad: Vec<S>,
    proposal_mean: Vec<S>,
    proposal_chol: Matrix<S>,
}

impl<'a, S: Real> StepContext<'a, S> {
    pub fn new(
        model: &'a ExpFamilyModel<S>,
        start: &ManifoldPoint<S>,
        params: StepParams<S>,
    ) -> Result<Self> {
        let g = geometry::metric(model, start)?;
        let g_inv = g.inverse()?;
        let grad = model.entropy_gradient(start)?;
        let drift = g_inv.mul_vec(&grad);
        let proposal_mean = start
            .coords()
            .iter()
            .zip(&drift)
            .map(|(&a, &d)| a + params.tau * d)
            .collect();
        let proposal_chol = g_inv.scale(params.tau).cholesky()?;
        Ok(Self {
            model,
            start: start.clone(),
            params,
            g,
            grad,
            proposal_mean,
            proposal_chol,
        })
    }

    pub fn proposal_mean(&self) -> &[S] {
        &self.proposal_mean
    }

    /// Draw from the (Student-t or Gaussian) proposal.
    pub fn propose<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<S> {
        let dof = self.params.proposal_dof;
        let scale = if dof.is_finite() {
            let chi2: f64 = rng.sample(ChiSquared::new(dof).expect("dof > 2"));
            S::c((dof / chi2).sqrt())
        } else {
            S::one()
        };
        self.offset_from_mean(rng, scale)
    }

    fn propose_gaussian<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<S> {
        self.offset_from_mean(rng, S::one())
    }

    fn offset_from_mean<R: Rng + ?Sized>(&self, rng: &mut R, scale: S) -> Vec<S> {
        let lz = self.scaled_noise(rng, scale);
        self.proposal_mean.iter().zip(&lz).map(|(&m, &d)| m + d).collect()
    }

    fn scaled_noise<R: Rng + ?Sized>(&self, rng: &mut R, scale: S) -> Vec<S> {
        let n = self.proposal_mean.len();
        let z: Vec<S> = (0..n).map(|_| standard_normal::<S, _>(rng) * scale).collect();
        self.proposal_chol.mul_vec(&z)
    }

    /// Proposal offsets `±d` from the mean, sharing one Student-t scale.
    fn propose_mirrored<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<S>, Vec<S>) {
        let dof = self.params.proposal_dof;
        let scale = if dof.is_finite() {
            let chi2: f64 = rng.sample(ChiSquared::new(dof).expect("dof > 2"));
            S::c((dof / chi2).sqrt())
        } else {
            S::one()
        };
        let d = self.scaled_noise(rng, scale);
        let m = &self.proposal_mean;
        (
            m.iter().zip(&d).map(|(&m, &d)| m + d).collect(),
            m.iter().zip(&d).map(|(&m, &d)| m - d).collect(),
        )
    }

    /// Proposal log density up to a constant.
    fn log_proposal(&self, end: &[S]) -> S {
        let d: Vec<S> = end
            .iter()
            .zip(&self.proposal_mean)
            .map(|(&x, &m)| x - m)
            .collect();
        let r2 = self.g.quadratic_form(&d) / self.params.tau;
        let dof = self.params.proposal_dof;
        if dof.is_finite() {
            let n = S::count(d.len());
            let nu = S::c(dof);
            -S::half() * (nu + n) * (r2 / nu).ln_1p()
        } else {
            -S::half() * r2
        }
    }

    fn delta(&self, end: &[S]) -> Vec<S> {
        end.iter().zip(self.start.coords()).map(|(&b, &a)| b - a).collect()
    }

    fn quadratic(&self, end: &[S], delta: &[S]) -> Result<S> {
        Ok(match self.params.form {
            QuadraticForm::StartPoint => self.g.quadratic_form(delta),
            QuadraticForm::Midpoint => {
                let mid: Vec<S> = self
                    .start
                    .coords()
                    .iter()
                    .zip(end)
                    .map(|(&a, &b)| S::half() * (a + b))
                    .collect();
                metric_unchecked(self.model, &mid)?.quadratic_form(delta)
            }
        })
    }

    /// Unnormalized log density at `end`; `-∞` outside the domain.
    pub fn log_density(&self, end: &[S]) -> Result<S> {
        if !self.model.contains(end) {
            return Ok(S::neg_infinity());
        }
        let delta = self.delta(end);
        let q = self.quadratic(end, &delta)?;
        Ok(log_volume_unchecked(self.model, end)? + dot(&self.grad, &delta)
            - q / (S::two() * self.params.tau))
    }

    /// `log(target / proposal)` up to a constant, for an in-domain `end`.
    fn log_weight(&self, end: &[S]) -> Result<S> {
        Ok(self.log_density(end)? - self.log_proposal(end))
    }

    fn finish(&self, end: Vec<S>, rejects: usize) -> StepSample<S> {
        StepSample {
            start: self.start.clone(),
            delta: self.delta(&end),
            end: ManifoldPoint::new(end),
            rejects,
        }
    }

    fn too_many(&self, rejects: usize) -> Error {
        Error::MaxRejects {
            rejects,
            point: self.start.to_f64(),
        }
    }

    /// Independence Metropolis–Hastings draw from the kernel.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<StepSample<S>> {
        let mut current = if self.model.contains(&self.proposal_mean) {
            self.proposal_mean.clone()
        } else {
            self.start.coords().to_vec()
        };
        let mut lw_current = self.log_weight(&current)?;
        let mut rejects = 0usize;
        let mut accepted = 0usize;
        let mut iteration = 0usize;
        while iteration < self.params.burn_in || accepted == 0 {
            iteration += 1;
            let proposal = self.propose(rng);
            let u: S = uniform(rng);
            if !self.model.contains(&proposal) {
                rejects += 1;
            } else {
                let lw = self.log_weight(&proposal)?;
                if u.ln() < lw - lw_current {
                    current = proposal;
                    lw_current = lw;
                    accepted += 1;
                } else {
                    rejects += 1;
                }
            }
            if rejects > self.params.max_rejects {
                return Err(self.too_many(rejects));
            }
        }
        Ok(self.finish(current, rejects))
    }

    /// Two draws from the kernel whose chains see mirrored proposals and
    /// share their acceptance uniforms. Each draw is exact on its own; their
    /// average has much smaller variance than two independent draws.
    pub fn sample_antithetic<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
    ) -> Result<(StepSample<S>, StepSample<S>)> {
        let start = if self.model.contains(&self.proposal_mean) {
            self.proposal_mean.clone()
        } else {
            self.start.coords().to_vec()
        };
        let lw0 = self.log_weight(&start)?;
        let mut current = [start.clone(), start];
        let mut lw_current = [lw0, lw0];
        let mut rejects = [0usize; 2];
        let mut accepted = [0usize; 2];
        let mut iteration = 0usize;
        while iteration < self.params.burn_in || accepted.contains(&0) {
            iteration += 1;
            let (plus, minus) = self.propose_mirrored(rng);
            let u: S = uniform(rng);
            for (c, proposal) in [plus, minus].into_iter().enumerate() {
                if !self.model.contains(&proposal) {
                    rejects[c] += 1;
                    continue;
                }
                let lw = self.log_weight(&proposal)?;
                if u.ln() < lw - lw_current[c] {
                    current[c] = proposal;
                    lw_current[c] = lw;
                    accepted[c] += 1;
                } else {
                    rejects[c] += 1;
                }
            }
            if rejects[0].max(rejects[1]) > self.params.max_rejects {
                return Err(self.too_many(rejects[0].max(rejects[1])));
            }
        }
        let [a, b] = current;
        Ok((self.finish(a, rejects[0]), self.finish(b, rejects[1])))
    }

    /// Draw from the Gaussian proposal alone, retrying out-of-domain draws.
    pub fn sample_gaussian<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<StepSample<S>> {
        let mut rejects = 0;
        loop {
            let proposal = self.propose_gaussian(rng);
            if self.model.contains(&proposal) {
                return Ok(self.finish(proposal, rejects));
            }
            rejects += 1;
            if rejects > self.params.max_rejects {
                return Err(self.too_many(rejects));
            }
        }
    }
}

/// `log g^{1/2}(A′) + ∂S(A)·ΔA − ΔAᵀ g ΔA / 2τ`, unnormalized.
pub fn log_kernel_density<S: Real>(
    model: &ExpFamilyModel<S>,
    start: &ManifoldPoint<S>,
    end: &ManifoldPoint<S>,
    tau: S,
    form: QuadraticForm,
) -> Result<S> {
    model.check_point(end)?;
    let ctx = StepContext::new(model, start, StepParams::new(tau)?.with_form(form))?;
    ctx.log_density(end.coords())
}

pub fn sample_step<S: Real>(
    model: &ExpFamilyModel<S>,
    start: &ManifoldPoint<S>,
    params: &StepParams<S>,
    seed: u64,
) -> Result<StepSample<S>> {
    let mut rng = rng::stream(seed, &[]);
    StepContext::new(model, start, *params)?.sample(&mut rng)
}

/// First-order sampler that ignores the `g^{1/2}(A′)` factor and the
/// curvature of the quadratic form. Accurate to O(τ) in the first moment
/// up to the `Γ` term.
pub fn gaussian_step_approx<S: Real>(
    model: &ExpFamilyModel<S>,
    start: &ManifoldPoint<S>,
    params: &StepParams<S>,
    seed: u64,
) -> Result<StepSample<S>> {
    let mut rng = rng::stream(seed, &[]);
    StepContext::new(model, start, *params)?.sample_gaussian(&mut rng)
}

/// Normalizer of the kernel and an independent check of it.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Normalization {
    /// `log 𝒵(A)` from adaptive quadrature (1-D) or a tensor rule (2-D).
    pub log_normalizer: f64,
    /// `∫ P(A′|A) dA′` with the normalizer above, on a different rule.
    pub integral: f64,
}

/// Integration box around the proposal, clipped to the domain bounds.
fn integration_box<S: Real>(ctx: &StepContext<'_, S>, width: f64) -> Vec<(f64, f64)> {
    let domain = ctx.model.domain();
    let margin = domain.margin.f64();
    (0..ctx.proposal_mean.len())
        .map(|i| {
            let sd: f64 = (0..=i)
                .map(|k| ctx.proposal_chol[(i, k)].f64().powi(2))
                .sum::<f64>()
                .sqrt();
            let m = ctx.proposal_mean[i].f64();
            let (lo, hi) = domain.bounds[i];
            (
                (m - width * sd).max(lo.f64() + margin),
                (m + width * sd).min(hi.f64() - margin),
            )
        })
        .collect()
}

fn tensor_integral<S: Real>(
    ctx: &StepContext<'_, S>,
    bx: &[(f64, f64)],
    panels: usize,
    order: usize,
    f: impl Fn(f64) -> f64,
) -> Result<f64> {
    let rx = composite_gauss_legendre(bx[0].0, bx[0].1, panels, order);
    let ry = composite_gauss_legendre(bx[1].0, bx[1].1, panels, order);
    let mut total = 0.0;
    for &(x, wx) in &rx {
        let mut row = 0.0;
        for &(y, wy) in &ry {
            let ld = ctx.log_density(&[S::c(x), S::c(y)])?.f64();
            if ld.is_finite() {
                row += wy * f(ld);
            }
        }
        total += wx * row;
    }
    Ok(total)
}

pub fn kernel_normalization<S: Real>(
    model: &ExpFamilyModel<S>,
    start: &ManifoldPoint<S>,
    tau: S,
    form: QuadraticForm,
) -> Result<Normalization> {
    let ctx = StepContext::new(model, start, StepParams::new(tau)?.with_form(form))?;
    let peak_at = if model.contains(&ctx.proposal_mean) {
        ctx.proposal_mean.clone()
    } else {
        start.coords().to_vec()
    };
    let shift = ctx.log_density(&peak_at)?.f64();
    match model.dim() {
        1 => {
            let bx = integration_box(&ctx, 40.0)[0];
            let density = |x: f64| -> f64 {
                match ctx.log_density(&[S::c(x)]) {
                    Ok(ld) if ld.is_finite() => (ld.f64() - shift).exp(),
                    _ => 0.0,
                }
            };
            let opts = QuadratureOptions {
                abs_tol: 1e-13,
                rel_tol: 1e-13,
                max_intervals: 4000,
            };
            let z = integrate(density, bx.0, bx.1, bx.0, 1.0, &opts)?.value;
            let log_z = z.ln() + shift;
            let check: f64 = composite_gauss_legendre(bx.0, bx.1, 400, 20)
                .iter()
                .map(|&(x, w)| w * (density(x).ln() + shift - log_z).exp())
                .sum();
            Ok(Normalization {
                log_normalizer: log_z,
                integral: check,
            })
        }
        2 => {
            let bx = integration_box(&ctx, 12.0);
            let z = tensor_integral(&ctx, &bx, 60, 10, |ld| (ld - shift).exp())?;
            let log_z = z.ln() + shift;
            let check = tensor_integral(&ctx, &bx, 47, 12, |ld| (ld - log_z).exp())?;
            Ok(Normalization {
                log_normalizer: log_z,
                integral: check,
            })
        }
        n => Err(Error::invalid(format!(
            "kernel normalization supports 1-D and 2-D manifolds, got {n}-D"
        ))),
    }
}

/// Raw moments `⟨ΔA⟩, ⟨ΔA²⟩, ⟨ΔA³⟩` of the normalized 1-D kernel by
/// adaptive quadrature. Validation route for the Monte Carlo estimates.
pub fn kernel_moments_quadrature<S: Real>(
    model: &ExpFamilyModel<S>,
    start: &ManifoldPoint<S>,
    tau: S,
    form: QuadraticForm,
) -> Result<[f64; 3]> {
    if model.dim() != 1 {
        return Err(Error::invalid("quadrature moments need a 1-D manifold"));
    }
    let ctx = StepContext::new(model, start, StepParams::new(tau)?.with_form(form))?;
    let bx = integration_box(&ctx, 40.0)[0];
    let a = start.coords()[0].f64();
    let shift = ctx.log_density(&ctx.proposal_mean)?.f64();
    let spread = tau.f64().sqrt();
    let weighted = |k: i32| -> Result<f64> {
        let opts = QuadratureOptions {
            abs_tol: 1e-13 * spread.powi(k + 1),
            rel_tol: 1e-12,
            max_intervals: 4000,
        };
        Ok(integrate(
            |x: f64| match ctx.log_density(&[S::c(x)]) {
                Ok(ld) if ld.is_finite() => (ld.f64() - shift).exp() * (x - a).powi(k),
                _ => 0.0,
            },
            bx.0,
            bx.1,
            bx.0,
            1.0,
            &opts,
        )?
        .value)
    };
    let z = weighted(0)?;
    Ok([weighted(1)? / z, weighted(2)? / z, weighted(3)? / z])
}

/// Tabulated CDF `(x, F(x))` of the normalized 1-D kernel at the ends of
/// `panels` equal Gauss–Legendre panels covering the kernel's mass.
pub fn kernel_cdf_1d<S: Real>(
    model: &ExpFamilyModel<S>,
    start: &ManifoldPoint<S>,
    tau: S,
    form: QuadraticForm,
    panels: usize,
) -> Result<Vec<(f64, f64)>> {
    if model.dim() != 1 {
        return Err(Error::invalid("the tabulated CDF needs a 1-D manifold"));
    }
    if panels == 0 {
        return Err(Error::invalid("need at least one panel"));
    }
    let ctx = StepContext::new(model, start, StepParams::new(tau)?.with_form(form))?;
    let bx = integration_box(&ctx, 12.0)[0];
    let log_z = kernel_normalization(model, start, tau, form)?.log_normalizer;
    let rule = composite_gauss_legendre(bx.0, bx.1, panels, 10);
    let h = (bx.1 - bx.0) / panels as f64;
    let mut table = Vec::with_capacity(panels + 1);
    table.push((bx.0, 0.0));
    let mut acc = 0.0;
    for (p, chunk) in rule.chunks(10).enumerate() {
        for &(x, w) in chunk {
            if let Ok(ld) = ctx.log_density(&[S::c(x)]) {
                if ld.is_finite() {
                    acc += w * (ld.f64() - log_z).exp();
                }
            }
        }
        table.push((bx.0 + (p + 1) as f64 * h, acc));
    }
    Ok(table)
}

/// Linear interpolation in a table from [`kernel_cdf_1d`].
pub fn interpolate_cdf(table: &[(f64, f64)], x: f64) -> f64 {
    let i = table.partition_point(|&(t, _)| t <= x);
    if i == 0 {
        return 0.0;
    }
    if i == table.len() {
        return table[i - 1].1;
    }
    let ((x0, f0), (x1, f1)) = (table[i - 1], table[i]);
    f0 + (f1 - f0) * (x - x0) / (x1 - x0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{mean_and_variance, normal_cdf, ks_distance};
    use approx::assert_relative_eq;

    fn pt(a: &[f64]) -> ManifoldPoint<f64> {
        ManifoldPoint::from_f64(a)
    }

    #[test]
    fn zero_step_density_is_log_volume() {
        let b = ExpFamilyModel::<f64>::bernoulli();
        let p = pt(&[0.5]);
        for form in [QuadraticForm::Midpoint, QuadraticForm::StartPoint] {
            let ld = log_kernel_density(&b, &p, &p, 0.01, form).unwrap();
            assert_relative_eq!(ld, 2f64.ln(), epsilon = 1e-15);
        }
    }

    #[test]
    fn flat_family_density_is_gaussian() {
        // complete the square: −A Δ − Δ²/2τ = −(Δ + τA)²/2τ + τA²/2
        let g = ExpFamilyModel::<f64>::gaussian_mean();
        let (a, tau) = (1.3, 0.02);
        let p = pt(&[a]);
        for x in [0.9, 1.25, 1.6] {
            let ld = log_kernel_density(&g, &p, &pt(&[x]), tau, QuadraticForm::Midpoint).unwrap();
            let d = x - a;
            let expected = -(d + tau * a).powi(2) / (2.0 * tau) + tau * a * a / 2.0;
            assert_relative_eq!(ld, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn tabulated_cdf_matches_gaussian() {
        let g = ExpFamilyModel::<f64>::gaussian_mean();
        let (a, tau) = (1.0, 0.01);
        let table = kernel_cdf_1d(&g, &pt(&[a]), tau, QuadraticForm::Midpoint, 2000).unwrap();
        for x in [0.8, 0.95, 0.99, 1.05, 1.2] {
            let exact = normal_cdf(x, a - tau * a, tau.sqrt());
            assert!((interpolate_cdf(&table, x) - exact).abs() < 1e-5, "{x}");
        }
        assert!((table.last().unwrap().1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bernoulli_normalizes() {
        let b = ExpFamilyModel::<f64>::bernoulli();
        let n = kernel_normalization(&b, &pt(&[0.5]), 0.01, QuadraticForm::Midpoint).unwrap();
        assert!((n.integral - 1.0).abs() < 1e-8, "{n:?}");
    }

    #[test]
    fn quadrature_moments_follow_drift_law() {
        // Bernoulli at A = 0.75: drift g⁻¹∂S − Γ/2 = −0.33099, diffusion 0.1875
        let b = ExpFamilyModel::<f64>::bernoulli();
        let p = pt(&[0.75]);
        let drift = 0.1875 * (1.0f64 / 3.0).ln() - 0.125;
        let tau = 1e-4;
        let m = kernel_moments_quadrature(&b, &p, tau, QuadraticForm::Midpoint).unwrap();
        assert_relative_eq!(m[0] / tau, drift, max_relative = 2e-3);
        assert_relative_eq!(m[1] / tau, 0.1875, max_relative = 2e-3);
        // the frozen-metric form drifts by +Γ instead of −Γ/2
        let m = kernel_moments_quadrature(&b, &p, tau, QuadraticForm::StartPoint).unwrap();
        assert_relative_eq!(m[0] / tau, drift + 0.375, epsilon = 1e-3);
    }

    #[test]
    fn sampling_is_deterministic() {
        for model in [
            ExpFamilyModel::<f64>::bernoulli(),
            ExpFamilyModel::categorical3(),
        ] {
            let p = ManifoldPoint::new(vec![0.3; model.dim()]);
            let params = StepParams::new(0.01).unwrap();
            let a = sample_step(&model, &p, &params, 99).unwrap();
            let b = sample_step(&model, &p, &params, 99).unwrap();
            assert_eq!(a, b);
            let c = gaussian_step_approx(&model, &p, &params, 99).unwrap();
            assert_eq!(c, gaussian_step_approx(&model, &p, &params, 99).unwrap());
            assert_ne!(a, sample_step(&model, &p, &params, 100).unwrap());
        }
    }

    #[test]
    fn gaussian_mean_steps_match_closed_form() {
        let g = ExpFamilyModel::<f64>::gaussian_mean();
        let p = pt(&[1.0]);
        let params = StepParams::new(0.01).unwrap();
        let n = 20_000;
        let ends: Vec<f64> = (0..n)
            .map(|i| sample_step(&g, &p, &params, i).unwrap().end.coords()[0])
            .collect();
        let d = ks_distance(&ends, |x| normal_cdf(x, 0.99, 0.1));
        assert!(d < 1.63 / (n as f64).sqrt(), "KS {d}");
        let (mean, _) = mean_and_variance(&ends);
        assert!((mean - 0.99).abs() < 4.0 * 0.1 / (n as f64).sqrt());
    }

    #[test]
    fn variance_scales_with_tau() {
        let b = ExpFamilyModel::<f64>::bernoulli();
        let p = pt(&[0.5]);
        let n = 20_000u64;
        for tau in [1e-2, 1e-3, 1e-4] {
            let params = StepParams::new(tau).unwrap();
            let deltas: Vec<f64> = (0..n)
                .map(|i| sample_step(&b, &p, &params, i).unwrap().delta[0])
                .collect();
            let (_, var) = mean_and_variance(&deltas);
            // var/τ ≈ g⁻¹ = 0.25 with relative sampling error √(2/n) ≈ 1%
            assert!((var / tau - 0.25).abs() < 0.25 * 0.05, "tau {tau}: {}", var / tau);
        }
    }

    #[test]
    fn too_large_tau_hits_max_rejects() {
        let b = ExpFamilyModel::<f64>::bernoulli();
        let p = pt(&[0.5]);
        let params = StepParams::new(1e6).unwrap().with_max_rejects(5);
        assert!(matches!(
            gaussian_step_approx(&b, &p, &params, 1),
            Err(Error::MaxRejects { .. })
        ));
        assert!(params.check_at(&b, &p).unwrap() < 0.99);
    }

    #[test]
    fn invalid_tau_is_rejected() {
        assert!(StepParams::<f64>::new(-0.1).is_err());
        assert!(StepParams::<f64>::new(0.0).is_err());
        assert!(StepParams::<f64>::new(f64::NAN).is_err());
    }

    #[test]
    fn single_precision_sampler_runs() {
        let b = ExpFamilyModel::<f32>::bernoulli();
        let p = ManifoldPoint::new(vec![0.4f32]);
        let params = StepParams::new(0.01f32).unwrap();
        let s = sample_step(&b, &p, &params, 5).unwrap();
        assert!(b.contains(s.end.coords()));
    }

    #[test]
    fn proposal_dof_is_validated() {
        let p = StepParams::<f64>::new(0.01).unwrap();
        assert!(p.with_proposal_dof(2.0).is_err());
        assert!(p.with_proposal_dof(f64::NAN).is_err());
        assert!(p.with_proposal_dof(f64::INFINITY).is_ok());
    }

    #[test]
    fn mh_matches_quadrature_for_either_proposal() {
        let b = ExpFamilyModel::<f64>::bernoulli();
        let p = pt(&[0.75]);
        let tau = 0.01;
        let m = kernel_moments_quadrature(&b, &p, tau, QuadraticForm::Midpoint).unwrap();
        for dof in [5.0, f64::INFINITY] {
            let params = StepParams::new(tau).unwrap().with_proposal_dof(dof).unwrap();
            let ctx = StepContext::new(&b, &p, params).unwrap();
            let mut rng = rng::stream(17, &[]);
            let d: Vec<f64> = (0..40_000)
                .map(|_| ctx.sample(&mut rng).unwrap().delta[0])
                .collect();
            let (mean, var) = mean_and_variance(&d);
            let se = (var / d.len() as f64).sqrt();
            assert!((mean - m[0]).abs() < 4.0 * se, "dof {dof}: {mean} vs {}", m[0]);
        }
    }

    #[test]
    fn antithetic_pairs_are_exact_and_less_noisy() {
        let b = ExpFamilyModel::<f64>::bernoulli();
        let p = pt(&[0.75]);
        let tau = 0.01;
        let m = kernel_moments_quadrature(&b, &p, tau, QuadraticForm::Midpoint).unwrap();
        let ctx = StepContext::new(&b, &p, StepParams::new(tau).unwrap()).unwrap();
        let mut rng = rng::stream(23, &[]);
        let (mut first, mut second, mut avg) = (vec![], vec![], vec![]);
        for _ in 0..20_000 {
            let (s, t) = ctx.sample_antithetic(&mut rng).unwrap();
            first.push(s.delta[0]);
            second.push(t.delta[0]);
            avg.push(0.5 * (s.delta[0] + t.delta[0]));
        }
        for xs in [&first, &second, &avg] {
            let (mean, var) = mean_and_variance(xs);
            assert!((mean - m[0]).abs() < 4.0 * (var / xs.len() as f64).sqrt());
        }
        let (_, v1) = mean_and_variance(&first);
        let (_, va) = mean_and_variance(&avg);
        assert!(va < 0.1 * v1, "pair variance {va} vs single {v1}");
    }
}
