//! Finite-volume solver for the invariant Fokker–Planck equation
//!
//! ```text
//! ∂_t p = −(1/√g) ∂_i(√g p v^i),   v^i = g^{ij}∂_jS − (g^{ij}/2p) ∂_j p
//! ```
//!
//! on 1-D and 2-D manifolds. The grid stores the invariant density `p`;
//! the scalar density is `P = p√g`. Fluxes `F^i = √g (p g^{ij}∂_jS − ½g^{ij}∂_jp)`
//! live on cell faces and boundary faces carry no flux, so total probability
//! `Σ p_c m_c` (with `m_c = ∫_cell √g dA`) is conserved up to round-off.
//!
//! The default [`FluxScheme::Fitted`] writes the flux in the equivalent form
//! `−½√g g^{ij} e^{2S} ∂_j(p e^{−2S})` and differences `p e^{−2S}`; it is
//! second order and leaves `p ∝ e^{2S}` exactly stationary.
//! [`FluxScheme::Central`] differences `p` directly and has an O(Δ²)
//! stationary residual.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exp_family::{ExpFamilyModel, Family, ManifoldPoint};
use crate::geometry::{self, log_volume_unchecked};
use crate::linalg::Matrix;
use crate::quadrature::{gauss_legendre, integrate, QuadratureOptions};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FluxScheme {
    #[default]
    Fitted,
    Central,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeScheme {
    /// Heun's method, subject to the CFL bound.
    #[default]
    ExplicitRk2,
    /// Crank–Nicolson along grid lines; Strang-split by axis in 2-D with
    /// the mixed-derivative part advanced explicitly in the middle.
    SemiImplicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bounds: Vec<(f64, f64)>,
    pub cells: Vec<usize>,
}

/// Row-sparse linear operator, rows in cell order, columns sorted.
#[derive(Debug, Clone, Default)]
struct Sparse<S> {
    rows: Vec<Vec<(usize, S)>>,
}

impl<S: Real> Sparse<S> {
    fn new(n: usize) -> Self {
        Self {
            rows: vec![Vec::new(); n],
        }
    }

    fn add(&mut self, r: usize, c: usize, v: S) {
        self.rows[r].push((c, v));
    }

    fn compress(&mut self) {
        for row in &mut self.rows {
            row.sort_by_key(|e| e.0);
            let mut out: Vec<(usize, S)> = Vec::with_capacity(row.len());
            for &(c, v) in row.iter() {
                match out.last_mut() {
                    Some(last) if last.0 == c => last.1 += v,
                    _ => out.push((c, v)),
                }
            }
            *row = out;
        }
    }

    fn apply(&self, p: &[S]) -> Vec<S> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(c, v)| v * p[c]).sum())
            .collect()
    }

    fn is_empty(&self) -> bool {
        self.rows.iter().all(Vec::is_empty)
    }

    fn coefficient(&self, r: usize, c: usize) -> S {
        self.rows[r]
            .iter()
            .find(|e| e.0 == c)
            .map_or(S::zero(), |e| e.1)
    }
}

/// Linear operator of the flux divergence, split for the Strang scheme.
#[derive(Debug, Clone)]
struct Operator<S> {
    /// Along-axis couplings; `axis[a]` is tridiagonal along axis-`a` lines.
    axis: Vec<Sparse<S>>,
    /// Mixed-derivative couplings (2-D only).
    cross: Sparse<S>,
    /// The same couplings per face, for the positivity limiter.
    cross_faces: Vec<CrossFace<S>>,
}

/// Mixed-derivative flux `Σ α_c p_c` through one face; it changes `p_l` at
/// rate `to_l · flux` and `p_r` at rate `to_r · flux` (opposite signs).
#[derive(Debug, Clone)]
struct CrossFace<S> {
    l: usize,
    r: usize,
    to_l: S,
    to_r: S,
    alpha: Vec<(usize, S)>,
}

#[derive(Debug, Clone)]
pub struct FpGrid<S> {
    model: ExpFamilyModel<S>,
    pub bounds: Vec<(S, S)>,
    pub cells: Vec<usize>,
    pub spacing: Vec<S>,
    /// Cell-center coordinates per axis.
    pub centers: Vec<Vec<S>>,
    /// Whether a cell's center lies in the domain; inactive cells hold no mass.
    pub active: Vec<bool>,
    /// Cell average of `√det g`.
    pub sqrt_g: Vec<S>,
    /// `√det g` at the center of each interior face, per axis (`NaN` where
    /// either neighbor is inactive).
    pub sqrt_g_faces: Vec<Vec<S>>,
    /// `∫_cell √g dA`.
    pub cell_measure: Vec<S>,
    pub p: Vec<S>,
    pub t: S,
    pub scheme: FluxScheme,
    /// `2S` at cell centers (`−∞` for inactive cells).
    two_s: Vec<S>,
    op: Operator<S>,
    cfl_limit: S,
}

/// Outcome of a run of [`FpGrid::evolve`].
#[derive(Debug, Clone, Serialize)]
pub struct EvolveReport {
    pub steps: usize,
    pub t: f64,
    pub dt: f64,
    /// Largest `|Δ total mass|` over single steps.
    pub max_step_mass_drift: f64,
    /// `|total(t_end) − total(t_start)|`
    pub total_mass_drift: f64,
    pub min_density: f64,
}

impl<S: Real> FpGrid<S> {
    pub fn new(model: &ExpFamilyModel<S>, spec: &GridSpec, scheme: FluxScheme) -> Result<Self> {
        let n = model.dim();
        if !(1..=2).contains(&n) {
            return Err(Error::invalid(format!(
                "Fokker-Planck grids support 1-D and 2-D manifolds, got {n}-D"
            )));
        }
        if spec.bounds.len() != n || spec.cells.len() != n {
            return Err(Error::invalid("grid spec dimension does not match the model"));
        }
        let domain = model.domain();
        let margin = domain.margin.f64();
        for (a, (&(lo, hi), &cells)) in spec.bounds.iter().zip(&spec.cells).enumerate() {
            let (dlo, dhi) = (domain.bounds[a].0.f64(), domain.bounds[a].1.f64());
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::invalid(format!("grid bounds on axis {a} must be finite and increasing")));
            }
            if lo < dlo + margin || hi > dhi - margin {
                return Err(Error::invalid(format!(
                    "grid bounds [{lo}, {hi}] on axis {a} leave the domain [{dlo}, {dhi}] (margin {margin})"
                )));
            }
            if cells < 3 {
                return Err(Error::invalid(format!("need at least 3 cells on axis {a}")));
            }
        }
        let bounds: Vec<(S, S)> = spec.bounds.iter().map(|&(l, h)| (S::c(l), S::c(h))).collect();
        let spacing: Vec<S> = bounds
            .iter()
            .zip(&spec.cells)
            .map(|(&(l, h), &c)| (h - l) / S::count(c))
            .collect();
        let centers: Vec<Vec<S>> = bounds
            .iter()
            .zip(&spec.cells)
            .zip(&spacing)
            .map(|((&(l, _), &c), &d)| (0..c).map(|i| l + (S::count(i) + S::half()) * d).collect())
            .collect();

        let mut grid = Self {
            model: model.clone(),
            bounds,
            cells: spec.cells.clone(),
            spacing,
            centers,
            active: Vec::new(),
            sqrt_g: Vec::new(),
            sqrt_g_faces: Vec::new(),
            cell_measure: Vec::new(),
            p: Vec::new(),
            t: S::zero(),
            scheme,
            two_s: Vec::new(),
            op: Operator {
                axis: Vec::new(),
                cross: Sparse::new(0),
                cross_faces: Vec::new(),
            },
            cfl_limit: S::infinity(),
        };
        grid.fill_cells()?;
        if !grid.active.iter().any(|&a| a) {
            return Err(Error::invalid("no grid cell lies inside the domain"));
        }
        grid.build_operator()?;
        grid.p = vec![S::zero(); grid.len()];
        Ok(grid)
    }

    /// Grid spanning ±6 standard deviations of the stationary density
    /// `P_∞ ∝ √g e^{2S}`, clipped to the domain margin.
    pub fn default_spec(model: &ExpFamilyModel<S>, cells: &[usize]) -> Result<GridSpec> {
        let domain = model.domain();
        let margin = domain.margin.f64();
        let clip = |a: usize, lo: f64, hi: f64| {
            (
                lo.max(domain.bounds[a].0.f64() + margin),
                hi.min(domain.bounds[a].1.f64() - margin),
            )
        };
        let bounds = match model.family() {
            Family::Bernoulli => vec![clip(0, 0.0, 1.0)],
            Family::GaussianMean => {
                let sd = 0.5f64.sqrt();
                vec![clip(0, -6.0 * sd, 6.0 * sd)]
            }
            // A1 ~ N(0, ½) and A2 = v + A1² with v ~ Gamma(½, 1): mean 1, sd 1.
            Family::GaussianMeanSecondMoment => {
                let sd = 0.5f64.sqrt();
                vec![clip(0, -6.0 * sd, 6.0 * sd), clip(1, 0.0, 7.0)]
            }
            Family::Categorical3 => vec![clip(0, 0.0, 1.0), clip(1, 0.0, 1.0)],
            Family::Custom(_) => {
                if model.dim() != 1 {
                    return Err(Error::invalid("default grid bounds need a 1-D custom family"));
                }
                let (mean, sd) = stationary_moments_1d(model)?;
                vec![clip(0, mean - 6.0 * sd, mean + 6.0 * sd)]
            }
        };
        if cells.len() != bounds.len() {
            return Err(Error::invalid("cell counts do not match the model dimension"));
        }
        Ok(GridSpec {
            bounds,
            cells: cells.to_vec(),
        })
    }

    pub fn model(&self) -> &ExpFamilyModel<S> {
        &self.model
    }

    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    pub fn len(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn index(&self, ix: &[usize]) -> usize {
        match ix.len() {
            1 => ix[0],
            _ => ix[0] * self.cells[1] + ix[1],
        }
    }

    fn multi_index(&self, c: usize) -> Vec<usize> {
        match self.dim() {
            1 => vec![c],
            _ => vec![c / self.cells[1], c % self.cells[1]],
        }
    }

    pub fn center(&self, c: usize) -> Vec<S> {
        self.multi_index(c)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.centers[a][i])
            .collect()
    }

    fn cell_volume(&self) -> S {
        self.spacing.iter().copied().fold(S::one(), |a, b| a * b)
    }

    fn sqrt_g_at(&self, a: &[S]) -> S {
        if !self.model.contains(a) {
            return S::zero();
        }
        log_volume_unchecked(&self.model, a).map_or(S::zero(), |l| l.exp())
    }

    fn fill_cells(&mut self) -> Result<()> {
        let n = self.len();
        let vol = self.cell_volume();
        self.active = vec![false; n];
        self.sqrt_g = vec![S::zero(); n];
        self.cell_measure = vec![S::zero(); n];
        self.two_s = vec![S::neg_infinity(); n];
        let (gx, gw) = gauss_legendre(6);
        for c in 0..n {
            let x = self.center(c);
            if !self.model.contains(&x) {
                continue;
            }
            self.active[c] = true;
            self.two_s[c] = S::two() * self.model.entropy(&ManifoldPoint::new(x.clone()))?;
            let measure = if self.dim() == 1 {
                let h = S::half() * self.spacing[0];
                let opts = QuadratureOptions {
                    abs_tol: 1e-13 * h.f64(),
                    rel_tol: 1e-11,
                    max_intervals: 200,
                };
                integrate(|a: S| self.sqrt_g_at(&[a]), x[0] - h, x[0] + h, x[0], h, &opts)?.value
            } else {
                let mut m = S::zero();
                for (xi, wi) in gx.iter().zip(&gw) {
                    for (yi, wj) in gx.iter().zip(&gw) {
                        let a = [
                            x[0] + S::c(0.5 * xi) * self.spacing[0],
                            x[1] + S::c(0.5 * yi) * self.spacing[1],
                        ];
                        m += S::c(0.25 * wi * wj) * self.sqrt_g_at(&a);
                    }
                }
                m * vol
            };
            if !(measure > S::zero()) || !measure.is_finite() {
                return Err(Error::invalid(format!(
                    "cell at {:?} has no finite volume",
                    x.iter().map(|v| v.f64()).collect::<Vec<_>>()
                )));
            }
            self.cell_measure[c] = measure;
            self.sqrt_g[c] = measure / vol;
        }
        Ok(())
    }

    /// Neighbor of cell `c` along `axis` in direction `step` (±1), if active.
    fn neighbor(&self, c: usize, axis: usize, step: isize) -> Option<usize> {
        let mut ix = self.multi_index(c);
        let j = ix[axis] as isize + step;
        if j < 0 || j >= self.cells[axis] as isize {
            return None;
        }
        ix[axis] = j as usize;
        let nb = self.index(&ix);
        self.active[nb].then_some(nb)
    }

    /// Assembles the flux-divergence operator. Flux through the face between
    /// `l` and `r = l + e_axis` is `Σ_k α_k p_k`; it leaves `l` and enters `r`.
    fn build_operator(&mut self) -> Result<()> {
        let n = self.len();
        let dim = self.dim();
        let mut axis_ops: Vec<Sparse<S>> = (0..dim).map(|_| Sparse::new(n)).collect();
        let mut cross = Sparse::new(n);
        let mut cross_faces = Vec::new();
        let mut faces = vec![vec![S::nan(); n]; dim];
        let vol = self.cell_volume();
        let shift = self
            .two_s
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(S::neg_infinity(), S::max);
        let e_inv: Vec<S> = self
            .two_s
            .iter()
            .map(|&s| if s.is_finite() { (shift - s).exp() } else { S::zero() })
            .collect();
        let mut limit = S::infinity();

        for l in 0..n {
            if !self.active[l] {
                continue;
            }
            let xl = self.center(l);
            let ginv_l = geometry::metric(&self.model, &ManifoldPoint::new(xl.clone()))?.inverse()?;
            let drift_l = ginv_l.mul_vec(&self.model.entropy_gradient(&ManifoldPoint::new(xl.clone()))?);
            let mut rate = S::zero();
            for a in 0..dim {
                let d = self.spacing[a];
                rate += ginv_l[(a, a)] / (d * d);
                for b in 0..dim {
                    if b != a {
                        rate += ginv_l[(a, b)].abs() / (d * self.spacing[b]);
                    }
                }
                if drift_l[a] != S::zero() {
                    limit = limit.min(S::c(0.4) * d / drift_l[a].abs());
                }
            }
            limit = limit.min(S::c(0.4) / rate);

            for a in 0..dim {
                let Some(r) = self.neighbor(l, a, 1) else { continue };
                let mut xf = xl.clone();
                xf[a] += S::half() * self.spacing[a];
                if !self.model.contains(&xf) {
                    continue;
                }
                let pf = ManifoldPoint::new(xf.clone());
                let sqrt_g = self.sqrt_g_at(&xf);
                faces[a][l] = sqrt_g;
                let ginv = geometry::metric(&self.model, &pf)?.inverse()?;
                let area = vol / self.spacing[a];
                // flux α coefficients as (cell, coefficient, is_cross)
                let mut alpha: Vec<(usize, S, bool)> = Vec::new();
                let half = S::half();
                match self.scheme {
                    FluxScheme::Fitted => {
                        let ef = (S::two() * self.model.entropy(&pf)? - shift).exp();
                        let k = -half * sqrt_g * ef;
                        let d = self.spacing[a];
                        alpha.push((r, k * ginv[(a, a)] * e_inv[r] / d, false));
                        alpha.push((l, -k * ginv[(a, a)] * e_inv[l] / d, false));
                        for b in (0..dim).filter(|&b| b != a) {
                            for (c, w) in self.cross_stencil(l, r, b, ginv[(a, b)] >= S::zero()) {
                                alpha.push((c, k * ginv[(a, b)] * w * e_inv[c], true));
                            }
                        }
                    }
                    FluxScheme::Central => {
                        let drift = ginv.mul_vec(&self.model.entropy_gradient(&pf)?);
                        let d = self.spacing[a];
                        let adv = sqrt_g * drift[a] * half;
                        let dif = half * sqrt_g * ginv[(a, a)] / d;
                        alpha.push((l, adv + dif, false));
                        alpha.push((r, adv - dif, false));
                        for b in (0..dim).filter(|&b| b != a) {
                            for (c, w) in self.cross_stencil(l, r, b, ginv[(a, b)] >= S::zero()) {
                                alpha.push((c, -half * sqrt_g * ginv[(a, b)] * w, true));
                            }
                        }
                    }
                }
                let (to_l, to_r) = (-area / self.cell_measure[l], area / self.cell_measure[r]);
                let mut face = CrossFace {
                    l,
                    r,
                    to_l,
                    to_r,
                    alpha: Vec::new(),
                };
                for (c, coef, is_cross) in alpha {
                    let target = if is_cross { &mut cross } else { &mut axis_ops[a] };
                    target.add(l, c, coef * to_l);
                    target.add(r, c, coef * to_r);
                    if is_cross {
                        face.alpha.push((c, coef));
                    }
                }
                if !face.alpha.is_empty() {
                    cross_faces.push(face);
                }
            }
        }
        axis_ops.iter_mut().for_each(Sparse::compress);
        cross.compress();
        // The fitted flux rescales coefficients by e^{2ΔS}; bound the
        // spectral radius of the assembled operator as well (Gershgorin).
        for c in (0..n).filter(|&c| self.active[c]) {
            let radius: S = axis_ops
                .iter()
                .chain(std::iter::once(&cross))
                .flat_map(|op| op.rows[c].iter().map(|e| e.1.abs()))
                .sum();
            if radius > S::zero() {
                limit = limit.min(S::one() / radius);
            }
        }
        self.op = Operator {
            axis: axis_ops,
            cross,
            cross_faces,
        };
        self.sqrt_g_faces = faces;
        self.cfl_limit = limit;
        Ok(())
    }

    /// Weights `w_c` with `∂_b u ≈ Σ w_c u_c` at the face between `l` and `r`.
    /// The two one-sided differences are picked by the sign of the mixed
    /// coefficient (`up_right`: forward in `r`, backward in `l`), which
    /// assembles into the positive-coefficient seven-point stencil for the
    /// mixed derivative. A difference touching an inactive cell is dropped.
    fn cross_stencil(&self, l: usize, r: usize, b: usize, up_right: bool) -> Vec<(usize, S)> {
        let w = S::one() / self.spacing[b];
        let one_sided = |c: usize, forward: bool| -> Option<[(usize, S); 2]> {
            if forward {
                self.neighbor(c, b, 1).map(|u| [(u, w), (c, -w)])
            } else {
                self.neighbor(c, b, -1).map(|dn| [(c, w), (dn, -w)])
            }
        };
        let parts: Vec<[(usize, S); 2]> = [one_sided(r, up_right), one_sided(l, !up_right)]
            .into_iter()
            .flatten()
            .collect();
        if parts.is_empty() {
            return Vec::new();
        }
        let scale = S::one() / S::count(parts.len());
        parts
            .into_iter()
            .flatten()
            .map(|(c, w)| (c, w * scale))
            .collect()
    }

    /// Largest explicit step allowed by the CFL bound.
    pub fn stable_dt(&self) -> S {
        self.cfl_limit
    }

    pub fn total_mass(&self) -> S {
        self.p.iter().zip(&self.cell_measure).map(|(&p, &m)| p * m).sum()
    }

    fn normalize(&mut self) -> Result<()> {
        let total = self.total_mass();
        if !(total > S::zero()) || !total.is_finite() {
            return Err(Error::invalid("density has no finite positive mass on the grid"));
        }
        self.p.iter_mut().for_each(|p| *p /= total);
        Ok(())
    }

    /// Sets `p` from a scalar density `P(A)` evaluated at cell centers, then
    /// normalizes so that `Σ p_c m_c = 1`.
    pub fn set_scalar_density(&mut self, density: impl Fn(&[S]) -> S) -> Result<()> {
        for c in 0..self.len() {
            self.p[c] = if self.active[c] {
                density(&self.center(c)) / self.sqrt_g[c]
            } else {
                S::zero()
            };
        }
        self.t = S::zero();
        self.normalize()
    }

    /// Sets the invariant density `p(A)` directly, normalized.
    pub fn set_invariant_density(&mut self, density: impl Fn(&[S]) -> S) -> Result<()> {
        for c in 0..self.len() {
            self.p[c] = if self.active[c] {
                density(&self.center(c))
            } else {
                S::zero()
            };
        }
        self.t = S::zero();
        self.normalize()
    }

    /// Normalized `p_∞ ∝ e^{2S}` on the grid.
    pub fn stationary_density(&self) -> Vec<S> {
        let shift = self
            .two_s
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(S::neg_infinity(), S::max);
        let p: Vec<S> = self
            .two_s
            .iter()
            .map(|&s| if s.is_finite() { (s - shift).exp() } else { S::zero() })
            .collect();
        let total: S = p.iter().zip(&self.cell_measure).map(|(&p, &m)| p * m).sum();
        p.into_iter().map(|p| p / total).collect()
    }

    /// Probability mass `P_c = p_c m_c` per cell.
    pub fn cell_masses(&self) -> Vec<S> {
        self.p.iter().zip(&self.cell_measure).map(|(&p, &m)| p * m).collect()
    }

    /// Scalar density `P = p √g` per cell.
    pub fn scalar_density(&self) -> Vec<S> {
        self.p.iter().zip(&self.sqrt_g).map(|(&p, &s)| p * s).collect()
    }

    /// Mean and covariance of the grid distribution (cell-center rule).
    pub fn moments(&self) -> (Vec<S>, Matrix<S>) {
        let n = self.dim();
        let masses = self.cell_masses();
        let total: S = masses.iter().copied().sum();
        let mut mean = vec![S::zero(); n];
        for (c, &m) in masses.iter().enumerate() {
            for (k, x) in self.center(c).into_iter().enumerate() {
                mean[k] += m * x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= total);
        let mut cov = Matrix::zeros(n, n);
        for (c, &m) in masses.iter().enumerate() {
            let x = self.center(c);
            for i in 0..n {
                for j in 0..n {
                    cov[(i, j)] += m * (x[i] - mean[i]) * (x[j] - mean[j]);
                }
            }
        }
        (mean, cov.scale(S::one() / total))
    }

    fn rhs(&self, p: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); p.len()];
        for op in self.op.axis.iter().chain(std::iter::once(&self.op.cross)) {
            for (o, v) in out.iter_mut().zip(op.apply(p)) {
                *o += v;
            }
        }
        out
    }

    /// Applies the full operator to `p`: the right-hand side `∂_t p`.
    pub fn time_derivative(&self, p: &[S]) -> Vec<S> {
        self.rhs(p)
    }

    /// Forward-Euler stage. Mixed-derivative fluxes are scaled face by face
    /// (never up) so that no cell loses more than it holds after the
    /// along-axis update; the axis part alone is monotone under the CFL bound.
    fn euler_stage(&self, p: &[S], dt: S, with_axis: bool) -> Vec<S> {
        let mut out = p.to_vec();
        if with_axis {
            for op in &self.op.axis {
                for (o, v) in out.iter_mut().zip(op.apply(p)) {
                    *o += dt * v;
                }
            }
        }
        let faces = &self.op.cross_faces;
        if faces.is_empty() {
            return out;
        }
        let flux: Vec<S> = faces
            .iter()
            .map(|f| f.alpha.iter().map(|&(c, a)| a * p[c]).sum())
            .collect();
        let mut loss = vec![S::zero(); p.len()];
        for (f, &q) in faces.iter().zip(&flux) {
            for (c, rate) in [(f.l, f.to_l), (f.r, f.to_r)] {
                let change = dt * q * rate;
                if change < S::zero() {
                    loss[c] -= change;
                }
            }
        }
        let ratio: Vec<S> = out
            .iter()
            .zip(&loss)
            .map(|(&have, &lose)| {
                let have = have.max(S::zero());
                if lose > have { have / lose } else { S::one() }
            })
            .collect();
        for (f, &q) in faces.iter().zip(&flux) {
            let theta = if q * f.to_l < S::zero() { ratio[f.l] } else { ratio[f.r] };
            out[f.l] += theta * dt * q * f.to_l;
            out[f.r] += theta * dt * q * f.to_r;
        }
        out
    }

    /// Heun's method as a convex combination of two Euler stages.
    fn heun(&self, p: &[S], dt: S, with_axis: bool) -> Vec<S> {
        let p1 = self.euler_stage(p, dt, with_axis);
        let p2 = self.euler_stage(&p1, dt, with_axis);
        p.iter().zip(&p2).map(|(&a, &b)| S::half() * (a + b)).collect()
    }

    /// Crank–Nicolson step of `∂_t p = A_axis p` along every axis line.
    fn cn_axis(&self, p: &mut [S], axis: usize, dt: S) {
        let op = &self.op.axis[axis];
        let h = S::half() * dt;
        let len = self.cells[axis];
        let lines: Vec<Vec<usize>> = if self.dim() == 1 {
            vec![(0..len).collect()]
        } else if axis == 0 {
            (0..self.cells[1])
                .map(|j| (0..len).map(|i| self.index(&[i, j])).collect())
                .collect()
        } else {
            (0..self.cells[0])
                .map(|i| (0..len).map(|j| self.index(&[i, j])).collect())
                .collect()
        };
        let explicit = op.apply(p);
        for line in lines {
            let m = line.len();
            let mut sub = vec![S::zero(); m];
            let mut diag = vec![S::one(); m];
            let mut sup = vec![S::zero(); m];
            let mut rhs = vec![S::zero(); m];
            for (k, &c) in line.iter().enumerate() {
                rhs[k] = p[c] + h * explicit[c];
                diag[k] = S::one() - h * op.coefficient(c, c);
                if k > 0 {
                    sub[k] = -h * op.coefficient(c, line[k - 1]);
                }
                if k + 1 < m {
                    sup[k] = -h * op.coefficient(c, line[k + 1]);
                }
            }
            // Thomas algorithm
            for k in 1..m {
                let w = sub[k] / diag[k - 1];
                diag[k] -= w * sup[k - 1];
                rhs[k] = rhs[k] - w * rhs[k - 1];
            }
            let mut x = vec![S::zero(); m];
            x[m - 1] = rhs[m - 1] / diag[m - 1];
            for k in (0..m - 1).rev() {
                x[k] = (rhs[k] - sup[k] * x[k + 1]) / diag[k];
            }
            for (k, &c) in line.iter().enumerate() {
                p[c] = if self.active[c] { x[k] } else { S::zero() };
            }
        }
    }

    /// Advances `p` by `dt`.
    pub fn step(&mut self, dt: S, time: TimeScheme) -> Result<()> {
        if !(dt > S::zero()) {
            return Err(Error::invalid("dt must be positive"));
        }
        let next = match time {
            TimeScheme::ExplicitRk2 => {
                if dt > self.cfl_limit {
                    return Err(Error::Cfl {
                        dt: dt.f64(),
                        limit: self.cfl_limit.f64(),
                    });
                }
                self.heun(&self.p, dt, true)
            }
            TimeScheme::SemiImplicit => {
                let mut p = self.p.clone();
                if self.dim() == 1 {
                    self.cn_axis(&mut p, 0, dt);
                } else {
                    let half = S::half() * dt;
                    self.cn_axis(&mut p, 0, half);
                    self.cn_axis(&mut p, 1, half);
                    if !self.op.cross.is_empty() {
                        if dt > self.cfl_limit {
                            return Err(Error::Cfl {
                                dt: dt.f64(),
                                limit: self.cfl_limit.f64(),
                            });
                        }
                        p = self.heun(&p, dt, false);
                    }
                    self.cn_axis(&mut p, 1, half);
                    self.cn_axis(&mut p, 0, half);
                }
                p
            }
        };
        let min = next.iter().copied().fold(S::infinity(), S::min);
        self.t += dt;
        if min < S::c(-1e-12) {
            return Err(Error::NegativeDensity {
                min: min.f64(),
                t: self.t.f64(),
            });
        }
        self.p = next;
        Ok(())
    }

    /// Steps to `t_end` with steps of at most `dt` (the last one shortened).
    pub fn evolve(&mut self, t_end: S, dt: S, time: TimeScheme) -> Result<EvolveReport> {
        if t_end < self.t {
            return Err(Error::invalid("t_end lies before the current time"));
        }
        let start_mass = self.total_mass();
        let mut max_drift = 0.0f64;
        let mut steps = 0;
        let mut min_density = self.p.iter().copied().fold(S::infinity(), S::min).f64();
        let eps = S::epsilon() * S::c(16.0) * t_end.abs().max(S::one());
        while t_end - self.t > eps {
            let h = dt.min(t_end - self.t);
            let before = self.total_mass();
            self.step(h, time)?;
            steps += 1;
            max_drift = max_drift.max((self.total_mass() - before).abs().f64());
            min_density = min_density.min(self.p.iter().copied().fold(S::infinity(), S::min).f64());
        }
        Ok(EvolveReport {
            steps,
            t: self.t.f64(),
            dt: dt.f64(),
            max_step_mass_drift: max_drift,
            total_mass_drift: (self.total_mass() - start_mass).abs().f64(),
            min_density,
        })
    }

    /// `‖p(dt) − p‖₂ / ‖p‖₂` after one explicit step from `p_∞`.
    pub fn stationary_residual(&self, dt: S) -> Result<S> {
        let mut probe = self.clone();
        probe.p = self.stationary_density();
        probe.t = S::zero();
        let before = probe.p.clone();
        probe.step(dt, TimeScheme::ExplicitRk2)?;
        let num: S = probe
            .p
            .iter()
            .zip(&before)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let den: S = before.iter().map(|&b| b * b).sum();
        Ok((num / den).sqrt())
    }

    /// Cell containing `a`, if it lies inside the grid and the cell is active.
    pub fn locate(&self, a: &[S]) -> Option<usize> {
        let mut ix = Vec::with_capacity(self.dim());
        for (k, &x) in a.iter().enumerate() {
            let (lo, hi) = self.bounds[k];
            if !(x >= lo && x < hi) {
                return None;
            }
            let i = ((x - lo) / self.spacing[k]).floor().to_usize()?;
            ix.push(i.min(self.cells[k] - 1));
        }
        let c = self.index(&ix);
        self.active[c].then_some(c)
    }
}

/// Mean and standard deviation of `P_∞ ∝ √g e^{2S}` for a 1-D family.
fn stationary_moments_1d<S: Real>(model: &ExpFamilyModel<S>) -> Result<(f64, f64)> {
    let domain = model.domain();
    let margin = domain.margin.f64();
    let (lo, hi) = (domain.bounds[0].0.f64() + margin, domain.bounds[0].1.f64() - margin);
    let a_star = model
        .mean_parameters(&crate::exp_family::DualCoordinates::zeros(1))
        .map(|p| p.coords()[0].f64())
        .unwrap_or(0.5 * (lo.max(-1.0) + hi.min(1.0)));
    let s_star = model
        .entropy(&ManifoldPoint::new(vec![S::c(a_star)]))
        .map(|s| s.f64())
        .unwrap_or(0.0);
    let density = |x: f64| -> f64 {
        let p = ManifoldPoint::new(vec![S::c(x)]);
        match (model.entropy(&p), geometry::volume_element(model, &p)) {
            (Ok(s), Ok(v)) => v.f64() * (2.0 * (s.f64() - s_star)).exp(),
            _ => 0.0,
        }
    };
    let opts = QuadratureOptions {
        abs_tol: 1e-10,
        rel_tol: 1e-8,
        max_intervals: 2000,
    };
    let m = |k: i32| integrate(|x: f64| density(x) * (x - a_star).powi(k), lo, hi, a_star, 1.0, &opts);
    let z = m(0)?.value;
    let m1 = m(1)?.value / z;
    let m2 = m(2)?.value / z;
    Ok((a_star + m1, (m2 - m1 * m1).max(0.0).sqrt()))
}

/// Histogram-vs-solver comparison.
#[derive(Debug, Clone, Serialize)]
pub struct DistanceReport {
    pub t: f64,
    pub samples: usize,
    /// Fraction of samples outside the grid's active cells.
    pub overflow: f64,
    /// `½ Σ_c |H_c − P_c| + ½ overflow`
    pub total_variation: f64,
    /// Active cells with solver mass above `1/N` but no samples.
    pub empty_cells: usize,
}

/// Total-variation distance between cell masses of `grid` and the
/// histogram of `points`.
pub fn compare_to_ensemble<S: Real>(grid: &FpGrid<S>, points: &[ManifoldPoint<S>]) -> Result<DistanceReport> {
    if points.is_empty() {
        return Err(Error::invalid("ensemble is empty"));
    }
    let mut counts = vec![0usize; grid.len()];
    let mut outside = 0usize;
    for p in points {
        match grid.locate(p.coords()) {
            Some(c) => counts[c] += 1,
            None => outside += 1,
        }
    }
    let n = points.len() as f64;
    let masses = grid.cell_masses();
    let total: f64 = masses.iter().map(|m| m.f64()).sum();
    let mut tv = 0.5 * outside as f64 / n;
    let mut empty = 0;
    for (c, &k) in counts.iter().enumerate() {
        let solver = masses[c].f64() / total;
        tv += 0.5 * (k as f64 / n - solver).abs();
        if grid.active[c] && k == 0 && solver > 1.0 / n {
            empty += 1;
        }
    }
    if empty > 0 {
        warn!("{empty} grid cells with solver mass above 1/N received no samples");
    }
    Ok(DistanceReport {
        t: grid.t.f64(),
        samples: points.len(),
        overflow: outside as f64 / n,
        total_variation: tv,
        empty_cells: empty,
    })
}
