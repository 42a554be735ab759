//! Ensembles of trajectories, short-step moment estimation, the
//! reciprocity regression and the predictive mixture over states.
//!
//! Work is split into units keyed by [`rng::derive_seed`]; rayon may run
//! them on any number of threads and results are reassembled in index
//! order, so outputs never depend on the degree of parallelism.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exp_family::{ExpFamilyModel, ManifoldPoint};
use crate::geometry;
use crate::linalg::Matrix;
use crate::kernel::{StepContext, StepParams};
use crate::rng;
use crate::scalar::Real;
use crate::stats::{line_fit, weighted_line_fit, Accumulator, MeanEstimate};

/// Runs `f` on a dedicated pool of `workers` threads (0 = rayon default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Which states of a trajectory to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recording {
    /// Every step.
    Full,
    /// Every `k`-th step plus the final one.
    Every(usize),
    /// Start and end only.
    Endpoints,
}

impl Recording {
    fn keeps(self, step: usize, n_steps: usize) -> bool {
        step == 0
            || step == n_steps
            || match self {
                Recording::Full => true,
                Recording::Every(k) => k > 0 && step.is_multiple_of(k),
                Recording::Endpoints => false,
            }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory<S> {
    pub id: usize,
    /// Seed of this trajectory's stream, derived from the root seed.
    pub seed: u64,
    pub steps: Vec<usize>,
    pub times: Vec<S>,
    pub points: Vec<ManifoldPoint<S>>,
}

impl<S: Real> Trajectory<S> {
    pub fn last(&self) -> &ManifoldPoint<S> {
        self.points.last().expect("trajectory has its start point")
    }
}

/// `n_trajectories` independent chains from a common start.
pub fn simulate<S: Real>(
    model: &ExpFamilyModel<S>,
    start: &ManifoldPoint<S>,
    params: &StepParams<S>,
    n_steps: usize,
    n_trajectories: usize,
    root_seed: u64,
) -> Result<Vec<Trajectory<S>>> {
    if n_trajectories == 0 {
        return Err(Error::invalid("n_trajectories must be positive"));
    }
    let starts = vec![start.clone(); n_trajectories];
    simulate_from(model, &starts, params, n_steps, Recording::Full, root_seed)
}

/// One chain per start point. Trajectory `i` draws from the stream
/// `derive_seed(root_seed, [i])`, consuming it step after step.
pub fn simulate_from<S: Real>(
    model: &ExpFamilyModel<S>,
    starts: &[ManifoldPoint<S>],
    params: &StepParams<S>,
    n_steps: usize,
    recording: Recording,
    root_seed: u64,
) -> Result<Vec<Trajectory<S>>> {
    for s in starts {
        model.check_point(s)?;
    }
    starts
        .par_iter()
        .enumerate()
        .map(|(id, start)| {
            let seed = rng::derive_seed(root_seed, &[id as u64]);
            let mut stream = rng::stream(seed, &[]);
            let mut current = start.clone();
            let mut traj = Trajectory {
                id,
                seed,
                steps: vec![0],
                times: vec![S::zero()],
                points: vec![start.clone()],
            };
            for step in 1..=n_steps {
                let tag = |e: Error| Error::Trajectory {
                    trajectory: id,
                    step,
                    source: Box::new(e),
                };
                let ctx = StepContext::new(model, &current, *params).map_err(tag)?;
                current = ctx.sample(&mut stream).map_err(tag)?.end;
                if recording.keeps(step, n_steps) {
                    traj.steps.push(step);
                    traj.times.push(params.tau * S::count(step));
                    traj.points.push(current.clone());
                }
            }
            Ok(traj)
        })
        .collect()
}

/// Predictive draws `x ~ ∫ P(A) ρ(x|A) dA` with `P(A)` represented by the
/// ensemble: pick a member uniformly, then draw a state from it.
pub fn sample_predictive<S: Real>(
    model: &ExpFamilyModel<S>,
    ensemble: &[ManifoldPoint<S>],
    n_draws: usize,
    seed: u64,
) -> Result<Vec<S>> {
    if ensemble.is_empty() {
        return Err(Error::invalid("ensemble is empty"));
    }
    let samplers = ensemble
        .iter()
        .map(|p| model.state_sampler(p))
        .collect::<Result<Vec<_>>>()?;
    let mut stream = rng::stream(seed, &[0x5052]);
    Ok((0..n_draws)
        .map(|_| {
            let k = rand::Rng::random_range(&mut stream, 0..samplers.len());
            samplers[k].sample(&mut stream)
        })
        .collect())
}

/// Monte Carlo moments of `ΔA` at one step size.
#[derive(Debug, Clone, Serialize)]
pub struct TauMoments {
    pub tau: f64,
    pub samples: usize,
    /// `⟨ΔA^i⟩/τ`
    pub first_rate: Vec<MeanEstimate>,
    /// `⟨ΔA^iΔA^j⟩/τ`
    pub second_rate: Vec<Vec<MeanEstimate>>,
    /// `⟨ΔA^iΔA^jΔA^k⟩`
    pub third_moment: Vec<Vec<Vec<f64>>>,
    pub third_moment_norm: f64,
    pub mean_rejects: f64,
}

/// Extrapolated `τ → 0` moment rates with their closed-form targets.
#[derive(Debug, Clone, Serialize)]
pub struct MomentReport {
    pub point: Vec<f64>,
    pub taus: Vec<f64>,
    pub per_tau: Vec<TauMoments>,
    pub first_moment_rate: Vec<MeanEstimate>,
    pub first_fit_residual: Vec<f64>,
    pub second_moment_rate: Vec<Vec<MeanEstimate>>,
    pub second_fit_residual: Vec<Vec<f64>>,
    /// Log-log slope of `‖⟨ΔA⊗ΔA⊗ΔA⟩‖_F` against `τ`.
    pub third_moment_slope: f64,
    /// `g^{ij}∂_jS − Γ^i/2`
    pub drift_target: Vec<f64>,
    /// `g^{ij}`
    pub diffusion_target: Vec<Vec<f64>>,
}

impl MomentReport {
    pub fn drift_z_scores(&self) -> Vec<f64> {
        self.first_moment_rate
            .iter()
            .zip(&self.drift_target)
            .map(|(e, &t)| e.z_score(t))
            .collect()
    }

    pub fn diffusion_z_scores(&self) -> Vec<Vec<f64>> {
        self.second_moment_rate
            .iter()
            .zip(&self.diffusion_target)
            .map(|(row, trow)| row.iter().zip(trow).map(|(e, &t)| e.z_score(t)).collect())
            .collect()
    }

    pub fn max_abs_drift_z(&self) -> f64 {
        self.drift_z_scores().iter().fold(0.0, |m, z| m.max(z.abs()))
    }

    pub fn max_abs_diffusion_z(&self) -> f64 {
        self.diffusion_z_scores()
            .iter()
            .flatten()
            .fold(0.0, |m, z| m.max(z.abs()))
    }
}

#[derive(Debug, Clone)]
pub struct MomentOptions {
    /// Strictly decreasing step sizes, at least three.
    pub taus: Vec<f64>,
    pub samples_per_tau: usize,
    pub root_seed: u64,
    pub step: StepTemplate,
    /// Largest acceptable standard error of an extrapolated rate relative to
    /// its target before the estimate is rejected as under-sampled.
    pub max_relative_se: f64,
    /// Draw mirrored pairs (see [`StepContext::sample_antithetic`]) and
    /// count each pair average as one sample.
    pub antithetic: bool,
}

impl MomentOptions {
    pub fn new(taus: Vec<f64>, samples_per_tau: usize, root_seed: u64) -> Self {
        Self {
            taus,
            samples_per_tau,
            root_seed,
            step: StepTemplate::default(),
            max_relative_se: 0.25,
            antithetic: false,
        }
    }
}

/// Kernel settings shared by every step size.
#[derive(Debug, Clone, Copy)]
pub struct StepTemplate {
    pub burn_in: usize,
    pub max_rejects: usize,
    pub form: crate::kernel::QuadraticForm,
}

impl Default for StepTemplate {
    fn default() -> Self {
        Self {
            burn_in: StepParams::<f64>::DEFAULT_BURN_IN,
            max_rejects: StepParams::<f64>::DEFAULT_MAX_REJECTS,
            form: Default::default(),
        }
    }
}

impl StepTemplate {
    pub fn params<S: Real>(&self, tau: S) -> Result<StepParams<S>> {
        Ok(StepParams::new(tau)?
            .with_burn_in(self.burn_in)
            .with_max_rejects(self.max_rejects)
            .with_form(self.form))
    }
}

const BLOCK: usize = 4096;

#[derive(Clone)]
struct BlockSums {
    first: Vec<Accumulator>,
    second: Vec<Accumulator>,
    third: Vec<f64>,
    rejects: u64,
}

impl BlockSums {
    fn new(n: usize) -> Self {
        Self {
            first: vec![Accumulator::default(); n],
            second: vec![Accumulator::default(); n * n],
            third: vec![0.0; n * n * n],
            rejects: 0,
        }
    }

    fn merge(&mut self, o: &BlockSums) {
        self.first.iter_mut().zip(&o.first).for_each(|(a, b)| a.merge(b));
        self.second.iter_mut().zip(&o.second).for_each(|(a, b)| a.merge(b));
        self.third.iter_mut().zip(&o.third).for_each(|(a, b)| *a += b);
        self.rejects += o.rejects;
    }
}

/// Step moments at one `τ` from `samples` independent kernel draws.
/// Block `b` of step-size index `k` uses stream `(root, [salt, k, b])`.
fn moments_at_tau<S: Real>(
    model: &ExpFamilyModel<S>,
    point: &ManifoldPoint<S>,
    params: StepParams<S>,
    samples: usize,
    root_seed: u64,
    path: &[u64],
    antithetic: bool,
) -> Result<TauMoments> {
    let n = model.dim();
    let ctx = StepContext::new(model, point, params)?;
    let blocks = samples.div_ceil(BLOCK);
    let partial: Vec<BlockSums> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut p = path.to_vec();
            p.push(b as u64);
            let mut stream = rng::stream(root_seed, &p);
            let mut sums = BlockSums::new(n);
            let count = BLOCK.min(samples - b * BLOCK);
            let mut d = vec![0.0; n];
            let mut d2 = vec![0.0; n];
            for _ in 0..count {
                if antithetic {
                    let (s, t) = ctx.sample_antithetic(&mut stream)?;
                    sums.rejects += (s.rejects + t.rejects) as u64;
                    for i in 0..n {
                        d[i] = s.delta[i].f64();
                        d2[i] = t.delta[i].f64();
                    }
                } else {
                    let s = ctx.sample(&mut stream)?;
                    sums.rejects += s.rejects as u64;
                    for (di, x) in d.iter_mut().zip(&s.delta) {
                        *di = x.f64();
                    }
                }
                for i in 0..n {
                    let pair = |a: f64, b: f64| if antithetic { 0.5 * (a + b) } else { a };
                    sums.first[i].push(pair(d[i], d2[i]));
                    for j in 0..n {
                        sums.second[i * n + j].push(pair(d[i] * d[j], d2[i] * d2[j]));
                        for k in 0..n {
                            sums.third[(i * n + j) * n + k] +=
                                pair(d[i] * d[j] * d[k], d2[i] * d2[j] * d2[k]);
                        }
                    }
                }
            }
            Ok(sums)
        })
        .collect::<Result<_>>()?;
    let mut total = BlockSums::new(n);
    partial.iter().for_each(|b| total.merge(b));

    let tau = params.tau.f64();
    let rate = |acc: &Accumulator| {
        let e = acc.estimate();
        MeanEstimate {
            mean: e.mean / tau,
            standard_error: e.standard_error / tau,
        }
    };
    let third: Vec<f64> = total.third.iter().map(|s| s / samples as f64).collect();
    Ok(TauMoments {
        tau,
        samples,
        first_rate: total.first.iter().map(rate).collect(),
        second_rate: (0..n)
            .map(|i| (0..n).map(|j| rate(&total.second[i * n + j])).collect())
            .collect(),
        third_moment_norm: third.iter().map(|x| x * x).sum::<f64>().sqrt(),
        third_moment: (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (0..n).map(|k| third[(i * n + j) * n + k]).collect())
                    .collect()
            })
            .collect(),
        mean_rejects: total.rejects as f64 / samples as f64,
    })
}

fn check_taus(taus: &[f64]) -> Result<()> {
    if taus.len() < 3 {
        return Err(Error::invalid("need at least three step sizes"));
    }
    if taus.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::invalid("step sizes must be positive"));
    }
    if taus.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("step sizes must be strictly decreasing"));
    }
    Ok(())
}

fn extrapolate(taus: &[f64], rates: &[MeanEstimate]) -> Result<(MeanEstimate, f64)> {
    let y: Vec<f64> = rates.iter().map(|r| r.mean).collect();
    let largest = rates.iter().fold(0.0f64, |m, r| m.max(r.standard_error));
    let rank = || Error::RankDeficient("moment extrapolation".into());
    if largest == 0.0 {
        // noiseless rates (e.g. antithetic pairs on a flat family)
        let fit = line_fit(taus, &y).ok_or_else(rank)?;
        return Ok((
            MeanEstimate {
                mean: fit.intercept,
                standard_error: 0.0,
            },
            fit.residual,
        ));
    }
    let s: Vec<f64> = rates
        .iter()
        .map(|r| r.standard_error.max(1e-8 * largest))
        .collect();
    let fit = weighted_line_fit(taus, &y, &s).ok_or_else(rank)?;
    Ok((
        MeanEstimate {
            mean: fit.intercept,
            standard_error: fit.intercept_se,
        },
        fit.residual,
    ))
}

/// Drift target `g^{ij}∂_jS − Γ^i/2` and diffusion target `g^{ij}`.
pub fn moment_targets<S: Real>(
    model: &ExpFamilyModel<S>,
    point: &ManifoldPoint<S>,
) -> Result<(Vec<f64>, Matrix<f64>)> {
    let bundle = geometry::bundle(model, point)?;
    let grad = model.entropy_gradient(point)?;
    let drift = bundle
        .g_inv
        .mul_vec(&grad)
        .iter()
        .zip(&bundle.gamma_contracted)
        .map(|(&d, &c)| (d - S::half() * c).f64())
        .collect();
    Ok((drift, bundle.g_inv.cast()))
}

/// Monte Carlo moments of the kernel at several `τ`, extrapolated to `τ → 0`
/// by a weighted straight-line fit of each rate against `τ`.
pub fn estimate_moments<S: Real>(
    model: &ExpFamilyModel<S>,
    point: &ManifoldPoint<S>,
    opts: &MomentOptions,
) -> Result<MomentReport> {
    check_taus(&opts.taus)?;
    if opts.samples_per_tau < 2 {
        return Err(Error::invalid("need at least two samples per step size"));
    }
    model.check_point(point)?;
    let n = model.dim();
    let point_salt = point_salt(point);
    let per_tau = opts
        .taus
        .iter()
        .enumerate()
        .map(|(k, &tau)| {
            let params = opts.step.params(S::c(tau))?;
            moments_at_tau(
                model,
                point,
                params,
                opts.samples_per_tau,
                opts.root_seed,
                &[point_salt, k as u64],
                opts.antithetic,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut first = Vec::with_capacity(n);
    let mut first_res = Vec::with_capacity(n);
    for i in 0..n {
        let rates: Vec<MeanEstimate> = per_tau.iter().map(|m| m.first_rate[i]).collect();
        let (e, r) = extrapolate(&opts.taus, &rates)?;
        first.push(e);
        first_res.push(r);
    }
    let mut second = vec![Vec::with_capacity(n); n];
    let mut second_res = vec![Vec::with_capacity(n); n];
    for i in 0..n {
        for j in 0..n {
            let rates: Vec<MeanEstimate> = per_tau.iter().map(|m| m.second_rate[i][j]).collect();
            let (e, r) = extrapolate(&opts.taus, &rates)?;
            second[i].push(e);
            second_res[i].push(r);
        }
    }
    let lx: Vec<f64> = opts.taus.iter().map(|t| t.ln()).collect();
    let ly: Vec<f64> = per_tau.iter().map(|m| m.third_moment_norm.ln()).collect();
    let third_slope = line_fit(&lx, &ly).map_or(f64::NAN, |f| f.slope);

    let (drift, diffusion) = moment_targets(model, point)?;
    for (i, e) in first.iter().enumerate() {
        let target = drift[i].abs();
        if target > 1e-12 && e.standard_error > opts.max_relative_se * target {
            return Err(Error::InsufficientSamples {
                quantity: format!("first-moment rate [{i}]"),
                standard_error: e.standard_error,
                target,
            });
        }
    }
    for i in 0..n {
        let target = diffusion[(i, i)];
        if second[i][i].standard_error > opts.max_relative_se * target {
            return Err(Error::InsufficientSamples {
                quantity: format!("second-moment rate [{i}][{i}]"),
                standard_error: second[i][i].standard_error,
                target,
            });
        }
    }

    Ok(MomentReport {
        point: point.to_f64(),
        taus: opts.taus.clone(),
        per_tau,
        first_moment_rate: first,
        first_fit_residual: first_res,
        second_moment_rate: second,
        second_fit_residual: second_res,
        third_moment_slope: third_slope,
        drift_target: drift,
        diffusion_target: diffusion.to_f64_rows(),
    })
}

/// Stream salt derived from the point coordinates, so per-point randomness
/// does not depend on where the point sits in a list.
fn point_salt<S: Real>(point: &ManifoldPoint<S>) -> u64 {
    rng::derive_seed(
        0x50_4F49_4E54,
        &point.to_f64().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
    )
}

/// Recovered drift-coefficient matrix `D` with `d^i + Γ^i/2 = D^{ij} ∂_jS`.
#[derive(Debug, Clone, Serialize)]
pub struct ReciprocityReport {
    /// Points in canonical (sorted) order.
    pub points: Vec<Vec<f64>>,
    pub gradients: Vec<Vec<f64>>,
    /// Extrapolated first-moment rates plus `Γ^i/2`, averaged over batches.
    pub corrected_drifts: Vec<Vec<MeanEstimate>>,
    pub batches: usize,
    pub d: Vec<Vec<f64>>,
    /// Batch-replicate standard errors of `D`.
    pub d_standard_error: Vec<Vec<f64>>,
    /// `‖D − Dᵀ‖_F / ‖D‖_F`
    pub asymmetry: f64,
    pub positive_definite: bool,
    /// The same regression applied to the exact `g^{ij}(A_p) ∂_jS(A_p)`.
    pub reference: Vec<Vec<f64>>,
    /// `(D − reference) / se`, entrywise.
    pub reference_z: Vec<Vec<f64>>,
    /// `g^{ij}` at the centroid of the points.
    pub centroid_metric_inverse: Vec<Vec<f64>>,
    /// `g^{ij}` at each point.
    pub metric_inverse_at_points: Vec<Vec<Vec<f64>>>,
}

impl ReciprocityReport {
    pub fn max_abs_reference_z(&self) -> f64 {
        self.reference_z.iter().flatten().fold(0.0, |m, z| m.max(z.abs()))
    }
}

/// Least squares `y_p ≈ D x_p` (no intercept), solved row by row.
fn regress(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<Matrix<f64>> {
    let n = x[0].len();
    let mut xtx = Matrix::<f64>::zeros(n, n);
    for xp in x {
        for a in 0..n {
            for b in 0..n {
                xtx[(a, b)] += xp[a] * xp[b];
            }
        }
    }
    let inv = xtx
        .inverse()
        .map_err(|_| Error::RankDeficient("entropy gradients are not linearly independent".into()))?;
    let mut d = Matrix::<f64>::zeros(n, n);
    for i in 0..n {
        let xty: Vec<f64> = (0..n)
            .map(|a| x.iter().zip(y).map(|(xp, yp)| xp[a] * yp[i]).sum())
            .collect();
        let row = inv.mul_vec(&xty);
        for j in 0..n {
            d[(i, j)] = row[j];
        }
    }
    Ok(d)
}

/// Recovers `D` by regressing curvature-corrected drift rates on entropy
/// gradients across `points`.
///
/// All points draw from the same random streams, so the shared part of the
/// sampling noise cancels in the regression; standard errors come from
/// `batches` independent replicates of the whole estimate, each using
/// `samples_per_tau / batches` draws per point and step size.
pub fn reciprocity_check<S: Real>(
    model: &ExpFamilyModel<S>,
    points: &[ManifoldPoint<S>],
    opts: &MomentOptions,
    batches: usize,
) -> Result<ReciprocityReport> {
    check_taus(&opts.taus)?;
    let n = model.dim();
    let needed = n * (n + 1) / 2;
    if points.len() < needed.max(2) {
        return Err(Error::RankDeficient(format!(
            "need at least {} points, got {}",
            needed.max(2),
            points.len()
        )));
    }
    if batches < 2 || opts.samples_per_tau / batches < 2 {
        return Err(Error::invalid("need at least two batches of two samples"));
    }
    let per_batch = opts.samples_per_tau / batches;
    let mut sorted: Vec<ManifoldPoint<S>> = points.to_vec();
    sorted.sort_by(|a, b| {
        a.to_f64()
            .iter()
            .zip(b.to_f64().iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    for p in &sorted {
        model.check_point(p)?;
    }

    let mut gradients = Vec::new();
    let mut half_gamma = Vec::new();
    let mut exact = Vec::new();
    let mut ginvs = Vec::new();
    for p in &sorted {
        let bundle = geometry::bundle(model, p)?;
        let grad = model.entropy_gradient(p)?;
        exact.push(bundle.g_inv.mul_vec(&grad).iter().map(|x| x.f64()).collect::<Vec<_>>());
        gradients.push(grad.iter().map(|x| x.f64()).collect::<Vec<f64>>());
        half_gamma.push(bundle.gamma_contracted.iter().map(|c| 0.5 * c.f64()).collect::<Vec<_>>());
        ginvs.push(bundle.g_inv.cast::<f64>());
    }
    let reference = regress(&gradients, &exact)?;

    let mut d_batches = Vec::with_capacity(batches);
    let mut drift_acc = vec![vec![Accumulator::default(); n]; sorted.len()];
    for b in 0..batches {
        let mut drifts = Vec::with_capacity(sorted.len());
        for (pi, p) in sorted.iter().enumerate() {
            let per_tau = opts
                .taus
                .iter()
                .enumerate()
                .map(|(k, &tau)| {
                    let params = opts.step.params(S::c(tau))?;
                    moments_at_tau(
                        model,
                        p,
                        params,
                        per_batch,
                        opts.root_seed,
                        &[0x5245_4349, k as u64, b as u64],
                        opts.antithetic,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                let rates: Vec<MeanEstimate> = per_tau.iter().map(|m| m.first_rate[i]).collect();
                let v = extrapolate(&opts.taus, &rates)?.0.mean + half_gamma[pi][i];
                drift_acc[pi][i].push(v);
                y.push(v);
            }
            drifts.push(y);
        }
        d_batches.push(regress(&gradients, &drifts)?);
    }

    let mut d = Matrix::<f64>::zeros(n, n);
    let mut d_se = Matrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = Accumulator::default();
            d_batches.iter().for_each(|m| acc.push(m[(i, j)]));
            let e = acc.estimate();
            d[(i, j)] = e.mean;
            d_se[(i, j)] = e.standard_error;
        }
    }

    let centroid: Vec<S> = (0..n)
        .map(|k| sorted.iter().map(|p| p.coords()[k]).sum::<S>() / S::count(sorted.len()))
        .collect();
    let centroid_ginv = geometry::metric(model, &ManifoldPoint::new(centroid))?
        .inverse()?
        .cast::<f64>();
    let reference_z = (0..n)
        .map(|i| (0..n).map(|j| (d[(i, j)] - reference[(i, j)]) / d_se[(i, j)]).collect())
        .collect();

    Ok(ReciprocityReport {
        points: sorted.iter().map(ManifoldPoint::to_f64).collect(),
        gradients,
        corrected_drifts: drift_acc
            .iter()
            .map(|row| row.iter().map(Accumulator::estimate).collect())
            .collect(),
        batches,
        asymmetry: d.asymmetry(),
        positive_definite: d.symmetrized().is_positive_definite(),
        reference: reference.to_f64_rows(),
        reference_z,
        centroid_metric_inverse: centroid_ginv.to_f64_rows(),
        metric_inverse_at_points: ginvs.iter().map(Matrix::to_f64_rows).collect(),
        d_standard_error: d_se.to_f64_rows(),
        d: d.to_f64_rows(),
    })
}
