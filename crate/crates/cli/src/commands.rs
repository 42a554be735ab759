//! One function per subcommand. Each returns its output files in memory;
//! nothing touches the disk here.

use anyhow::{bail, Context, Result};
use entdyn::acceptance::{self, Budget, CriterionReport};
use entdyn::ensemble::{self, MomentOptions, Recording};
use entdyn::fokker_planck::{compare_to_ensemble, DistanceReport, EvolveReport, FpGrid, GridSpec};
use entdyn::kernel::{interpolate_cdf, kernel_cdf_1d, kernel_normalization, StepParams};
use entdyn::stats::ks_distance;
use entdyn::{geometry, onsager, rng, Model, Point};
use rand::Rng;
use serde::Serialize;

use crate::config::{default_cluster, default_point, point_or_default, Config, InitialDensity};
use crate::output::{json, num, Csv};

pub type Outputs = Vec<(String, Vec<u8>)>;

/// Per-command salts so different subcommands never share random streams.
mod salt {
    pub const KERNEL_CHECK: u64 = 1;
    pub const SIMULATE: u64 = 2;
    pub const MOMENTS: u64 = 3;
    pub const RECIPROCITY: u64 = 4;
    pub const FPE: u64 = 5;
}

fn rows(m: &entdyn::Matrix) -> Vec<Vec<f64>> {
    m.to_f64_rows()
}

#[derive(Serialize)]
struct GeometryEntry {
    point: Vec<f64>,
    g: Vec<Vec<f64>>,
    g_inv: Vec<Vec<f64>>,
    det_g: f64,
    /// `Γ^i_jk`, indexed `[i][j][k]`.
    christoffel: Vec<Vec<Vec<f64>>>,
    christoffel_contracted: Vec<f64>,
    entropy: f64,
    entropy_gradient: Vec<f64>,
    lambda: Vec<f64>,
}

#[derive(Serialize)]
struct GeometryOutput {
    model: String,
    points: Vec<GeometryEntry>,
    /// Grid points outside the domain, left out above.
    skipped: Vec<Vec<f64>>,
}

fn tensor_grid(bounds: &[[f64; 2]], counts: &[usize]) -> Vec<Vec<f64>> {
    let axes: Vec<Vec<f64>> = bounds
        .iter()
        .zip(counts)
        .map(|(b, &n)| {
            if n == 1 {
                vec![0.5 * (b[0] + b[1])]
            } else {
                (0..n).map(|i| b[0] + (b[1] - b[0]) * i as f64 / (n - 1) as f64).collect()
            }
        })
        .collect();
    let mut out = vec![vec![]];
    for axis in &axes {
        out = out
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&x| {
                    let mut q = p.clone();
                    q.push(x);
                    q
                })
            })
            .collect();
    }
    out
}

pub fn geometry(cfg: &Config) -> Result<Outputs> {
    let s = &cfg.geometry;
    let model = cfg.model_for(&s.model)?;
    let candidates = match (&s.points, &s.bounds, &s.counts) {
        (Some(p), _, _) => p.clone(),
        (None, Some(b), Some(c)) => tensor_grid(b, c),
        _ => vec![default_point(&model)],
    };
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for c in candidates {
        if !model.contains(&c) {
            skipped.push(c);
            continue;
        }
        let p = Point::from_f64(&c);
        let b = geometry::bundle(&model, &p)?;
        points.push(GeometryEntry {
            point: c,
            g: rows(&b.g),
            g_inv: rows(&b.g_inv),
            det_g: b.det_g,
            christoffel: b.gamma.to_nested(),
            christoffel_contracted: b.gamma_contracted,
            entropy: model.entropy(&p)?,
            entropy_gradient: model.entropy_gradient(&p)?,
            lambda: model.natural_parameters(&p)?.to_f64(),
        });
    }
    if points.is_empty() {
        bail!("geometry: no grid point lies inside the domain of `{}`", model.name());
    }
    let out = GeometryOutput {
        model: model.name().into(),
        points,
        skipped,
    };
    Ok(vec![("geometry.json".into(), json(&out)?)])
}

/// Asymptotic Kolmogorov survival function `P(√N D > λ)`.
fn kolmogorov_p_value(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        s += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    s.clamp(0.0, 1.0)
}

#[derive(Serialize)]
struct KsResult {
    samples: usize,
    distance: f64,
    scaled: f64,
    p_value: f64,
}

#[derive(Serialize)]
struct KernelCheckEntry {
    tau: f64,
    log_normalizer: f64,
    integral: f64,
    normalization_error: f64,
    /// Sampled single steps against the quadrature CDF (1-D families).
    ks: Option<KsResult>,
}

#[derive(Serialize)]
struct KernelCheckOutput {
    model: String,
    point: Vec<f64>,
    form: entdyn::kernel::QuadraticForm,
    checks: Vec<KernelCheckEntry>,
}

pub fn kernel_check(cfg: &Config) -> Result<Outputs> {
    let s = &cfg.kernel_check;
    let model = cfg.model_for(&s.model)?;
    let point = point_or_default(&model, &s.point);
    let mut checks = Vec::new();
    for (k, &tau) in s.taus.iter().enumerate() {
        let norm = kernel_normalization(&model, &point, tau, s.form)
            .with_context(|| format!("kernel_check.taus[{k}] = {tau}"))?;
        let ks = if model.dim() == 1 && s.ks_samples > 0 {
            let table = kernel_cdf_1d(&model, &point, tau, s.form, 4000)?;
            let params = StepParams::new(tau)?.with_form(s.form);
            let starts = vec![point.clone(); s.ks_samples];
            let seed = rng::derive_seed(cfg.seed, &[salt::KERNEL_CHECK, k as u64]);
            let traj = ensemble::simulate_from(&model, &starts, &params, 1, Recording::Endpoints, seed)?;
            let ends: Vec<f64> = traj.iter().map(|t| t.last().coords()[0]).collect();
            let d = ks_distance(&ends, |x| interpolate_cdf(&table, x));
            let scaled = d * (s.ks_samples as f64).sqrt();
            Some(KsResult {
                samples: s.ks_samples,
                distance: d,
                scaled,
                p_value: kolmogorov_p_value(scaled),
            })
        } else {
            None
        };
        checks.push(KernelCheckEntry {
            tau,
            log_normalizer: norm.log_normalizer,
            integral: norm.integral,
            normalization_error: (norm.integral - 1.0).abs(),
            ks,
        });
    }
    let out = KernelCheckOutput {
        model: model.name().into(),
        point: point.to_f64(),
        form: s.form,
        checks,
    };
    Ok(vec![("kernel_check.json".into(), json(&out)?)])
}

pub fn simulate(cfg: &Config) -> Result<Outputs> {
    let s = &cfg.simulate;
    let model = cfg.model_for(&s.model)?;
    let start = point_or_default(&model, &s.start);
    let params = StepParams::new(s.tau)?.with_burn_in(s.burn_in);
    let recording = match s.record_every {
        0 => Recording::Endpoints,
        1 => Recording::Full,
        k => Recording::Every(k),
    };
    let starts = vec![start; s.trajectories];
    let seed = rng::derive_seed(cfg.seed, &[salt::SIMULATE]);
    let traj = ensemble::simulate_from(&model, &starts, &params, s.steps, recording, seed)?;
    let mut header: Vec<String> = ["trajectory_id", "step", "time"].iter().map(|s| s.to_string()).collect();
    header.extend((1..=model.dim()).map(|i| format!("A_{i}")));
    let mut csv = Csv::new(&header);
    for t in &traj {
        for ((step, time), p) in t.steps.iter().zip(&t.times).zip(&t.points) {
            let mut fields = vec![t.id.to_string(), step.to_string(), num(*time)];
            fields.extend(p.coords().iter().map(|&x| num(x)));
            csv.row(fields);
        }
    }
    Ok(vec![("trajectories.csv".into(), csv.into_bytes())])
}

#[derive(Serialize)]
struct MomentsOutput {
    model: String,
    #[serde(flatten)]
    report: ensemble::MomentReport,
    drift_z_scores: Vec<f64>,
    diffusion_z_scores: Vec<Vec<f64>>,
}

pub fn moments(cfg: &Config) -> Result<Outputs> {
    let s = &cfg.moments;
    let model = cfg.model_for(&s.model)?;
    let point = point_or_default(&model, &s.point);
    let mut opts = MomentOptions::new(
        s.taus.clone(),
        s.samples_per_tau,
        rng::derive_seed(cfg.seed, &[salt::MOMENTS]),
    );
    opts.step.burn_in = s.burn_in;
    opts.antithetic = s.antithetic;
    opts.max_relative_se = s.max_relative_se;
    let report = ensemble::estimate_moments(&model, &point, &opts)?;
    let out = MomentsOutput {
        model: model.name().into(),
        drift_z_scores: report.drift_z_scores(),
        diffusion_z_scores: report.diffusion_z_scores(),
        report,
    };
    Ok(vec![("moments.json".into(), json(&out)?)])
}

#[derive(Serialize)]
struct ReciprocityOutput {
    model: String,
    #[serde(flatten)]
    report: ensemble::ReciprocityReport,
    max_abs_reference_z: f64,
    /// Onsager coefficient at the fixed point, when there is one.
    onsager_gamma: Option<Vec<Vec<f64>>>,
}

pub fn reciprocity(cfg: &Config) -> Result<Outputs> {
    let s = &cfg.reciprocity;
    let model = cfg.model_for(&s.model)?;
    let points: Vec<Point> = s
        .points
        .clone()
        .unwrap_or_else(|| default_cluster(&model))
        .iter()
        .map(|p| Point::from_f64(p))
        .collect();
    let mut opts = MomentOptions::new(
        s.taus.clone(),
        s.samples_per_tau,
        rng::derive_seed(cfg.seed, &[salt::RECIPROCITY]),
    );
    opts.step.burn_in = s.burn_in;
    opts.antithetic = s.antithetic;
    opts.max_relative_se = f64::INFINITY;
    let report = ensemble::reciprocity_check(&model, &points, &opts, s.batches)?;
    let onsager_gamma = onsager::linearize(&model, None).ok().map(|l| rows(&l.gamma));
    let out = ReciprocityOutput {
        model: model.name().into(),
        max_abs_reference_z: report.max_abs_reference_z(),
        report,
        onsager_gamma,
    };
    Ok(vec![("reciprocity.json".into(), json(&out)?)])
}

#[derive(Serialize)]
struct Snapshot {
    t: f64,
    segment: Option<EvolveReport>,
    total_mass: f64,
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
    ensemble: Option<DistanceReport>,
}

#[derive(Serialize)]
struct Refinement {
    cells: Vec<usize>,
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct FpeOutput {
    model: String,
    grid: GridSpec,
    flux: entdyn::fokker_planck::FluxScheme,
    time: entdyn::fokker_planck::TimeScheme,
    dt: f64,
    stability_limit: f64,
    stationary_residual: f64,
    snapshots: Vec<Snapshot>,
    /// Moments at `t_end` on the configured grid and on grids coarsened by 2
    /// and 4 per axis.
    refinement: Vec<Refinement>,
    /// `log2(|m₄ − m₂| / |m₂ − m₁|)` on the mean (NaN when the differences
    /// are at round-off).
    observed_order: f64,
}

fn initial_grid(model: &Model, spec: &GridSpec, cfg: &Config) -> Result<FpGrid<f64>> {
    let f = &cfg.fpe;
    let mut grid = FpGrid::new(model, spec, f.flux)?;
    match &f.initial {
        InitialDensity::Normal { mean, sd } => grid.set_scalar_density(|a| {
            let q: f64 = a.iter().zip(mean).zip(sd).map(|((x, m), s)| ((x - m) / s).powi(2)).sum();
            (-0.5 * q).exp()
        })?,
        InitialDensity::Stationary => grid.p = grid.stationary_density(),
        InitialDensity::Uniform => grid.set_invariant_density(|_| 1.0)?,
    }
    Ok(grid)
}

/// Draws from the discretized density: a cell by mass, then a uniform
/// point inside it (redrawn if it falls outside the domain).
fn sample_grid(grid: &FpGrid<f64>, n: usize, seed: u64) -> Vec<Point> {
    let masses = grid.cell_masses();
    let total: f64 = masses.iter().sum();
    let mut cumulative = Vec::with_capacity(masses.len());
    let mut acc = 0.0;
    for m in &masses {
        acc += m / total;
        cumulative.push(acc);
    }
    let mut r = rng::stream(seed, &[]);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u: f64 = r.random();
        let c = cumulative.partition_point(|&x| x < u).min(masses.len() - 1);
        let center = grid.center(c);
        let a: Vec<f64> = center
            .iter()
            .zip(&grid.spacing)
            .map(|(&x, &h)| x + h * (r.random::<f64>() - 0.5))
            .collect();
        if grid.model().contains(&a) {
            out.push(Point::from_f64(&a));
        }
    }
    out
}

pub fn fpe(cfg: &Config) -> Result<Outputs> {
    let f = &cfg.fpe;
    let model = cfg.model_for(&f.model)?;
    let cells = f
        .cells
        .clone()
        .unwrap_or_else(|| if model.dim() == 1 { vec![200] } else { vec![40, 40] });
    let spec = match &f.bounds {
        Some(b) => GridSpec {
            bounds: b.iter().map(|r| (r[0], r[1])).collect(),
            cells: cells.clone(),
        },
        None => FpGrid::default_spec(&model, &cells)?,
    };
    let mut grid = initial_grid(&model, &spec, cfg)?;
    let limit = grid.stable_dt();
    let dt = f.dt.unwrap_or(limit);

    let mut times = f.snapshots.clone();
    if times.last().is_none_or(|&t| t < f.t_end) {
        times.push(f.t_end);
    }

    let mut ensemble_points = f
        .ensemble
        .as_ref()
        .map(|e| (e, sample_grid(&grid, e.trajectories, rng::derive_seed(cfg.seed, &[salt::FPE, 0]))));
    let mut ensemble_t = 0.0;

    let mut header: Vec<String> = vec!["time".into(), "cell".into(), "active".into()];
    header.extend((1..=model.dim()).map(|i| format!("A_{i}")));
    header.extend(["p", "density", "mass"].iter().map(|s| s.to_string()));
    let mut csv = Csv::new(&header);
    let mut snapshots = Vec::new();

    for (k, &t) in times.iter().enumerate() {
        let segment = if t > grid.t {
            Some(grid.evolve(t, dt, f.time).with_context(|| format!("solving to t = {t}"))?)
        } else {
            None
        };
        let ensemble = match &mut ensemble_points {
            Some((e, pts)) => {
                let steps = ((t - ensemble_t) / e.tau).round() as usize;
                if steps > 0 {
                    let params = StepParams::new(e.tau)?;
                    let seed = rng::derive_seed(cfg.seed, &[salt::FPE, 1 + k as u64]);
                    let traj = ensemble::simulate_from(&model, pts, &params, steps, Recording::Endpoints, seed)?;
                    *pts = traj.iter().map(|t| t.last().clone()).collect();
                    ensemble_t = t;
                }
                Some(compare_to_ensemble(&grid, pts)?)
            }
            None => None,
        };
        let masses = grid.cell_masses();
        let density = grid.scalar_density();
        for c in 0..grid.len() {
            let mut fields = vec![num(grid.t), c.to_string(), u8::from(grid.active[c]).to_string()];
            fields.extend(grid.center(c).iter().map(|&x| num(x)));
            fields.extend([num(grid.p[c]), num(density[c]), num(masses[c])]);
            csv.row(fields);
        }
        let (mean, cov) = grid.moments();
        snapshots.push(Snapshot {
            t: grid.t,
            segment,
            total_mass: grid.total_mass(),
            mean,
            covariance: rows(&cov),
            ensemble,
        });
    }

    let mut refinement = vec![Refinement {
        cells: cells.clone(),
        mean: snapshots.last().map(|s| s.mean.clone()).unwrap_or_default(),
        covariance: snapshots.last().map(|s| s.covariance.clone()).unwrap_or_default(),
    }];
    for factor in [2, 4] {
        let coarse: Vec<usize> = cells.iter().map(|&n| n / factor).collect();
        if coarse.iter().any(|&n| n < 3) {
            break;
        }
        let mut g = initial_grid(&model, &GridSpec { bounds: spec.bounds.clone(), cells: coarse.clone() }, cfg)?;
        let h = f.dt.map_or_else(|| g.stable_dt(), |d| d.min(g.stable_dt()));
        g.evolve(f.t_end, h, f.time)?;
        let (mean, cov) = g.moments();
        refinement.push(Refinement {
            cells: coarse,
            mean,
            covariance: rows(&cov),
        });
    }
    let observed_order = if refinement.len() == 3 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let fine = d(&refinement[0].mean, &refinement[1].mean);
        let coarse = d(&refinement[1].mean, &refinement[2].mean);
        if fine > 1e-13 {
            (coarse / fine).log2()
        } else {
            f64::NAN
        }
    } else {
        f64::NAN
    };

    let out = FpeOutput {
        model: model.name().into(),
        grid: spec,
        flux: f.flux,
        time: f.time,
        dt,
        stability_limit: limit,
        stationary_residual: grid.stationary_residual(limit)?,
        snapshots,
        refinement,
        observed_order,
    };
    Ok(vec![
        ("fpe_snapshots.csv".into(), csv.into_bytes()),
        ("fpe_report.json".into(), json(&out)?),
    ])
}

#[derive(Serialize)]
struct OnsagerOutput {
    model: String,
    fixed_point: Vec<f64>,
    l: Vec<Vec<f64>>,
    l_curvature: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    gamma: Vec<Vec<f64>>,
    metric_inverse: Vec<Vec<f64>>,
    identity_error: f64,
    gamma_error: f64,
    asymmetry: f64,
    positive_definite: bool,
    gradient_norm: f64,
    step: f64,
    relaxation: onsager::RelaxationReport,
}

pub fn onsager(cfg: &Config) -> Result<Outputs> {
    let s = &cfg.onsager;
    let model = cfg.model_for(&s.model)?;
    let lin = onsager::linearize(&model, s.h)?;
    let displacement = s.displacement.clone().unwrap_or_else(|| {
        if model.dim() == 1 {
            vec![0.01]
        } else {
            vec![1e-3, -5e-4]
        }
    });
    let relaxation = onsager::relaxation_check(&model, &displacement, s.t_max, s.dt)?;
    let out = OnsagerOutput {
        model: model.name().into(),
        fixed_point: lin.fixed_point.to_f64(),
        l: rows(&lin.l),
        l_curvature: rows(&lin.l_curvature),
        beta: rows(&lin.beta),
        gamma: rows(&lin.gamma),
        metric_inverse: rows(&lin.beta.inverse()?),
        identity_error: lin.identity_error(),
        gamma_error: lin.gamma_error()?,
        asymmetry: lin.asymmetry,
        positive_definite: lin.gamma.symmetrized().is_positive_definite(),
        gradient_norm: lin.gradient_norm,
        step: lin.step,
        relaxation,
    };
    Ok(vec![("onsager.json".into(), json(&out)?)])
}

#[derive(Serialize)]
struct VerifyOutput {
    budget: Budget,
    seed: u64,
    passed: bool,
    criteria: Vec<CriterionReport>,
}

/// Runs the acceptance criteria. Returns the reports alongside the outputs
/// so the caller can print the table and set the exit status.
pub fn verify(cfg: &Config) -> Result<(Outputs, Vec<CriterionReport>)> {
    let budget = if cfg.verify.quick { Budget::Quick } else { Budget::Full };
    let mut reports = Vec::new();
    for &(id, run) in acceptance::CRITERIA.iter() {
        if !cfg.verify.criteria.contains(&id) {
            continue;
        }
        log::info!("running criterion {id}");
        reports.push(run(cfg.seed, budget).with_context(|| format!("criterion {id}"))?);
    }
    let out = VerifyOutput {
        budget,
        seed: cfg.seed,
        passed: reports.iter().all(|r| r.passed),
        criteria: reports.clone(),
    };
    Ok((vec![("verify.json".into(), json(&out)?)], reports))
}
