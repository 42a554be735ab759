use entdyn::ensemble::{self, MomentOptions, Recording};
use entdyn::exp_family::{ExpFamilyModel, ManifoldPoint};
use entdyn::fokker_planck::{compare_to_ensemble, FluxScheme, FpGrid, TimeScheme};
use entdyn::kernel::{kernel_normalization, QuadraticForm, StepParams};
use entdyn::{onsager, rng, Model, Point};

fn p(c: &[f64]) -> Point {
    ManifoldPoint::from_f64(c)
}

fn families_with_points() -> Vec<(Model, Vec<Point>)> {
    vec![
        (
            ExpFamilyModel::bernoulli(),
            [0.1, 0.3, 0.5, 0.75, 0.9].iter().map(|&a| p(&[a])).collect(),
        ),
        (
            ExpFamilyModel::gaussian_mean(),
            [-2.0, -0.5, 0.0, 1.0, 2.5].iter().map(|&a| p(&[a])).collect(),
        ),
        (
            ExpFamilyModel::gaussian_mean_second_moment(),
            vec![p(&[0.0, 1.0]), p(&[0.3, 1.5]), p(&[-0.5, 1.2]), p(&[1.0, 3.0]), p(&[0.2, 0.8])],
        ),
        (
            ExpFamilyModel::categorical3(),
            vec![p(&[0.3, 0.3]), p(&[0.2, 0.5]), p(&[0.6, 0.1]), p(&[0.15, 0.15]), p(&[0.45, 0.45])],
        ),
    ]
}

#[test]
fn kernel_normalizes_at_five_points_per_family() {
    for (model, points) in families_with_points() {
        for a in &points {
            for tau in [1e-2, 1e-3] {
                let n = kernel_normalization(&model, a, tau, QuadraticForm::default()).unwrap();
                assert!(
                    (n.integral - 1.0).abs() < 1e-6,
                    "{} at {:?}, tau {tau}: {}",
                    model.name(),
                    a.coords(),
                    n.integral
                );
            }
        }
    }
}

#[test]
fn steps_shrink_as_tau_halves() {
    let model = ExpFamilyModel::<f64>::bernoulli();
    let delta = 0.05;
    let mut last = f64::INFINITY;
    for (k, tau) in [0.008, 0.004, 0.002, 0.001].into_iter().enumerate() {
        let starts = vec![p(&[0.6]); 20_000];
        let traj = ensemble::simulate_from(
            &model,
            &starts,
            &StepParams::new(tau).unwrap(),
            1,
            Recording::Endpoints,
            rng::derive_seed(7, &[k as u64]),
        )
        .unwrap();
        let far = traj
            .iter()
            .filter(|t| (t.last().coords()[0] - 0.6).abs() > delta)
            .count() as f64
            / starts.len() as f64;
        assert!(far < last || far == 0.0, "tau {tau}: {far} vs {last}");
        last = far;
    }
}

#[test]
fn ensemble_matches_solver_at_start() {
    let model = ExpFamilyModel::<f64>::gaussian_mean();
    let spec = FpGrid::default_spec(&model, &[60]).unwrap();
    let mut grid = FpGrid::new(&model, &spec, FluxScheme::Fitted).unwrap();
    grid.set_scalar_density(|a| (-(a[0] - 0.5).powi(2) / 0.5).exp()).unwrap();
    let n = 20_000;
    let mut r = rng::stream(11, &[]);
    let pts: Vec<Point> = (0..n)
        .map(|_| p(&[0.5 + 0.5 * rng::standard_normal::<f64, _>(&mut r)]))
        .collect();
    let rep = compare_to_ensemble(&grid, &pts).unwrap();
    assert!(rep.total_variation < 4.0 * (60.0 / n as f64).sqrt(), "{rep:?}");
}

#[test]
fn long_bernoulli_run_approaches_stationary_density() {
    let model = ExpFamilyModel::<f64>::bernoulli();
    let spec = FpGrid::default_spec(&model, &[25]).unwrap();
    let mut grid = FpGrid::new(&model, &spec, FluxScheme::Fitted).unwrap();
    grid.p = grid.stationary_density();

    let tau = 0.02;
    let steps = 200;
    let starts = vec![p(&[0.3]); 20_000];
    let traj = ensemble::simulate_from(
        &model,
        &starts,
        &StepParams::new(tau).unwrap(),
        steps,
        Recording::Endpoints,
        5,
    )
    .unwrap();
    let ends: Vec<Point> = traj.iter().map(|t| t.last().clone()).collect();
    let rep = compare_to_ensemble(&grid, &ends).unwrap();
    assert!(rep.total_variation < 0.03, "{rep:?}");

    // the solver itself relaxes to the same profile
    let mut solver = FpGrid::new(&model, &spec, FluxScheme::Fitted).unwrap();
    solver
        .set_scalar_density(|a| (-(a[0] - 0.3).powi(2) / 0.002).exp())
        .unwrap();
    solver.evolve(10.0, 0.01, TimeScheme::SemiImplicit).unwrap();
    let stationary = grid.cell_masses();
    let tv: f64 = solver
        .cell_masses()
        .iter()
        .zip(&stationary)
        .map(|(a, b)| 0.5 * (a - b).abs())
        .sum();
    assert!(tv < 1e-3, "{tv}");
}

#[test]
fn onsager_coefficient_matches_recovered_drift_coefficient() {
    // flat family: antithetic pairs are exact, so D = γ = 1 with no noise
    let model = ExpFamilyModel::<f64>::gaussian_mean();
    let gamma = onsager::linearize(&model, None).unwrap().gamma[(0, 0)];
    let points: Vec<Point> = [-0.3, -0.1, 0.1, 0.3].iter().map(|&a| p(&[a])).collect();
    let mut opts = MomentOptions::new(vec![0.01, 0.005, 0.0025], 40_000, 3);
    opts.antithetic = true;
    opts.max_relative_se = f64::INFINITY;
    let r = ensemble::reciprocity_check(&model, &points, &opts, 4).unwrap();
    assert!((r.d[0][0] - gamma).abs() < 1e-6, "D = {} ± {}", r.d[0][0], r.d_standard_error[0][0]);

    // curved family, points close to A* so the regression bias is small
    let model = ExpFamilyModel::<f64>::bernoulli();
    let gamma = onsager::linearize(&model, None).unwrap().gamma[(0, 0)];
    let points: Vec<Point> = [0.47, 0.49, 0.51, 0.53].iter().map(|&a| p(&[a])).collect();
    let r = ensemble::reciprocity_check(&model, &points, &opts, 4).unwrap();
    let bias = (r.reference[0][0] - gamma).abs();
    assert!(bias < 1e-3);
    let z = (r.d[0][0] - gamma).abs() / r.d_standard_error[0][0];
    assert!(z < 4.0 + bias / r.d_standard_error[0][0], "D = {:?}, se {:?}", r.d, r.d_standard_error);
}

#[test]
fn non_normalizable_base_has_no_fixed_point() {
    use entdyn::exp_family::CustomFamily;
    // Lebesgue base on the half line with a(x) = x: Z(0) diverges
    let fam = CustomFamily::new((0.0, f64::INFINITY), |x: f64| x, |_| 0.0, (0.0, f64::INFINITY));
    let model = ExpFamilyModel::custom("flat-half-line", fam);
    assert!(matches!(
        onsager::find_fixed_point(&model),
        Err(entdyn::Error::NoFixedPoint { .. })
    ));
}
