use entdyn::exp_family::{DualCoordinates, ExpFamilyModel, ManifoldPoint};
use entdyn::fokker_planck::{FluxScheme, FpGrid, GridSpec, TimeScheme};
use entdyn::geometry;
use entdyn::Model;
use proptest::prelude::*;

fn family(i: usize) -> Model {
    match i {
        0 => ExpFamilyModel::bernoulli(),
        1 => ExpFamilyModel::gaussian_mean(),
        2 => ExpFamilyModel::gaussian_mean_second_moment(),
        _ => ExpFamilyModel::categorical3(),
    }
}

/// A point of family `i` from unit-interval coordinates.
fn point(i: usize, u: f64, v: f64) -> ManifoldPoint<f64> {
    let c = match i {
        0 => vec![0.01 + 0.98 * u],
        1 => vec![-4.0 + 8.0 * u],
        2 => {
            let m = -2.0 + 4.0 * u;
            vec![m, m * m + 0.05 + 3.0 * v]
        }
        _ => {
            let a = 0.01 + 0.97 * u;
            vec![a, 0.01 + (0.98 - a) * v]
        }
    };
    ManifoldPoint::new(c)
}

fn lambda(i: usize, u: f64, v: f64) -> DualCoordinates<f64> {
    DualCoordinates::new(match i {
        0 | 1 => vec![-5.0 + 10.0 * u],
        2 => vec![-2.0 + 4.0 * u, -0.4 + 2.4 * v],
        _ => vec![-3.0 + 6.0 * u, -3.0 + 6.0 * v],
    })
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dual_maps_round_trip(f in 0usize..4, u in 0.0..1.0f64, v in 0.0..1.0f64) {
        let m = family(f);
        let l = lambda(f, u, v);
        let back = m.natural_parameters(&m.mean_parameters(&l)?)?;
        let scale = 1.0 + l.lambda().iter().fold(0.0f64, |a, x| a.max(x.abs()));
        prop_assert!(max_abs_diff(back.lambda(), l.lambda()) < 1e-8 * scale);
    }

    #[test]
    fn entropy_is_legendre_transform(f in 0usize..4, u in 0.0..1.0f64, v in 0.0..1.0f64) {
        let m = family(f);
        let a = point(f, u, v);
        let l = m.natural_parameters(&a)?;
        let s = m.entropy(&a)?;
        let log_z = m.log_partition(&l)?;
        let dot: f64 = l.lambda().iter().zip(a.coords()).map(|(x, y)| x * y).sum();
        prop_assert!((s - log_z - dot).abs() <= 1e-10 * s.abs().max(dot.abs()).max(1.0));
    }

    #[test]
    fn entropy_is_concave(
        f in 0usize..4,
        u1 in 0.0..1.0f64, v1 in 0.0..1.0f64,
        u2 in 0.0..1.0f64, v2 in 0.0..1.0f64,
        t in 0.01..0.99f64,
    ) {
        let m = family(f);
        let (a, b) = (point(f, u1, v1), point(f, u2, v2));
        let mix: Vec<f64> = a.coords().iter().zip(b.coords()).map(|(x, y)| t * x + (1.0 - t) * y).collect();
        let s_mix = m.entropy(&ManifoldPoint::new(mix))?;
        prop_assert!(s_mix >= t * m.entropy(&a)? + (1.0 - t) * m.entropy(&b)? - 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences(f in 0usize..4, u in 0.05..0.95f64, v in 0.05..0.95f64) {
        let m = family(f);
        let a = point(f, u, v);
        let grad = m.entropy_gradient(&a)?;
        for (j, &gj) in grad.iter().enumerate() {
            let h = 1e-5 * (1.0 + a.coords()[j].abs());
            let mut e = vec![0.0; grad.len()];
            e[j] = h;
            let plus = m.entropy(&a.offset(&e))?;
            e[j] = -h;
            let minus = m.entropy(&a.offset(&e))?;
            let fd = (plus - minus) / (2.0 * h);
            prop_assert!((fd - gj).abs() <= 1e-6 * gj.abs().max(1.0), "{} vs {}", fd, gj);
        }
    }

    #[test]
    fn metric_inverts_statistics_covariance(f in 0usize..4, u in 0.0..1.0f64, v in 0.0..1.0f64) {
        let m = family(f);
        let a = point(f, u, v);
        let g = geometry::metric(&m, &a)?;
        let cov = m.statistics_covariance(&m.natural_parameters(&a)?)?;
        let prod = g.matmul(&cov);
        let n = m.dim();
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                prop_assert!((prod[(i, j)] - target).abs() < 1e-6);
            }
        }
        prop_assert!(g.is_positive_definite());
        prop_assert!(g.asymmetry() == 0.0);
        let id = g.matmul(&g.inverse()?);
        prop_assert!(id.sub(&entdyn::Matrix::identity(n)).max_abs() < 1e-8);
    }

    #[test]
    fn lowered_christoffel_symbols_are_totally_symmetric(f in 2usize..4, u in 0.05..0.95f64, v in 0.05..0.95f64) {
        let m = family(f);
        let a = point(f, u, v);
        // Γ_kij = ½ ∂_k g_ij, with dg indexed (i, j, k)
        let dg = geometry::metric_derivative(&m, &a)?;
        let scale = dg.max_abs().max(1e-300);
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let x = dg[(i, j, k)];
                    for y in [dg[(j, i, k)], dg[(k, j, i)], dg[(i, k, j)], dg[(j, k, i)], dg[(k, i, j)]] {
                        prop_assert!((x - y).abs() <= 1e-5 * scale);
                    }
                }
            }
        }
    }

    #[test]
    fn fokker_planck_conserves_mass(w in proptest::collection::vec(0.0..1.0f64, 8), scheme in 0usize..2) {
        let m = ExpFamilyModel::<f64>::gaussian_mean();
        let spec = GridSpec { bounds: vec![(-4.0, 4.0)], cells: vec![80] };
        let flux = if scheme == 0 { FluxScheme::Fitted } else { FluxScheme::Central };
        let mut grid = FpGrid::new(&m, &spec, flux)?;
        // random smooth positive profile
        grid.set_invariant_density(|a| {
            1e-3 + w.iter().enumerate().map(|(k, c)| c * (1.0 + (k as f64 * a[0]).cos())).sum::<f64>()
        })?;
        let dt = grid.stable_dt();
        let rep = grid.evolve(50.0 * dt, dt, TimeScheme::ExplicitRk2)?;
        prop_assert!(rep.max_step_mass_drift < 1e-10);
        prop_assert!(rep.min_density >= -1e-12);
    }
}

#[test]
fn geometry_invariants_in_single_precision() {
    let m = ExpFamilyModel::<f32>::gaussian_mean_second_moment();
    let a = ManifoldPoint::new(vec![0.3f32, 1.5]);
    let g = geometry::metric(&m, &a).unwrap();
    let id = g.matmul(&g.inverse().unwrap());
    assert!((id[(0, 0)] - 1.0).abs() < 1e-4 && id[(0, 1)].abs() < 1e-4);
    let l = m.natural_parameters(&a).unwrap();
    let back = m.mean_parameters(&l).unwrap();
    assert!((back.coords()[1] - 1.5).abs() < 1e-4);
}
