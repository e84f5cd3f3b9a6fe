use nalgebra::{DMatrix, DVector};
use optomo::asymptotics::fit_rate;
use optomo::diffusion::solve_de;
use optomo::discretization::{AngularQuadrature, Geometry, SpatialGrid};
use optomo::linearized::{gaussian_hellinger, gaussian_update, moment_distance};
use optomo::medium::Medium;
use optomo::transport::{collision, solve_rte, KineticBoundaryData, SquareScheme, TransportOptions};
use proptest::prelude::*;

fn log_medium(grid: &SpatialGrid<f64>, c: [f64; 3]) -> Medium<f64> {
    Medium::from_log_fn(grid, 10.0, |x| {
        c[0] * (std::f64::consts::PI * x[0]).cos()
            + c[1] * (2.0 * std::f64::consts::PI * x[0]).cos()
            + c[2] * (std::f64::consts::PI * x[1]).cos()
    })
    .unwrap()
}

fn bounds(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn slab_transport_maximum_principle(
        c in prop::array::uniform3(-0.5f64..0.5),
        eps in 0.05f64..1.0,
        data in prop::collection::vec(0.0f64..2.0, 16),
    ) {
        let grid = SpatialGrid::<f64>::slab(256).unwrap();
        let quad = AngularQuadrature::new(Geometry::Slab, 8).unwrap();
        let medium = log_medium(&grid, c);
        let bc = KineticBoundaryData::from_slot_fn(&grid, &quad, |b, q| data[b * 8 + q]);
        let (a, b) = bc.range(&grid, &quad);
        let sol = solve_rte(&grid, &quad, &medium, eps, &bc, &TransportOptions::default()).unwrap();
        let (lo, hi) = bounds(sol.flux.values());
        prop_assert!(lo >= a - 1e-8 && hi <= b + 1e-8, "[{lo}, {hi}] outside [{a}, {b}]");
    }

    #[test]
    fn square_upwind_transport_maximum_principle(
        c in prop::array::uniform3(-0.5f64..0.5),
        eps in 0.1f64..1.0,
        lo in 0.0f64..1.0,
        span in 0.0f64..1.0,
    ) {
        let grid = SpatialGrid::<f64>::square(12).unwrap();
        let quad = AngularQuadrature::new(Geometry::Square, 8).unwrap();
        let medium = log_medium(&grid, c);
        let bc = KineticBoundaryData::from_fn(&grid, &quad, |_, x, v| lo + span * (0.5 + 0.5 * (5.0 * x[0] + 3.0 * x[1] * v[1]).sin()));
        let (a, b) = bc.range(&grid, &quad);
        let options = TransportOptions { scheme: SquareScheme::Upwind, ..TransportOptions::default() };
        let sol = solve_rte(&grid, &quad, &medium, eps, &bc, &options).unwrap();
        let (min, max) = bounds(sol.flux.values());
        prop_assert!(min >= a - 1e-8 && max <= b + 1e-8, "[{min}, {max}] outside [{a}, {b}]");
    }

    #[test]
    fn diffusion_maximum_principle(
        c in prop::array::uniform3(-1.0f64..1.0),
        n in 4usize..20,
        seed in prop::collection::vec(0.0f64..3.0, 8),
    ) {
        let grid = SpatialGrid::<f64>::square(n).unwrap();
        let medium = log_medium(&grid, c);
        let values: Vec<f64> = (0..grid.boundary().len()).map(|b| seed[b % seed.len()]).collect();
        let sol = solve_de(&grid, &medium, &values).unwrap();
        let (a, b) = bounds(&values);
        let (lo, hi) = bounds(&sol.density);
        prop_assert!(lo >= a - 1e-9 && hi <= b + 1e-9);
    }

    #[test]
    fn collision_has_zero_mean_and_kills_constants(
        f in prop::collection::vec(-5.0f64..5.0, 16),
        c in -5.0f64..5.0,
    ) {
        for geometry in [Geometry::Slab, Geometry::Square] {
            let quad = AngularQuadrature::<f64>::new(geometry, 16).unwrap();
            prop_assert!(quad.average(&collision(&f, &quad)).abs() < 1e-12);
            prop_assert!(collision(&[c; 16], &quad).iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn gaussian_update_contracts_the_prior(
        g in prop::collection::vec(-2.0f64..2.0, 6),
        l in prop::collection::vec(-1.0f64..1.0, 9),
        z in prop::collection::vec(-1.0f64..1.0, 2),
        gamma in 0.01f64..2.0,
    ) {
        let g = DMatrix::from_row_slice(2, 3, &g);
        let l = DMatrix::from_row_slice(3, 3, &l);
        let prior = &l * l.transpose() + DMatrix::identity(3, 3) * 0.1;
        let post = gaussian_update(&g, &prior, &DVector::zeros(3), gamma, &DVector::from_vec(z)).unwrap();
        prop_assert!(post.contracts(&prior, 1e-10));
        prop_assert!((&post.covariance - post.covariance.transpose()).amax() < 1e-14);
        prop_assert!(post.eigenvalues().iter().all(|&e| e > 0.0));
        let (dm, dc) = moment_distance(&post, &post).unwrap();
        prop_assert!(dm == 0.0 && dc == 0.0);
        prop_assert!(gaussian_hellinger(&post, &post).unwrap().abs() < 1e-7);
    }

    #[test]
    fn gaussian_hellinger_is_a_bounded_symmetric_distance(
        m in prop::collection::vec(-3.0f64..3.0, 4),
        s in prop::array::uniform2(0.1f64..3.0),
    ) {
        let g = DMatrix::identity(2, 2);
        let prior = DMatrix::from_diagonal(&DVector::from_vec(s.to_vec()));
        let p = gaussian_update(&g, &prior, &DVector::zeros(2), 0.5, &DVector::from_vec(m[..2].to_vec())).unwrap();
        let q = gaussian_update(&g, &prior, &DVector::zeros(2), 1.0, &DVector::from_vec(m[2..].to_vec())).unwrap();
        let pq = gaussian_hellinger(&p, &q).unwrap();
        let qp = gaussian_hellinger(&q, &p).unwrap();
        prop_assert!((0.0..=1.0).contains(&pq));
        prop_assert!((pq - qp).abs() < 1e-12);
    }

    #[test]
    fn rate_fit_recovers_power_laws(a in 0.01f64..100.0, p in 0.1f64..3.0) {
        let pts: Vec<(f64, f64)> = (0..7).map(|i| 0.4 * 0.5f64.powf(i as f64 / 2.0)).map(|e| (e, a * e.powf(p))).collect();
        let fit = fit_rate("m", &pts).unwrap();
        prop_assert!((fit.slope - p).abs() < 1e-10);
        prop_assert!((fit.intercept - a.ln()).abs() < 1e-9);
        prop_assert!(fit.r2 > 1.0 - 1e-12);
    }
}
