use mfgem::baselines::{classical_em, kmeans, nearest};
use mfgem::density::{density_from_grey_image, density_from_points, PointSet};
use mfgem::grid::{Grid, ScalarField};
use mfgem::io::{encode_pgm, parse_pgm, parse_points_csv, GreyImage, PgmFormat};
use mfgem::mfgsolver::{solve_population, HamiltonianSpec, NewtonConfig};
use mfgem::mixture::{coupling_cost, gaussian_field, responsibilities, update_moments};
use mfgem::verify::{duality_defects, jacobian_error};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn grid_strategy() -> impl Strategy<Value = Grid> {
    prop_oneof![
        (3usize..60, -2.0f64..1.0, 0.1f64..3.0).prop_map(|(n, lo, len)| Grid::new(1, &[(lo, lo + len)], &[n]).unwrap()),
        (3usize..12, 3usize..12, 0.1f64..2.0).prop_map(|(nx, ny, len)| {
            Grid::new(2, &[(0.0, len), (-len, 0.5)], &[nx, ny]).unwrap()
        }),
    ]
}

fn points_1d(v: &[f64]) -> PointSet {
    PointSet::new(1, &v.iter().map(|x| vec![*x]).collect::<Vec<_>>()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quadrature_is_linear(grid in grid_strategy(), a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let n = grid.len();
        let f: Vec<f64> = (0..n).map(|i| ((i as u64 * 31 + seed) % 17) as f64 - 8.0).collect();
        let g: Vec<f64> = (0..n).map(|i| ((i as u64 * 7 + seed) % 13) as f64 * 0.5).collect();
        let combo: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
        let lhs = grid.integrate(&combo);
        let rhs = a * grid.integrate(&f) + b * grid.integrate(&g);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        prop_assert!((grid.integrate(&vec![1.0; n]) - grid.volume()).abs() <= 1e-12 * grid.volume());
    }

    #[test]
    fn quadrature_error_shrinks_under_refinement(c in 0.5f64..3.0, n in 11usize..41) {
        let exact = (c.exp() - 1.0) / c;
        let err = |n: usize| {
            let grid = Grid::unit_interval(n).unwrap();
            let v: Vec<f64> = (0..n).map(|i| (c * grid.coord(i, 0)).exp()).collect();
            (grid.integrate(&v) - exact).abs()
        };
        prop_assert!(err(n) / err(2 * n - 1) >= 1.8);
    }

    #[test]
    fn responsibilities_partition_unity(
        k in 1usize..5,
        raw_alpha in proptest::collection::vec(0.05f64..1.0, 5),
        centres in proptest::collection::vec(0.0f64..1.0, 5),
        var in 1e-3f64..0.1,
    ) {
        let grid = Grid::unit_interval(101).unwrap();
        let total: f64 = raw_alpha[..k].iter().sum();
        let alpha: Vec<f64> = raw_alpha[..k].iter().map(|a| a / total).collect();
        let comps = (0..k)
            .map(|c| gaussian_field(&grid, &DVector::from_element(1, centres[c]), &DMatrix::from_element(1, 1, var)).unwrap())
            .collect::<Vec<_>>();
        let resp = responsibilities(&alpha, &comps).unwrap();
        for i in 0..grid.len() {
            let s: f64 = resp.fields.iter().map(|g| g.values()[i]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(resp.fields.iter().all(|g| (0.0..=1.0 + 1e-15).contains(&g.values()[i])));
        }
        let f = gaussian_field(&grid, &DVector::from_element(1, 0.5), &DMatrix::from_element(1, 1, 0.05)).unwrap();
        let update = update_moments(&resp, &f);
        prop_assert!((update.alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        prop_assert!(update.alpha.iter().all(|a| *a >= 0.0));
    }

    #[test]
    fn point_density_ignores_order_and_scale(v in proptest::collection::vec(0.0f64..1.0, 1..80), rot in 0usize..80) {
        let grid = Grid::unit_interval(21).unwrap();
        let base = density_from_points(&points_1d(&v), &grid, None).unwrap();
        let mut shuffled = v.clone();
        let len = shuffled.len();
        shuffled.rotate_left(rot % len);
        shuffled.reverse();
        let permuted = density_from_points(&points_1d(&shuffled), &grid, None).unwrap();
        let doubled: Vec<f64> = v.iter().chain(&v).copied().collect();
        let doubled = density_from_points(&points_1d(&doubled), &grid, None).unwrap();
        for ((a, b), c) in base.values().iter().zip(permuted.values()).zip(doubled.values()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            prop_assert!((a - c).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        prop_assert!((base.integrate() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn grey_density_ignores_pixel_order(pixels in proptest::collection::vec(any::<u8>(), 1..200)) {
        let n = pixels.len();
        let a = density_from_grey_image(&GreyImage::new(n, 1, pixels.clone()).unwrap()).unwrap();
        let mut rev = pixels.clone();
        rev.reverse();
        let tiled: Vec<u8> = rev.iter().chain(&pixels).copied().collect();
        let b = density_from_grey_image(&GreyImage::new(n, 2, tiled).unwrap()).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn pgm_round_trips(w in 1usize..20, h in 1usize..20, seed in any::<u64>(), binary in any::<bool>()) {
        let pixels: Vec<u8> = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
        let image = GreyImage::new(w, h, pixels).unwrap();
        let format = if binary { PgmFormat::P5 } else { PgmFormat::P2 };
        let (back, f) = parse_pgm(&encode_pgm(&image, format)).unwrap();
        prop_assert_eq!(back, image);
        prop_assert_eq!(f, format);
    }

    #[test]
    fn csv_round_trips(v in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..30)) {
        let text: String = v.iter().map(|(a, b)| format!("{a},{b}\n")).collect();
        let pts = parse_points_csv(&text).unwrap();
        prop_assert_eq!(pts.len(), v.len());
        for (p, (a, b)) in pts.iter().zip(&v) {
            prop_assert_eq!(p, &[*a, *b][..]);
        }
    }

    #[test]
    fn kmeans_objective_never_increases(v in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 6..60), k in 1usize..4) {
        let pts: Vec<Vec<f64>> = v.iter().map(|(a, b)| vec![*a, *b]).collect();
        let set = PointSet::new(2, &pts).unwrap();
        let r = kmeans(&set, k, &pts[..k], 100).unwrap();
        for w in r.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        for (p, a) in set.iter().zip(&r.assignments) {
            prop_assert_eq!(nearest(p, &r.barycentres), *a);
        }
    }

    #[test]
    fn classical_em_log_likelihood_never_decreases(
        a in proptest::collection::vec(0.0f64..3.0, 4..40),
        b in proptest::collection::vec(5.0f64..10.0, 4..40),
    ) {
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        // the covariance eigenvalue floor is not a likelihood step
        prop_assume!(var(&a) > 0.05 && var(&b) > 0.05);
        let pts: Vec<f64> = a.iter().chain(&b).copied().collect();
        let set = points_1d(&pts);
        let r = classical_em(&set, 2, &[vec![1.0], vec![8.0]], 200, 1e-10).unwrap();
        for w in r.log_likelihood.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-10, "{} -> {}", w[0], w[1]);
        }
        prop_assert!((r.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn transport_is_adjoint_and_mass_is_conserved(seed in any::<u64>()) {
        let (t, m) = duality_defects(31, seed).unwrap();
        prop_assert!(t <= 1e-14, "transpose defect {t:e}");
        prop_assert!(m <= 1e-13, "mass defect {m:e}");
    }

    #[test]
    fn jacobian_matches_finite_differences(seed in any::<u64>()) {
        prop_assert!(jacobian_error(21, 4, seed).unwrap() <= 1e-6);
    }

    #[test]
    fn population_solution_is_a_probability_density(mu in 0.3f64..0.7, var in 0.002f64..0.01) {
        let grid = Grid::unit_interval(81).unwrap();
        let cost = coupling_cost(&grid, &DVector::from_element(1, mu), &DMatrix::from_element(1, 1, var)).unwrap();
        let sol = solve_population(&cost, &HamiltonianSpec::quadratic(), &grid, &NewtonConfig::default(), None).unwrap();
        prop_assert!((sol.m.integrate() - 1.0).abs() <= 1e-10);
        prop_assert!(sol.m.values().iter().all(|v| *v >= 0.0));
        prop_assert!(sol.u.integrate().abs() <= 1e-10);
        // at least three standard deviations from the wall
        let mode = sol.m.values().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert!((grid.coord(mode, 0) - mu).abs() <= 2.0 * grid.spacing()[0]);
        // step-accepted residuals only go down
        for w in sol.report.log.windows(2) {
            prop_assert!(w[1].residual <= w[0].residual);
        }
    }
}

#[test]
fn constant_field_integrates_to_volume() {
    let grid = Grid::new(2, &[(0.0, 2.0), (1.0, 1.5)], &[9, 4]).unwrap();
    let f = ScalarField::constant(grid, 3.0);
    assert!((f.integrate() - 3.0).abs() < 1e-14);
}
