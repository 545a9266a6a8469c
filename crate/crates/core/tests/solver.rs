use approx::assert_relative_eq;
use mfgem::error::Error;
use mfgem::grid::{Grid, ScalarField};
use mfgem::mfgsolver::{assemble_system, solve_population, system_shape, HamiltonianSpec, NewtonConfig};
use mfgem::mixture::{coupling_cost, field_moments, gaussian_field};
use nalgebra::{DMatrix, DVector};

fn solve(grid: &Grid, mean: &[f64], cov: DMatrix<f64>, epsilon: f64) -> mfgem::mfgsolver::PopulationSolution {
    let cost = coupling_cost(grid, &DVector::from_column_slice(mean), &cov).unwrap();
    let config = NewtonConfig {
        epsilon,
        ..NewtonConfig::default()
    };
    solve_population(&cost, &HamiltonianSpec::quadratic(), grid, &config, None).unwrap()
}

#[test]
fn constant_cost_gives_uniform_density() {
    let grid = Grid::unit_square(11).unwrap();
    let cost = ScalarField::constant(grid, 2.5);
    let sol = solve_population(&cost, &HamiltonianSpec::quadratic(), &grid, &NewtonConfig::default(), None).unwrap();
    assert_eq!(sol.report.iterations, 0);
    assert_relative_eq!(sol.lambda, 2.5, epsilon = 1e-12);
    assert!(sol.m.values().iter().all(|v| (v - 1.0).abs() < 1e-12));
    assert!(sol.u.values().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn narrow_gaussian_matches_closed_form_1d() {
    // the wall is seven standard deviations away, so truncation is negligible
    let grid = Grid::unit_interval(401).unwrap();
    let var = 0.005;
    let sol = solve(&grid, &[0.5], DMatrix::from_element(1, 1, var), 1.0);
    assert_relative_eq!(sol.lambda, 1.0 / var, max_relative = 0.01);
    let reference = gaussian_field(&grid, &DVector::from_element(1, 0.5), &DMatrix::from_element(1, 1, var)).unwrap();
    let diff: Vec<f64> = sol.m.values().iter().zip(reference.values()).map(|(a, b)| (a - b).abs()).collect();
    assert!(grid.integrate(&diff) < 0.01);
}

#[test]
fn diffusion_scales_lambda_and_spread() {
    let grid = Grid::unit_interval(401).unwrap();
    let var = 0.004;
    for eps in [0.5, 1.0, 1.5] {
        let sol = solve(&grid, &[0.5], DMatrix::from_element(1, 1, var), eps);
        assert_relative_eq!(sol.lambda, eps / var, max_relative = 0.01);
        let (_, mean, cov) = field_moments(&sol.m);
        assert!((mean[0] - 0.5).abs() < 1e-6);
        assert_relative_eq!(cov[(0, 0)], eps * var, max_relative = 0.02);
    }
}

#[test]
fn anisotropic_gaussian_in_2d() {
    let grid = Grid::unit_square(41).unwrap();
    let cov = DMatrix::from_row_slice(2, 2, &[0.006, 0.002, 0.002, 0.005]);
    let sol = solve(&grid, &[0.5, 0.5], cov.clone(), 1.0);
    let trace_inv = cov.clone().try_inverse().unwrap().trace();
    assert_relative_eq!(sol.lambda, trace_inv, max_relative = 0.03);
    let (mass, mean, spread) = field_moments(&sol.m);
    assert_relative_eq!(mass, 1.0, epsilon = 1e-10);
    assert!((mean[0] - 0.5).abs() < 1e-6 && (mean[1] - 0.5).abs() < 1e-6);
    assert!((spread - cov).abs().max() < 5e-4);
    assert!(sol.u.integrate().abs() < 1e-10);
}

#[test]
fn warm_start_from_a_solution_is_immediate() {
    let grid = Grid::unit_interval(201).unwrap();
    let cost = coupling_cost(&grid, &DVector::from_element(1, 0.4), &DMatrix::from_element(1, 1, 0.01)).unwrap();
    let ham = HamiltonianSpec::quadratic();
    let config = NewtonConfig::default();
    let cold = solve_population(&cost, &ham, &grid, &config, None).unwrap();
    let warm = solve_population(&cost, &ham, &grid, &config, Some(&cold)).unwrap();
    assert!(warm.report.iterations <= 1);
    assert_relative_eq!(warm.lambda, cold.lambda, max_relative = 1e-8);
}

#[test]
fn residuals_vanish_at_the_solution() {
    let grid = Grid::unit_interval(101).unwrap();
    let cost = coupling_cost(&grid, &DVector::from_element(1, 0.55), &DMatrix::from_element(1, 1, 0.02)).unwrap();
    let ham = HamiltonianSpec::quadratic();
    let sol = solve_population(&cost, &ham, &grid, &NewtonConfig::default(), None).unwrap();
    let (res, jac) = assemble_system(sol.u.values(), sol.m.values(), sol.lambda, cost.values(), &ham, &grid, 1.0);
    assert_eq!((jac.nrows(), jac.ncols()), system_shape(&grid));
    let scale = 1.0 + cost.values().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let norm = res.iter().map(|r| r * r).sum::<f64>().sqrt();
    assert!(norm < 1e-6 * scale, "residual {norm:e}");
}

#[test]
fn general_hamiltonians_conserve_mass() {
    let grid = Grid::unit_interval(101).unwrap();
    let cost = coupling_cost(&grid, &DVector::from_element(1, 0.5), &DMatrix::from_element(1, 1, 0.02)).unwrap();
    for (coef, exp) in [(0.5, 2.0), (0.8, 3.0), (1.0, 1.5)] {
        let ham = HamiltonianSpec::new(coef, exp, None).unwrap();
        let sol = solve_population(&cost, &ham, &grid, &NewtonConfig::default(), None).unwrap();
        assert_relative_eq!(sol.m.integrate(), 1.0, epsilon = 1e-10);
        assert!(sol.m.values().iter().all(|v| *v >= 0.0));
        let mode = sol.m.values().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert!((grid.coord(mode, 0) - 0.5).abs() <= 0.02, "r = {exp}");
    }
}

#[test]
fn offset_shifts_lambda() {
    let grid = Grid::unit_interval(101).unwrap();
    let cost = coupling_cost(&grid, &DVector::from_element(1, 0.5), &DMatrix::from_element(1, 1, 0.02)).unwrap();
    let plain = solve_population(&cost, &HamiltonianSpec::quadratic(), &grid, &NewtonConfig::default(), None).unwrap();
    let offset = ScalarField::constant(grid, 0.75);
    let ham = HamiltonianSpec::new(0.5, 2.0, Some(offset)).unwrap();
    let shifted = solve_population(&cost, &ham, &grid, &NewtonConfig::default(), None).unwrap();
    assert_relative_eq!(shifted.lambda, plain.lambda + 0.75, max_relative = 1e-8);
}

#[test]
fn bad_configurations_are_rejected() {
    let grid = Grid::unit_interval(21).unwrap();
    let cost = ScalarField::constant(grid, 1.0);
    let ham = HamiltonianSpec::quadratic();
    let config = NewtonConfig {
        epsilon: -1.0,
        ..NewtonConfig::default()
    };
    assert!(matches!(
        solve_population(&cost, &ham, &grid, &config, None),
        Err(Error::InvalidConfig(_))
    ));
    assert!(HamiltonianSpec::new(0.5, 1.0, None).is_err());
    assert!(HamiltonianSpec::new(-0.5, 2.0, None).is_err());
}
