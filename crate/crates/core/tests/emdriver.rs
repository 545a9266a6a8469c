use mfgem::density::{density_from_function, BuiltinDensity, DensityField};
use mfgem::emdriver::{e_step, export, initial_means, initialize, m_step, run, EmConfig};
use mfgem::error::Error;
use mfgem::grid::Grid;
use mfgem::mixture::{check_consistency, field_moments};
use nalgebra::DVector;

fn plateaux(n: usize) -> DensityField {
    BuiltinDensity::Plateaux.build(&Grid::unit_interval(n).unwrap()).unwrap()
}

#[test]
fn seeded_initial_means_are_spread_inside_the_support() {
    let f = plateaux(201);
    let means = initial_means(&f, 3, 0).unwrap();
    assert_eq!(means, initial_means(&f, 3, 0).unwrap());
    for m in &means {
        assert!((0.1..=0.9).contains(&m[0]));
    }
    for i in 0..3 {
        for j in i + 1..3 {
            assert!((means[i][0] - means[j][0]).abs() >= 0.1);
        }
    }
}

#[test]
fn e_step_matches_direct_quadrature() {
    let f = plateaux(101);
    let grid = *f.grid();
    let config = EmConfig {
        initial_means: Some([0.15, 0.5, 0.85].iter().map(|m| DVector::from_element(1, *m)).collect()),
        ..EmConfig::with_k(3)
    };
    let state = initialize(&f, &config).unwrap();
    let (next, _) = e_step(&state, &f).unwrap();
    for k in 0..3 {
        let (mut a, mut mass, mut first, mut second) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..grid.len() {
            let m: f64 = (0..3).map(|c| state.alpha[c] * state.components[c].values()[i]).sum();
            let ratio = state.components[k].values()[i] / m;
            let q = grid.weight(i) * ratio * f.values()[i];
            let x = grid.coord(i, 0);
            a += q * state.alpha[k];
            mass += q;
            first += q * x;
            second += q * x * x;
        }
        let mean = first / mass;
        assert!((next.alpha[k] - a).abs() < 1e-12);
        assert!((next.means[k][0] - mean).abs() < 1e-12);
        let var = second / mass - mean * mean;
        let expected = if var < 1e-4 { var + 1e-4 } else { var };
        assert!((next.covariances[k][(0, 0)] - expected).abs() < 1e-12);
    }
    assert!((next.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn single_component_reproduces_the_data_mean() {
    let f = plateaux(101);
    let result = run(&f, &EmConfig::with_k(1)).unwrap();
    assert!(result.converged);
    assert!((result.state.alpha[0] - 1.0).abs() < 1e-12);
    let (_, data_mean, _) = field_moments(&f);
    assert!((&result.state.means[0] - data_mean).norm() < 1e-12);
}

#[test]
fn runs_are_deterministic_and_parallelism_is_invisible() {
    let f = plateaux(101);
    let config = EmConfig::with_k(3);
    let a = run(&f, &config).unwrap();
    let b = run(&f, &config).unwrap();
    let c = run(
        &f,
        &EmConfig {
            parallel: false,
            ..config.clone()
        },
    )
    .unwrap();
    for other in [&b, &c] {
        assert_eq!(a.state.means, other.state.means);
        assert_eq!(a.state.alpha, other.state.alpha);
        assert_eq!(a.lambdas(), other.lambdas());
        assert_eq!(a.iterations, other.iterations);
    }
}

#[test]
fn converged_state_is_nearly_a_fixed_point() {
    let f = plateaux(201);
    let config = EmConfig::with_k(3);
    let result = run(&f, &config).unwrap();
    assert!(result.converged);
    let (next, _) = e_step(&result.state, &f).unwrap();
    let moved = next
        .means
        .iter()
        .zip(&result.state.means)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    assert!(moved < 10.0 * config.tol, "means moved by {moved:e}");
    let warm: Vec<_> = result.solutions.iter().cloned().map(Some).collect();
    let again = m_step(&next, f.grid(), &config, &warm).unwrap();
    assert!(again.iter().all(|s| s.report.iterations <= 2));
    let report = check_consistency(&result.state, &f, config.epsilon).unwrap();
    assert!(report.components.iter().all(|c| c.weight < 1e-3));
}

#[test]
fn two_dimensional_mixture_runs() {
    let grid = Grid::unit_square(31).unwrap();
    let f = density_from_function(&grid, |x| {
        let a = (-((x[0] - 0.3).powi(2) + (x[1] - 0.3).powi(2)) / 0.01).exp();
        let b = (-((x[0] - 0.7).powi(2) + (x[1] - 0.7).powi(2)) / 0.01).exp();
        a + b
    })
    .unwrap();
    let result = run(&f, &EmConfig::with_k(2)).unwrap();
    assert!(result.converged);
    let mut firsts: Vec<f64> = result.state.means.iter().map(|m| m[0]).collect();
    firsts.sort_by(f64::total_cmp);
    assert!((firsts[0] - 0.3).abs() < 0.02 && (firsts[1] - 0.7).abs() < 0.02);
    assert!(result.state.alpha.iter().all(|a| (a - 0.5).abs() < 0.01));
}

#[test]
fn too_many_components_is_an_error() {
    let grid = Grid::unit_interval(11).unwrap();
    let f = density_from_function(&grid, |x| if (0.35..0.65).contains(&x[0]) { 1.0 } else { 0.0 }).unwrap();
    assert!(matches!(
        run(&f, &EmConfig::with_k(5)),
        Err(Error::TooManyComponents { k: 5, available: 3 })
    ));
}

#[test]
fn export_writes_all_tables() {
    let f = plateaux(101);
    let result = run(&f, &EmConfig::with_k(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export(&result, &f, dir.path()).unwrap();
    let mixture: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("mixture.json")).unwrap()).unwrap();
    assert_eq!(mixture["k"], 3);
    assert_eq!(mixture["components"].as_array().unwrap().len(), 3);
    let fields = std::fs::read_to_string(dir.path().join("fields.csv")).unwrap();
    assert_eq!(fields.lines().count(), 102);
    let history = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), result.iterations + 1);
}
