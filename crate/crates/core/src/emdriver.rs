//! The outer MFG-EM iteration.
//!
//! Each outer step computes responsibilities, weights, means and
//! covariances from the previous component densities (E-step), then solves
//! the `K` population systems with the new coupling costs (M-step). Every
//! M-step runs Newton to convergence, warm-started from the previous
//! outer iterate.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::density::DensityField;
use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};
use crate::mfgsolver::{solve_population, HamiltonianSpec, NewtonConfig, PopulationSolution};
use crate::mixture::{coupling_cost, gaussian_field, responsibilities, update_moments, MixtureState};

const INIT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub k: usize,
    pub epsilon: f64,
    pub tol: f64,
    pub max_iterations: usize,
    pub seed: u64,
    pub initial_means: Option<Vec<DVector<f64>>>,
    pub hamiltonian: HamiltonianSpec,
    /// Newton settings; its `epsilon` is overridden by the field above.
    pub newton: NewtonConfig,
    pub parallel: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            k: 1,
            epsilon: 1.0,
            tol: 1e-4,
            max_iterations: 200,
            seed: 0,
            initial_means: None,
            hamiltonian: HamiltonianSpec::quadratic(),
            newton: NewtonConfig::default(),
            parallel: true,
        }
    }
}

impl EmConfig {
    pub fn with_k(k: usize) -> Self {
        EmConfig {
            k,
            ..EmConfig::default()
        }
    }

    pub fn newton_config(&self) -> NewtonConfig {
        NewtonConfig {
            epsilon: self.epsilon,
            ..self.newton.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("K must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("tol must be positive".into()));
        }
        if let Some(means) = &self.initial_means {
            if means.len() != self.k {
                return Err(Error::InvalidConfig(format!("{} initial means for K = {}", means.len(), self.k)));
            }
        }
        self.newton_config().validate()
    }
}

/// One outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub mean_change: f64,
    pub covariance_change: f64,
    /// Mixture nodes clamped in the E-step.
    pub clamped_nodes: usize,
    /// Covariances raised to the floor in the E-step.
    pub regularized: usize,
    /// Newton iterations summed over the populations.
    pub newton_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct ClusterResult {
    /// Final weights, means and covariances with the last component
    /// densities; responsibilities are recomputed from them.
    pub state: MixtureState,
    pub solutions: Vec<PopulationSolution>,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<HistoryEntry>,
}

impl ClusterResult {
    pub fn lambdas(&self) -> Vec<f64> {
        self.solutions.iter().map(|s| s.lambda).collect()
    }

    pub fn potentials(&self) -> Vec<&ScalarField> {
        self.solutions.iter().map(|s| &s.u).collect()
    }

    /// `∫ f log m`, the data log-likelihood of the final mixture.
    pub fn log_likelihood(&self, f: &DensityField) -> f64 {
        let m = self.state.mixture_values();
        let vals: Vec<f64> = f
            .values()
            .iter()
            .zip(&m)
            .map(|(fv, mv)| if *fv > 0.0 { fv * mv.max(f64::MIN_POSITIVE).ln() } else { 0.0 })
            .collect();
        f.grid().integrate(&vals)
    }
}

/// Initial variance `(0.1 · diameter)²`.
pub fn initial_variance(grid: &Grid) -> f64 {
    (0.1 * grid.diameter()).powi(2)
}

fn support_box(f: &DensityField) -> (Vec<f64>, Vec<f64>, usize) {
    let grid = f.grid();
    let d = grid.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    let mut count = 0;
    for (i, v) in f.values().iter().enumerate() {
        if *v > 0.0 {
            count += 1;
            let x = grid.point(i);
            for a in 0..d {
                lo[a] = lo[a].min(x[a]);
                hi[a] = hi[a].max(x[a]);
            }
        }
    }
    (lo, hi, count)
}

fn min_pairwise_distance(points: &[DVector<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.min((&points[i] - &points[j]).norm());
        }
    }
    best
}

/// Seeded initial means, uniform in the bounding box of `supp f`, kept at
/// least half the typical spacing of `K` uniform points apart.
pub fn initial_means(f: &DensityField, k: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    let (lo, hi, count) = support_box(f);
    if k > count {
        return Err(Error::TooManyComponents { k, available: count });
    }
    let d = lo.len();
    let volume: f64 = lo.iter().zip(&hi).map(|(a, b)| (b - a).max(f64::EPSILON)).product();
    let spacing = 0.5 * (volume / k as f64).powf(1.0 / d as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<DVector<f64>>)> = None;
    for _ in 0..INIT_ATTEMPTS {
        let means: Vec<DVector<f64>> = (0..k)
            .map(|_| DVector::from_fn(d, |a, _| if hi[a] > lo[a] { rng.gen_range(lo[a]..=hi[a]) } else { lo[a] }))
            .collect();
        let dist = min_pairwise_distance(&means);
        if dist >= spacing {
            return Ok(means);
        }
        if best.as_ref().is_none_or(|(b, _)| dist > *b) {
            best = Some((dist, means));
        }
    }
    Ok(best.expect("at least one attempt").1)
}

/// `α_k = 1/K` and Gaussian components `N(μ⁰_k, s² I)`.
pub fn initialize(f: &DensityField, config: &EmConfig) -> Result<MixtureState> {
    config.validate()?;
    let grid = *f.grid();
    let means = match &config.initial_means {
        Some(means) => {
            if means.iter().any(|m| m.len() != grid.dim()) {
                return Err(Error::InvalidConfig("initial mean dimension differs from the grid".into()));
            }
            means.clone()
        }
        None => initial_means(f, config.k, config.seed)?,
    };
    let cov = DMatrix::identity(grid.dim(), grid.dim()) * initial_variance(&grid);
    let components = means
        .iter()
        .map(|mu| gaussian_field(&grid, mu, &cov))
        .collect::<Result<Vec<_>>>()?;
    let alpha = vec![1.0 / config.k as f64; config.k];
    let resp = responsibilities(&alpha, &components)?;
    Ok(MixtureState {
        alpha,
        components,
        responsibilities: resp.fields,
        covariances: vec![cov; config.k],
        means,
    })
}

/// E-step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EStepInfo {
    pub clamped_nodes: usize,
    pub regularized: usize,
}

/// Responsibilities, then weights, means and covariances, all from the
/// current component densities.
pub fn e_step(state: &MixtureState, f: &DensityField) -> Result<(MixtureState, EStepInfo)> {
    let resp = responsibilities(&state.alpha, &state.components)?;
    let update = update_moments(&resp, f);
    let info = EStepInfo {
        clamped_nodes: resp.clamped_nodes,
        regularized: update.regularized,
    };
    Ok((
        MixtureState {
            alpha: update.alpha,
            components: state.components.clone(),
            responsibilities: resp.fields,
            means: update.means,
            covariances: update.covariances,
        },
        info,
    ))
}

/// Solves the `K` population systems for the state's means and
/// covariances. `warm` holds the previous solutions, if any.
pub fn m_step(
    state: &MixtureState,
    grid: &Grid,
    config: &EmConfig,
    warm: &[Option<PopulationSolution>],
) -> Result<Vec<PopulationSolution>> {
    let newton = config.newton_config();
    let solve = |k: usize| -> Result<PopulationSolution> {
        let cost = coupling_cost(grid, &state.means[k], &state.covariances[k])?;
        solve_population(&cost, &config.hamiltonian, grid, &newton, warm.get(k).and_then(Option::as_ref))
            .map_err(|e| Error::Population {
                k,
                source: Box::new(e),
            })
    };
    let results: Vec<Result<PopulationSolution>> = if config.parallel {
        (0..state.k()).into_par_iter().map(solve).collect()
    } else {
        (0..state.k()).map(solve).collect()
    };
    results.into_iter().collect()
}

fn max_change(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

fn max_entry_change(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| (x - y).iter().map(|v| v.abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

/// Alternates E- and M-steps until the means and covariances move by less
/// than `tol`, or the iteration cap is hit.
pub fn run(f: &DensityField, config: &EmConfig) -> Result<ClusterResult> {
    let grid = *f.grid();
    let mut state = initialize(f, config)?;
    let mut warm: Vec<Option<PopulationSolution>> = vec![None; config.k];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let (next, info) = e_step(&state, f)?;
        let mean_change = max_change(&next.means, &state.means);
        let covariance_change = max_entry_change(&next.covariances, &state.covariances);
        let solutions = m_step(&next, &grid, config, &warm)?;
        history.push(HistoryEntry {
            iteration: iterations,
            mean_change,
            covariance_change,
            clamped_nodes: info.clamped_nodes,
            regularized: info.regularized,
            newton_iterations: solutions.iter().map(|s| s.report.iterations).sum(),
        });
        state = MixtureState {
            components: solutions.iter().map(|s| s.m.clone()).collect(),
            ..next
        };
        warm = solutions.into_iter().map(Some).collect();
        if mean_change < config.tol && covariance_change < config.tol {
            converged = true;
            break;
        }
    }
    state.responsibilities = responsibilities(&state.alpha, &state.components)?.fields;
    Ok(ClusterResult {
        state,
        solutions: warm.into_iter().map(|s| s.expect("at least one M-step")).collect(),
        iterations,
        converged,
        history,
    })
}

/// Runs from `restarts` consecutive seeds and keeps the result with the
/// highest data log-likelihood; converged runs win over capped ones.
pub fn run_with_restarts(f: &DensityField, config: &EmConfig, restarts: usize) -> Result<ClusterResult> {
    let mut best: Option<(bool, f64, ClusterResult)> = None;
    let mut last_err = None;
    for r in 0..restarts.max(1) {
        let cfg = EmConfig {
            seed: config.seed.wrapping_add(r as u64),
            ..config.clone()
        };
        match run(f, &cfg) {
            Ok(res) => {
                let ll = res.log_likelihood(f);
                let better = match &best {
                    None => true,
                    Some((conv, bl, _)) => (res.converged, ll) > (*conv, *bl),
                };
                if better {
                    best = Some((res.converged, ll, res));
                }
            }
            Err(e) => last_err = Some(e),
        }
        if config.initial_means.is_some() {
            break;
        }
    }
    match (best, last_err) {
        (Some((_, _, res)), _) => Ok(res),
        (None, Some(e)) => Err(e),
        (None, None) => unreachable!("at least one run"),
    }
}

#[derive(Serialize)]
struct ComponentRecord {
    alpha: f64,
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
    lambda: f64,
}

#[derive(Serialize)]
struct MixtureRecord {
    k: usize,
    iterations: usize,
    converged: bool,
    components: Vec<ComponentRecord>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

pub fn mixture_json(result: &ClusterResult) -> Result<String> {
    let s = &result.state;
    let record = MixtureRecord {
        k: s.k(),
        iterations: result.iterations,
        converged: result.converged,
        components: (0..s.k())
            .map(|k| ComponentRecord {
                alpha: s.alpha[k],
                mean: s.means[k].iter().copied().collect(),
                covariance: matrix_rows(&s.covariances[k]),
                lambda: result.solutions[k].lambda,
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&record)?)
}

/// Writes `mixture.json`, `fields.csv` and `history.csv` into `dir`.
pub fn export(result: &ClusterResult, f: &DensityField, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("mixture.json"), mixture_json(result)? + "\n")?;

    let s = &result.state;
    let grid = f.grid();
    let mut w = csv::Writer::from_path(dir.join("fields.csv"))?;
    let mut header: Vec<String> = (0..grid.dim()).map(|a| format!("x{a}")).collect();
    header.push("f".into());
    header.push("m".into());
    header.extend((0..s.k()).map(|k| format!("m{k}")));
    header.extend((0..s.k()).map(|k| format!("gamma{k}")));
    w.write_record(&header)?;
    let mix = s.mixture_values();
    for i in 0..grid.len() {
        let x = grid.point(i);
        let mut row: Vec<String> = x[..grid.dim()].iter().map(|c| c.to_string()).collect();
        row.push(f.values()[i].to_string());
        row.push(mix[i].to_string());
        row.extend(s.components.iter().map(|c| c.values()[i].to_string()));
        row.extend(s.responsibilities.iter().map(|g| g.values()[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("history.csv"))?;
    for h in &result.history {
        w.serialize(h)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{density_from_function, BuiltinDensity};

    #[test]
    fn initialization_is_seeded_and_spread() {
        let g = Grid::unit_interval(201).unwrap();
        let f = BuiltinDensity::Plateaux.build(&g).unwrap();
        let a = initialize(&f, &EmConfig { seed: 5, ..EmConfig::with_k(3) }).unwrap();
        let b = initialize(&f, &EmConfig { seed: 5, ..EmConfig::with_k(3) }).unwrap();
        assert_eq!(a, b);
        assert!(min_pairwise_distance(&a.means) >= 0.1);
        for mu in &a.means {
            assert!(mu[0] >= 0.1 && mu[0] <= 0.9);
        }
        assert_eq!(a.alpha, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn too_many_components() {
        let g = Grid::unit_interval(11).unwrap();
        let f = density_from_function(&g, |x| if x[0] < 0.15 { 1.0 } else { 0.0 }).unwrap();
        assert!(matches!(
            initialize(&f, &EmConfig::with_k(3)),
            Err(Error::TooManyComponents { k: 3, available: 2 })
        ));
    }

    #[test]
    fn single_component_keeps_unit_weight() {
        let g = Grid::unit_interval(101).unwrap();
        let f = density_from_function(&g, |x| 1.0 + x[0]).unwrap();
        let state = initialize(&f, &EmConfig::with_k(1)).unwrap();
        let (next, _) = e_step(&state, &f).unwrap();
        assert!((next.alpha[0] - 1.0).abs() < 1e-12);
        let mean_f: f64 = g.integrate(&(0..g.len()).map(|i| g.coord(i, 0) * f.values()[i]).collect::<Vec<_>>());
        assert!((next.means[0][0] - mean_f).abs() < 1e-12);
    }
}
