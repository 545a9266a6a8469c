//! Damped Gauss-Newton on the overdetermined population system.

use std::path::Path;

use faer::linalg::solvers::{Solve, SolveLstsq};
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::operators::{jacobian_with, system_residual_with, SparseMatrix, Stencil};
use super::{HamiltonianSpec, NewtonConfig, PopulationSolution};
use crate::density::DensityField;
use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};

const LSTSQ_TOLERANCE: f64 = 1e-10;

/// One accepted Newton step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NewtonStep {
    pub iteration: usize,
    pub residual: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual: f64,
    /// Negative entries of `m` set to zero before renormalisation.
    pub clamped: usize,
    pub clamped_mass: f64,
    /// Smallest value of `m` over interior nodes.
    pub interior_min: f64,
    /// Interior nodes where `m` fell below the positivity floor.
    pub below_floor: usize,
    pub log: Vec<NewtonStep>,
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn lstsq_sparse(jac: &SparseMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    let a = jac.to_faer()?;
    let qr = a.sp_qr().map_err(|e| Error::LinearSolver(format!("{e:?}")))?;
    let mut b = Mat::<f64>::from_fn(rhs.len(), 1, |i, _| rhs[i]);
    qr.solve_lstsq_in_place(b.as_mut());
    Ok((0..jac.ncols()).map(|i| b[(i, 0)]).collect())
}

fn lstsq_dense(jac: &SparseMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    let mut a = DMatrix::<f64>::zeros(jac.nrows(), jac.ncols());
    for &(r, c, v) in jac.entries() {
        a[(r, c)] += v;
    }
    let svd = a.svd(true, true);
    let x = svd
        .solve(&DVector::from_column_slice(rhs), 1e-12)
        .map_err(|e| Error::LinearSolver(e.to_string()))?;
    Ok(x.iter().copied().collect())
}

/// Nodes at which the bordered square solve pins `u` and `m`.
#[derive(Debug, Clone, Copy)]
struct Pins {
    u: usize,
    m: usize,
}

fn solve_2x2(a: [[f64; 2]; 2], b: [f64; 2]) -> Option<[f64; 2]> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    Some([
        (b[0] * a[1][1] - b[1] * a[0][1]) / det,
        (a[0][0] * b[1] - a[1][0] * b[0]) / det,
    ])
}

/// Exact solve of the square system formed by dropping the last
/// Fokker-Planck row, which the others determine since the weighted FP
/// rows sum to zero. The two dense normalisation rows are replaced by pins
/// for a sparse LU and restored by a rank-two Woodbury correction.
fn bordered_solve(jac: &SparseMatrix, rhs: &[f64], n: usize, pins: Pins) -> Option<Vec<f64>> {
    let size = 2 * n + 1;
    let dropped = 2 * n - 1;
    let (mass_row, gauge_row) = (2 * n, 2 * n + 1);
    let mut triplets = Vec::with_capacity(jac.entries().len());
    let mut v = [vec![0.0; size], vec![0.0; size]];
    for &(r, c, val) in jac.entries() {
        if r == mass_row {
            v[0][c] += val;
        } else if r == gauge_row {
            v[1][c] += val;
        } else if r != dropped {
            triplets.push(Triplet::new(r, c, val));
        }
    }
    let pin_cols = [n + pins.m, pins.u];
    for (slot, &col) in pin_cols.iter().enumerate() {
        triplets.push(Triplet::new(dropped + slot, col, 1.0));
        v[slot][col] -= 1.0;
    }
    let a = SparseColMat::<usize, f64>::try_new_from_triplets(size, size, &triplets).ok()?;
    let lu = a.sp_lu().ok()?;
    let mut b = Mat::<f64>::from_fn(size, 3, |i, j| match j {
        0 => {
            if i < dropped {
                rhs[i]
            } else {
                rhs[i + 1]
            }
        }
        1 => (i == dropped) as u8 as f64,
        _ => (i == dropped + 1) as u8 as f64,
    });
    lu.solve_in_place(b.as_mut());
    let dot = |row: &[f64], col: usize| (0..size).map(|i| row[i] * b[(i, col)]).sum::<f64>();
    let cap = [
        [1.0 + dot(&v[0], 1), dot(&v[0], 2)],
        [dot(&v[1], 1), 1.0 + dot(&v[1], 2)],
    ];
    let coef = solve_2x2(cap, [dot(&v[0], 0), dot(&v[1], 0)])?;
    Some((0..size).map(|i| b[(i, 0)] - coef[0] * b[(i, 1)] - coef[1] * b[(i, 2)]).collect())
}

/// Least-squares solution of `J x = rhs`. The bordered solve is accepted
/// when its defect is below `LSTSQ_TOLERANCE · ‖rhs‖ + noise`.
fn lstsq(jac: &SparseMatrix, rhs: &[f64], n: usize, pins: Pins, noise: f64) -> Result<Vec<f64>> {
    let rhs_norm = norm2(rhs);
    if let Some(x) = bordered_solve(jac, rhs, n, pins) {
        let defect: Vec<f64> = jac.mul_vec(&x).iter().zip(rhs).map(|(a, b)| a - b).collect();
        if x.iter().all(|v| v.is_finite()) && norm2(&defect) <= LSTSQ_TOLERANCE * rhs_norm + noise {
            return Ok(x);
        }
    }
    match lstsq_sparse(jac, rhs) {
        Ok(x) if x.iter().all(|v| v.is_finite()) => Ok(x),
        _ => {
            let x = lstsq_dense(jac, rhs)?;
            if x.iter().all(|v| v.is_finite()) {
                Ok(x)
            } else {
                Err(Error::LinearSolver("non-finite least-squares step".into()))
            }
        }
    }
}

fn write_log(path: &Path, log: &[NewtonStep]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for step in log {
        w.serialize(step)?;
    }
    w.flush()?;
    Ok(())
}

fn check_inputs(initial: &PopulationSolution, cost: &ScalarField, ham: &HamiltonianSpec, grid: &Grid) -> Result<()> {
    for len in [initial.u.values().len(), initial.m.values().len(), cost.values().len()] {
        if len != grid.len() {
            return Err(Error::FieldSize {
                expected: grid.len(),
                got: len,
            });
        }
    }
    if let Some(node) = cost.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { node });
    }
    ham.check_grid(grid)
}

/// Damped Newton on the `(2N+2) × (2N+1)` system, each step a linear
/// least-squares solve, with backtracking on the residual 2-norm.
pub fn newton_least_squares(
    initial: &PopulationSolution,
    cost: &ScalarField,
    ham: &HamiltonianSpec,
    grid: &Grid,
    config: &NewtonConfig,
) -> Result<PopulationSolution> {
    config.validate()?;
    check_inputs(initial, cost, ham, grid)?;
    let n = grid.len();
    let st = Stencil::new(grid);
    let eps = config.epsilon;
    let f = cost.values();
    let target = config.residual_tolerance * (1.0 + f.iter().fold(0.0f64, |a, v| a.max(v.abs())));

    // m is pinned where the cost is smallest, near the mode of the solution
    let pins = Pins {
        u: 0,
        m: (0..n).min_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap_or(0),
    };
    let mut x: Vec<f64> = initial.u.values().iter().chain(initial.m.values()).copied().collect();
    x.push(initial.lambda);
    let residual = |x: &[f64]| system_residual_with(&st, &x[..n], &x[n..2 * n], x[2 * n], f, ham, eps);

    let mut res = residual(&x);
    let mut norm = norm2(&res);
    let mut log = vec![NewtonStep {
        iteration: 0,
        residual: norm,
        step: 0.0,
    }];
    let mut iterations = 0;
    while !(norm < target) {
        if !norm.is_finite() {
            return Err(Error::NonFinite { node: n });
        }
        if iterations == config.max_iterations {
            if let Some(path) = &config.log_path {
                write_log(path, &log)?;
            }
            return Err(Error::NonConvergence {
                iterations,
                residual: norm,
            });
        }
        iterations += 1;
        let jac = jacobian_with(&st, &x[..n], &x[n..2 * n], ham, eps);
        let rhs: Vec<f64> = res.iter().map(|r| -r).collect();
        let dx = lstsq(&jac, &rhs, n, pins, 1e-4 * target)?;

        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + t * b).collect();
            let trial_res = residual(&trial);
            let trial_norm = norm2(&trial_res);
            if trial_norm <= (1.0 - config.armijo * t) * norm {
                x = trial;
                res = trial_res;
                norm = trial_norm;
                break;
            }
            t *= config.contraction;
            if t < config.min_step {
                if let Some(path) = &config.log_path {
                    write_log(path, &log)?;
                }
                return Err(Error::Stagnation {
                    iterations,
                    residual: norm,
                });
            }
        }
        log.push(NewtonStep {
            iteration: iterations,
            residual: norm,
            step: t,
        });
    }
    if let Some(path) = &config.log_path {
        write_log(path, &log)?;
    }
    finish(grid, x, iterations, norm, log, config)
}

fn finish(
    grid: &Grid,
    x: Vec<f64>,
    iterations: usize,
    residual: f64,
    log: Vec<NewtonStep>,
    config: &NewtonConfig,
) -> Result<PopulationSolution> {
    let n = grid.len();
    let lambda = x[2 * n];
    let mut u = x[..n].to_vec();
    let shift = grid.integrate(&u) / grid.volume();
    u.iter_mut().for_each(|v| *v -= shift);

    let mut m = x[n..2 * n].to_vec();
    let mut clamped = 0;
    let mut clamped_mass = 0.0;
    for (i, v) in m.iter_mut().enumerate() {
        if *v < 0.0 {
            clamped += 1;
            clamped_mass -= grid.weight(i) * *v;
            *v = 0.0;
        }
    }
    let interior: Vec<f64> = (0..n).filter(|&i| !grid.is_boundary(i)).map(|i| m[i]).collect();
    let interior_min = interior.iter().copied().fold(f64::INFINITY, f64::min);
    let below_floor = interior.iter().filter(|&&v| v < config.positivity_floor).count();

    Ok(PopulationSolution {
        u: ScalarField::new(*grid, u)?,
        lambda,
        m: DensityField::normalized(*grid, m)?,
        report: SolveReport {
            iterations,
            residual,
            clamped,
            clamped_mass,
            interior_min,
            below_floor,
            log,
        },
    })
}

/// Solves one population from a warm start, or from `u ≡ 0`, uniform `m`,
/// `λ` = mean of `F` when none is given.
///
/// For `r < 2` the Hessian of `|p|^r` blows up at `p = 0`, so a cold start
/// first solves the `r = 2` problem and continues from there.
pub fn solve_population(
    cost: &ScalarField,
    ham: &HamiltonianSpec,
    grid: &Grid,
    config: &NewtonConfig,
    warm_start: Option<&PopulationSolution>,
) -> Result<PopulationSolution> {
    if let Some(ws) = warm_start {
        return newton_least_squares(ws, cost, ham, grid, config);
    }
    let guess = PopulationSolution::initial_guess(cost);
    if ham.exponent < 2.0 {
        let quadratic = HamiltonianSpec {
            exponent: 2.0,
            ..ham.clone()
        };
        if let Ok(start) = newton_least_squares(&guess, cost, &quadratic, grid, config) {
            return newton_least_squares(&start, cost, ham, grid, config);
        }
    }
    newton_least_squares(&guess, cost, ham, grid, config)
}
