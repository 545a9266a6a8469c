//! Executable checks: closed-form oracles, refinement studies and
//! algebraic identities of the discretisation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::density::{density_from_function, BuiltinDensity, DensityField};
use crate::emdriver::{run, ClusterResult, EmConfig};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::mfgsolver::{assemble_system, fp_residual, hamiltonian_linearization, hjb_residual, HamiltonianSpec};
use crate::mixture::{check_consistency, field_moments, gaussian_field, moment_match_check, responsibilities};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `value <= threshold`.
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Check {
            name: name.into(),
            value,
            threshold,
            passed: value <= threshold,
        }
    }

    /// Passes when `value >= threshold`.
    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Check {
            name: name.into(),
            value,
            threshold,
            passed: value >= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub case: String,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "case: {}", self.case)?;
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        for c in &self.checks {
            writeln!(
                f,
                "  {:<width$}  {:>12.4e}  (limit {:.4e})  {}",
                c.name,
                c.value,
                c.threshold,
                if c.passed { "PASS" } else { "FAIL" },
            )?;
        }
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyCase {
    GaussianOracle,
    ManufacturedConvergence,
    Duality,
    Jacobian,
    Consistency,
}

impl VerifyCase {
    pub const ALL: [VerifyCase; 5] = [
        VerifyCase::GaussianOracle,
        VerifyCase::ManufacturedConvergence,
        VerifyCase::Duality,
        VerifyCase::Jacobian,
        VerifyCase::Consistency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VerifyCase::GaussianOracle => "gaussian-oracle",
            VerifyCase::ManufacturedConvergence => "manufactured-convergence",
            VerifyCase::Duality => "duality",
            VerifyCase::Jacobian => "jacobian",
            VerifyCase::Consistency => "consistency",
        }
    }

    /// Runs the case on a grid with `n` nodes per axis where it applies.
    pub fn run(self, n: usize) -> Result<VerifyReport> {
        match self {
            VerifyCase::GaussianOracle => gaussian_oracle(n, GAUSSIAN_ORACLE_VARIANCE),
            VerifyCase::ManufacturedConvergence => manufactured_convergence(&[51, 101, 201, 401]),
            VerifyCase::Duality => duality(n.min(101), 0),
            VerifyCase::Jacobian => jacobian_check(n.min(41), 10, 0),
            VerifyCase::Consistency => {
                let grid = Grid::unit_interval(n)?;
                let f = BuiltinDensity::Plateaux.build(&grid)?;
                let config = EmConfig::with_k(3);
                let result = run(&f, &config)?;
                let mut report = invariant_suite(&result, &f, config.epsilon, config.tol)?;
                report.case = self.name().into();
                Ok(report)
            }
        }
    }
}

impl FromStr for VerifyCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VerifyCase::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown verification case {s:?}")))
    }
}

/// Variance of the untruncated data Gaussian in the oracle runs.
pub const GAUSSIAN_ORACLE_VARIANCE: f64 = 0.04;

/// Outcome of the single-population Gaussian run on `[0, 1]`.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    pub lambda: f64,
    pub lambda_expected: f64,
    pub l1_distance: f64,
    pub mean_gap: f64,
    pub variance_gap: f64,
    pub seconds: f64,
    pub result: ClusterResult,
    pub density: DensityField,
}

/// `f` = truncated `N(0.5, s²)` on `[0, 1]`, `K = 1`, `ε = 1`. Compares the
/// converged state with the Gaussian closed form built on the moments of
/// `f`: `λ = ε Tr(Σ_f⁻¹)` and `m = N(μ_f, ε Σ_f)` truncated.
pub fn gaussian_oracle_run(n: usize, variance: f64) -> Result<GaussianOracle> {
    let epsilon = 1.0;
    let grid = Grid::unit_interval(n)?;
    let f = density_from_function(&grid, |x| (-(x[0] - 0.5).powi(2) / (2.0 * variance)).exp())?;
    let start = Instant::now();
    let config = EmConfig {
        epsilon,
        ..EmConfig::with_k(1)
    };
    let result = run(&f, &config)?;
    let seconds = start.elapsed().as_secs_f64();
    let (_, mean_f, cov_f) = field_moments(&f);
    let t = &cov_f * epsilon;
    let t_inv = t.clone().try_inverse().ok_or(Error::SingularCovariance)?;
    let lambda_expected = epsilon * epsilon * t_inv.trace();
    let reference = gaussian_field(&grid, &mean_f, &t)?;
    let diff: Vec<f64> = result.state.components[0]
        .values()
        .iter()
        .zip(reference.values())
        .map(|(a, b)| (a - b).abs())
        .collect();
    let (mean_gap, _) = moment_match_check(&result.state, &f);
    let (_, _, cov_m) = field_moments(&crate::grid::ScalarField::new(grid, result.state.mixture_values())?);
    let variance_gap = (cov_m - &cov_f * epsilon).abs().max();
    Ok(GaussianOracle {
        lambda: result.solutions[0].lambda,
        lambda_expected,
        l1_distance: grid.integrate(&diff),
        mean_gap,
        variance_gap,
        seconds,
        result,
        density: f,
    })
}

pub fn gaussian_oracle(n: usize, variance: f64) -> Result<VerifyReport> {
    let o = gaussian_oracle_run(n, variance)?;
    Ok(VerifyReport {
        case: VerifyCase::GaussianOracle.name().into(),
        checks: vec![
            Check::at_most(
                "lambda relative error",
                (o.lambda - o.lambda_expected).abs() / o.lambda_expected,
                0.05,
            ),
            Check::at_most("L1 distance to Gaussian", o.l1_distance, 0.02),
            Check::at_most("mixture mean gap", o.mean_gap, 1e-3),
            Check::at_most("mixture variance gap", o.variance_gap, 2e-3),
            Check::at_most("runtime seconds", o.seconds, 10.0),
        ],
    })
}

/// Interior residuals of the closed form `u = (x-μ)²/(2s²)`, `λ = ε/s²`,
/// `m = N(μ, ε s²)` with `F = ½((x-μ)/s²)²`, ε = 1, on `[0, 1]`.
/// Returns `(hjb, fp)` maximum residuals over nodes at least two cells
/// from the boundary.
pub fn manufactured_residuals(n: usize) -> Result<(f64, f64)> {
    let (mu, s2, eps) = (0.5, GAUSSIAN_ORACLE_VARIANCE, 1.0);
    let grid = Grid::unit_interval(n)?;
    let x: Vec<f64> = (0..n).map(|i| grid.coord(i, 0)).collect();
    let u: Vec<f64> = x.iter().map(|x| (x - mu).powi(2) / (2.0 * s2)).collect();
    let cost: Vec<f64> = x.iter().map(|x| 0.5 * ((x - mu) / s2).powi(2)).collect();
    let var = eps * s2;
    let m: Vec<f64> = x
        .iter()
        .map(|x| (-(x - mu).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt())
        .collect();
    let ham = HamiltonianSpec::quadratic();
    let hjb = hjb_residual(&u, eps / s2, &cost, &ham, &grid, eps);
    let fp = fp_residual(&m, &u, &ham, &grid, eps);
    let interior = |r: &[f64]| r[2..n - 2].iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok((interior(&hjb), interior(&fp)))
}

/// Residuals at or below this are round-off: centred differences are exact
/// on the quadratic `u`.
const ROUND_OFF: f64 = 1e-9;

pub fn manufactured_convergence(sizes: &[usize]) -> Result<VerifyReport> {
    let start = Instant::now();
    let residuals = sizes
        .iter()
        .map(|&n| manufactured_residuals(n))
        .collect::<Result<Vec<_>>>()?;
    let mut checks = Vec::new();
    for (w, pair) in sizes.windows(2).zip(residuals.windows(2)) {
        let (h0, f0) = pair[0];
        let (h1, f1) = pair[1];
        if h0.max(h1) <= ROUND_OFF {
            checks.push(Check::at_most(format!("HJB residual N={}", w[1]), h1, ROUND_OFF));
        } else {
            checks.push(Check::at_least(format!("HJB ratio N={}->{}", w[0], w[1]), h0 / h1, 3.5));
        }
        checks.push(Check::at_least(format!("FP ratio N={}->{}", w[0], w[1]), f0 / f1, 3.5));
    }
    let (first, last) = (residuals[0].1, residuals[residuals.len() - 1].1);
    let halvings = (sizes.len() - 1) as f64;
    checks.push(Check::at_least("FP observed order", (first / last).log2() / halvings, 1.8));
    checks.push(Check::at_most("runtime seconds", start.elapsed().as_secs_f64(), 5.0));
    Ok(VerifyReport {
        case: VerifyCase::ManufacturedConvergence.name().into(),
        checks,
    })
}

fn random_field(grid: &Grid, rng: &mut ChaCha8Rng, amplitude: f64) -> Vec<f64> {
    let phases: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    (0..grid.len())
        .map(|i| {
            let x = grid.point(i);
            let smooth = (3.0 * x[0] + phases[0]).sin() + (2.0 * x[1] + phases[1]).cos() * (x[0] + phases[2]).sin();
            amplitude * (smooth + 0.3 * rng.gen_range(-1.0..1.0)) + 0.1 * phases[3]
        })
        .collect()
}

fn test_grids(n: usize) -> Result<Vec<Grid>> {
    let n2 = (n / 4).max(5);
    Ok(vec![
        Grid::unit_interval(n)?,
        Grid::new(2, &[(0.0, 1.0), (-0.5, 1.0)], &[n2, n2 + 3])?,
    ])
}

fn test_hamiltonians() -> Vec<HamiltonianSpec> {
    vec![
        HamiltonianSpec::quadratic(),
        HamiltonianSpec::new(1.3, 3.0, None).expect("valid"),
        HamiltonianSpec::new(0.7, 2.5, None).expect("valid"),
    ]
}

/// Largest defects of `w_i T_ij = -w_j A_ji` (transport block against the
/// linearised Hamiltonian term) and of `Σ_i w_i FP_i = 0`, at random
/// states on 1-D and 2-D grids.
pub fn duality_defects(n: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transpose_defect = 0.0f64;
    let mut mass_defect = 0.0f64;
    for grid in test_grids(n)? {
        let nn = grid.len();
        let w = grid.weights();
        for ham in test_hamiltonians() {
            let u = random_field(&grid, &mut rng, 2.0);
            let m: Vec<f64> = random_field(&grid, &mut rng, 0.5).iter().map(|v| 1.5 + v.sin()).collect();
            let a = hamiltonian_linearization(&u, &ham, &grid).to_dense();
            // at ε = 0 the FP m-block is the transport operator alone
            let (_, jac) = assemble_system(&u, &m, 0.0, &vec![0.0; nn], &ham, &grid, 0.0);
            let jac = jac.to_dense();
            for i in 0..nn {
                for j in 0..nn {
                    let t = jac[nn + i][nn + j];
                    let rhs = -w[j] * a[j][i];
                    let scale = (w[j] * a[j][i]).abs().max(1.0);
                    transpose_defect = transpose_defect.max((w[i] * t - rhs).abs() / scale);
                }
            }
            let fp = fp_residual(&m, &u, &ham, &grid, 1.0);
            let scale: f64 = fp.iter().zip(&w).map(|(r, w)| (r * w).abs()).sum::<f64>().max(1.0);
            mass_defect = mass_defect.max(grid.integrate(&fp).abs() / scale);
        }
    }
    Ok((transpose_defect, mass_defect))
}

pub fn duality(n: usize, seed: u64) -> Result<VerifyReport> {
    let (t, m) = duality_defects(n, seed)?;
    Ok(VerifyReport {
        case: VerifyCase::Duality.name().into(),
        checks: vec![
            Check::at_most("transpose identity (relative)", t, 1e-14),
            Check::at_most("weighted FP row sum (relative)", m, 1e-13),
        ],
    })
}

/// Worst relative error between `J d` and a central finite difference of
/// the residual along `d`, over `states` random states, grids and
/// Hamiltonians.
pub fn jacobian_error(n: usize, states: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let grids = test_grids(n)?;
    let hams = test_hamiltonians();
    for s in 0..states {
        let grid = grids[s % grids.len()];
        let ham = &hams[s % hams.len()];
        let nn = grid.len();
        let eps = rng.gen_range(0.2..1.5);
        let u = random_field(&grid, &mut rng, 1.0);
        let m: Vec<f64> = random_field(&grid, &mut rng, 0.5).iter().map(|v| 1.2 + v.sin()).collect();
        let lambda = rng.gen_range(-2.0..2.0);
        let cost = random_field(&grid, &mut rng, 3.0);
        let mut x: Vec<f64> = u.iter().chain(&m).copied().collect();
        x.push(lambda);
        let dir: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let residual = |x: &[f64]| assemble_system(&x[..nn], &x[nn..2 * nn], x[2 * nn], &cost, ham, &grid, eps).0;
        let (_, jac) = assemble_system(&u, &m, lambda, &cost, ham, &grid, eps);
        let jd = jac.mul_vec(&dir);
        let h = 1e-6;
        let plus: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a - h * b).collect();
        let (rp, rm) = (residual(&plus), residual(&minus));
        let fd: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let err: f64 = fd.iter().zip(&jd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = jd.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(err / norm);
    }
    Ok(worst)
}

pub fn jacobian_check(n: usize, states: usize, seed: u64) -> Result<VerifyReport> {
    Ok(VerifyReport {
        case: VerifyCase::Jacobian.name().into(),
        checks: vec![Check::at_most(
            format!("finite-difference error, {states} states"),
            jacobian_error(n, states, seed)?,
            1e-6,
        )],
    })
}

/// Invariants every converged result should satisfy.
pub fn invariant_suite(result: &ClusterResult, f: &DensityField, epsilon: f64, tol: f64) -> Result<VerifyReport> {
    let state = &result.state;
    let grid = f.grid();
    let resp = responsibilities(&state.alpha, &state.components)?;
    let partition = (0..grid.len())
        .map(|i| (resp.fields.iter().map(|g| g.values()[i]).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let weight_sum = (state.alpha.iter().sum::<f64>() - 1.0).abs();
    let mass = state
        .components
        .iter()
        .map(|m| (m.integrate() - 1.0).abs())
        .fold(0.0, f64::max);
    let min_m = state
        .components
        .iter()
        .flat_map(|m| m.values().iter().copied())
        .fold(f64::INFINITY, f64::min);
    let mean_u = result
        .solutions
        .iter()
        .map(|s| s.u.integrate().abs())
        .fold(0.0, f64::max);
    let consistency = check_consistency(state, f, epsilon)?;
    Ok(VerifyReport {
        case: "invariants".into(),
        checks: vec![
            Check::at_least("converged (1 = yes)", result.converged as u8 as f64, 1.0),
            Check::at_most("partition of unity", partition, 1e-10),
            Check::at_most("weight sum", weight_sum, 1e-10),
            Check::at_most("unit mass per component", mass, 1e-8),
            Check::at_least("min component value", min_m, 0.0),
            Check::at_most("integral of u", mean_u, 1e-8),
            Check::at_most("consistency residual", consistency.max_residual, 10.0 * tol),
        ],
    })
}
