//! Stationary ergodic MFG system of one population.
//!
//! Unknowns `(u, m, λ)` solve, with homogeneous Neumann conditions,
//!
//! ```text
//! -εΔu + R|Du|^r - H0 + λ = F,    εΔm + div(m D_pH(Du)) = 0,
//! ∫m = 1,    ∫u = 0.
//! ```

mod newton;
mod operators;

pub use newton::{newton_least_squares, solve_population, NewtonStep, SolveReport};
pub use operators::{
    assemble_system, fp_residual, hamiltonian_linearization, hjb_residual, system_shape, SparseMatrix,
};

use std::path::PathBuf;

use crate::density::DensityField;
use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField, MAX_DIM};

/// Floor on `|p|` when evaluating the Hessian of `|p|^r` for `r < 2`.
const MOMENTUM_FLOOR: f64 = 1e-8;

/// `H(x, p) = R |p|^r - H0(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianSpec {
    pub coefficient: f64,
    pub exponent: f64,
    pub offset: Option<ScalarField>,
}

impl Default for HamiltonianSpec {
    fn default() -> Self {
        Self::quadratic()
    }
}

impl HamiltonianSpec {
    /// `½|p|²`.
    pub fn quadratic() -> Self {
        HamiltonianSpec {
            coefficient: 0.5,
            exponent: 2.0,
            offset: None,
        }
    }

    pub fn new(coefficient: f64, exponent: f64, offset: Option<ScalarField>) -> Result<Self> {
        if !(coefficient > 0.0 && coefficient.is_finite()) {
            return Err(Error::InvalidConfig(format!("Hamiltonian coefficient must be positive, got {coefficient}")));
        }
        if !(exponent > 1.0 && exponent.is_finite()) {
            return Err(Error::InvalidConfig(format!("Hamiltonian exponent must exceed 1, got {exponent}")));
        }
        Ok(HamiltonianSpec {
            coefficient,
            exponent,
            offset,
        })
    }

    fn check_grid(&self, grid: &Grid) -> Result<()> {
        match &self.offset {
            Some(h0) if h0.values().len() != grid.len() => Err(Error::FieldSize {
                expected: grid.len(),
                got: h0.values().len(),
            }),
            _ => Ok(()),
        }
    }

    pub(crate) fn offset_at(&self, node: usize) -> f64 {
        self.offset.as_ref().map_or(0.0, |h0| h0.values()[node])
    }

    fn norm(p: &[f64]) -> f64 {
        p.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// `R |p|^r`.
    pub fn value(&self, p: &[f64]) -> f64 {
        let s: f64 = p.iter().map(|c| c * c).sum();
        if self.exponent == 2.0 {
            self.coefficient * s
        } else {
            self.coefficient * s.sqrt().powf(self.exponent)
        }
    }

    /// `D_p H = R r |p|^{r-2} p`.
    pub fn momentum(&self, p: &[f64]) -> [f64; MAX_DIM] {
        let mut out = [0.0; MAX_DIM];
        let scale = if self.exponent == 2.0 {
            2.0 * self.coefficient
        } else {
            let n = Self::norm(p);
            if n == 0.0 {
                0.0
            } else {
                self.coefficient * self.exponent * n.powf(self.exponent - 2.0)
            }
        };
        for (o, c) in out.iter_mut().zip(p) {
            *o = scale * c;
        }
        out
    }

    /// `D²_p H = R r |p|^{r-2} (I + (r-2) p̂ p̂ᵀ)`.
    pub fn hessian(&self, p: &[f64]) -> [[f64; MAX_DIM]; MAX_DIM] {
        let d = p.len();
        let mut h = [[0.0; MAX_DIM]; MAX_DIM];
        let r = self.exponent;
        if r == 2.0 {
            for (a, row) in h.iter_mut().enumerate().take(d) {
                row[a] = 2.0 * self.coefficient;
            }
            return h;
        }
        let mut n = Self::norm(p);
        if n == 0.0 && r > 2.0 {
            return h;
        }
        n = n.max(MOMENTUM_FLOOR);
        let scale = self.coefficient * r * n.powf(r - 2.0);
        for a in 0..d {
            for b in 0..d {
                let proj = p[a] * p[b] / (n * n);
                h[a][b] = scale * (if a == b { 1.0 } else { 0.0 } + (r - 2.0) * proj);
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonConfig {
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Stop once `‖res‖₂ < residual_tolerance · (1 + max|F|)`.
    pub residual_tolerance: f64,
    pub armijo: f64,
    pub contraction: f64,
    pub min_step: f64,
    /// Nodes of `m` below this after the solve are reported as degenerate.
    pub positivity_floor: f64,
    pub log_path: Option<PathBuf>,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            epsilon: 1.0,
            max_iterations: 50,
            residual_tolerance: 1e-8,
            armijo: 1e-4,
            contraction: 0.5,
            min_step: 2f64.powi(-20),
            positivity_floor: 1e-10,
            log_path: None,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(self.residual_tolerance > 0.0) || !(self.min_step > 0.0) || !(self.armijo > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.contraction > 0.0 && self.contraction < 1.0) {
            return bad("contraction must lie in (0, 1)");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        Ok(())
    }
}

/// Solution of one population system.
#[derive(Debug, Clone)]
pub struct PopulationSolution {
    pub u: ScalarField,
    pub lambda: f64,
    pub m: DensityField,
    pub report: SolveReport,
}

impl PopulationSolution {
    /// `u ≡ 0`, uniform `m`, `λ` = mean of `F`.
    pub fn initial_guess(cost: &ScalarField) -> Self {
        let grid = *cost.grid();
        PopulationSolution {
            u: ScalarField::constant(grid, 0.0),
            lambda: cost.integrate() / grid.volume(),
            m: DensityField::uniform(grid),
            report: SolveReport::default(),
        }
    }

    pub fn grid(&self) -> &Grid {
        self.u.grid()
    }
}
