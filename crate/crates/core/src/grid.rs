//! Uniform node-centred grids on boxes in one or two dimensions.
//!
//! Nodes include the boundary. Quadrature is the rectangle rule with
//! half weights on boundary nodes (one halving per boundary axis touched),
//! which integrates constants and linear functions exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    lo: [f64; MAX_DIM],
    hi: [f64; MAX_DIM],
    nodes: [usize; MAX_DIM],
    spacing: [f64; MAX_DIM],
}

impl Grid {
    /// Builds a grid from per-axis `(lo, hi)` bounds and node counts.
    ///
    /// Node ordering is lexicographic in the axis indices with the last axis
    /// varying fastest.
    pub fn new(dim: usize, bounds: &[(f64, f64)], nodes_per_axis: &[usize]) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(Error::InvalidGrid(format!("dimension {dim} not in {{1, 2}}")));
        }
        if bounds.len() != dim || nodes_per_axis.len() != dim {
            return Err(Error::InvalidGrid(format!(
                "expected {dim} bounds and node counts, got {} and {}",
                bounds.len(),
                nodes_per_axis.len()
            )));
        }
        let mut grid = Grid {
            dim,
            lo: [0.0; MAX_DIM],
            hi: [0.0; MAX_DIM],
            nodes: [1; MAX_DIM],
            spacing: [1.0; MAX_DIM],
        };
        for a in 0..dim {
            let (lo, hi) = bounds[a];
            let n = nodes_per_axis[a];
            if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
                return Err(Error::InvalidGrid(format!("degenerate bounds [{lo}, {hi}] on axis {a}")));
            }
            if n < 3 {
                return Err(Error::InvalidGrid(format!("axis {a} needs at least 3 nodes, got {n}")));
            }
            grid.lo[a] = lo;
            grid.hi[a] = hi;
            grid.nodes[a] = n;
            grid.spacing[a] = (hi - lo) / (n - 1) as f64;
        }
        Ok(grid)
    }

    /// `[0, 1]` with `n` nodes.
    pub fn unit_interval(n: usize) -> Result<Self> {
        Self::new(1, &[(0.0, 1.0)], &[n])
    }

    /// `[0, 1]²` with `n × n` nodes.
    pub fn unit_square(n: usize) -> Result<Self> {
        Self::new(2, &[(0.0, 1.0), (0.0, 1.0)], &[n, n])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Total number of nodes `N`.
    pub fn len(&self) -> usize {
        self.nodes[..self.dim].iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn nodes_per_axis(&self) -> &[usize] {
        &self.nodes[..self.dim]
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing[..self.dim]
    }

    pub fn lower(&self) -> &[f64] {
        &self.lo[..self.dim]
    }

    pub fn upper(&self) -> &[f64] {
        &self.hi[..self.dim]
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().iter().product()
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim).map(|a| self.hi[a] - self.lo[a]).product()
    }

    pub fn diameter(&self) -> f64 {
        (0..self.dim)
            .map(|a| (self.hi[a] - self.lo[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn stride(&self, axis: usize) -> usize {
        self.nodes[axis + 1..self.dim].iter().product()
    }

    /// Index of `node` along `axis`.
    pub fn axis_index(&self, node: usize, axis: usize) -> usize {
        (node / self.stride(axis)) % self.nodes[axis]
    }

    /// Flat node index from per-axis indices.
    pub fn node_index(&self, idx: &[usize]) -> usize {
        (0..self.dim).map(|a| idx[a] * self.stride(a)).sum()
    }

    pub fn coord(&self, node: usize, axis: usize) -> f64 {
        self.lo[axis] + self.axis_index(node, axis) as f64 * self.spacing[axis]
    }

    /// Coordinates of `node`; entries past `dim` are zero.
    pub fn point(&self, node: usize) -> [f64; MAX_DIM] {
        let mut p = [0.0; MAX_DIM];
        for (a, x) in p.iter_mut().enumerate().take(self.dim) {
            *x = self.coord(node, a);
        }
        p
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        (0..self.dim).any(|a| {
            let i = self.axis_index(node, a);
            i == 0 || i + 1 == self.nodes[a]
        })
    }

    /// Neighbour of `node` one step along `axis`, reflected through the
    /// boundary (ghost node `-1` maps to `1`, ghost `n` maps to `n - 2`).
    pub fn neighbor(&self, node: usize, axis: usize, forward: bool) -> usize {
        let i = self.axis_index(node, axis);
        let n = self.nodes[axis];
        let j = match (forward, i) {
            (true, i) if i + 1 == n => n - 2,
            (true, i) => i + 1,
            (false, 0) => 1,
            (false, i) => i - 1,
        };
        let s = self.stride(axis);
        node - i * s + j * s
    }

    /// Quadrature weight of `node`.
    pub fn weight(&self, node: usize) -> f64 {
        let mut w = self.cell_volume();
        for a in 0..self.dim {
            let i = self.axis_index(node, a);
            if i == 0 || i + 1 == self.nodes[a] {
                w *= 0.5;
            }
        }
        w
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.weight(i)).collect()
    }

    /// Quadrature of nodal values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        values.iter().enumerate().map(|(i, v)| self.weight(i) * v).sum()
    }

    /// Nearest node to `x`; equidistant points go to the lower index.
    /// Returns `None` outside the box.
    pub fn nearest_node(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.dim {
            return None;
        }
        let mut idx = [0usize; MAX_DIM];
        for a in 0..self.dim {
            if !(x[a] >= self.lo[a] && x[a] <= self.hi[a]) {
                return None;
            }
            let t = (x[a] - self.lo[a]) / self.spacing[a];
            let i = (t - 0.5).ceil().max(0.0) as usize;
            idx[a] = i.min(self.nodes[a] - 1);
        }
        Some(self.node_index(&idx[..self.dim]))
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim && (0..self.dim).all(|a| x[a] >= self.lo[a] && x[a] <= self.hi[a])
    }
}

/// Nodal values on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::FieldSize {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(node) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { node });
        }
        Ok(ScalarField { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        ScalarField {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(&[f64]) -> f64) -> Result<Self> {
        let values = (0..grid.len())
            .map(|i| f(&grid.point(i)[..grid.dim()]))
            .collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn integrate(&self) -> f64 {
        self.grid.integrate(&self.values)
    }
}

/// Raw (uncentred) moments of `weight · f`.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mass: f64,
    pub first: DVector<f64>,
    pub second: DMatrix<f64>,
}

/// `∫ w f`, `∫ x w f` and `∫ x xᵗ w f` by quadrature.
pub fn moment_integrals(weight: &[f64], f: &ScalarField) -> Moments {
    let grid = f.grid();
    let d = grid.dim();
    debug_assert_eq!(weight.len(), grid.len());
    let mut mass = 0.0;
    let mut first = DVector::zeros(d);
    let mut second = DMatrix::zeros(d, d);
    for (i, (&g, &fv)) in weight.iter().zip(f.values()).enumerate() {
        let q = grid.weight(i) * g * fv;
        if q == 0.0 {
            continue;
        }
        let x = grid.point(i);
        mass += q;
        for a in 0..d {
            first[a] += q * x[a];
            for b in 0..d {
                second[(a, b)] += q * x[a] * x[b];
            }
        }
    }
    Moments { mass, first, second }
}
