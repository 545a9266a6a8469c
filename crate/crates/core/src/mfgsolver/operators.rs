//! Finite-difference residuals of one population's stationary system and
//! their exact Jacobian.
//!
//! Stencils: second-order centred Laplacian and centred gradient, with
//! homogeneous Neumann conditions imposed by reflecting ghost nodes. The
//! Fokker-Planck transport term is the discrete adjoint of the linearised
//! Hamiltonian term with respect to the quadrature inner product:
//!
//! ```text
//! FP(m)_i = ε (Δ_h m)_i - (1/w_i) Σ_j A_ji w_j m_j,   A = ∂/∂u [R |D_h u|^r]
//! ```
//!
//! Since `A 1 = 0`, the weighted sum of FP rows vanishes identically.

use faer::sparse::{SparseColMat, Triplet};

use super::HamiltonianSpec;
use crate::error::{Error, Result};
use crate::grid::{Grid, MAX_DIM};

/// Coordinate-format sparse matrix; duplicate entries are summed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        SparseMatrix {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row, col, value));
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for &(r, c, v) in &self.entries {
            y[r] += v * x[c];
        }
        y
    }

    /// Dense row-major copy.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for &(r, c, v) in &self.entries {
            d[r][c] += v;
        }
        d
    }

    pub fn to_faer(&self) -> Result<SparseColMat<usize, f64>> {
        let triplets: Vec<_> = self.entries.iter().map(|&(r, c, v)| Triplet::new(r, c, v)).collect();
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &triplets)
            .map_err(|e| Error::LinearSolver(format!("{e:?}")))
    }
}

/// Per-grid stencil data shared by the residual and Jacobian routines.
pub(crate) struct Stencil<'a> {
    pub grid: &'a Grid,
    pub weights: Vec<f64>,
    inv_h2: [f64; MAX_DIM],
    inv_2h: [f64; MAX_DIM],
}

impl<'a> Stencil<'a> {
    pub fn new(grid: &'a Grid) -> Self {
        let mut inv_h2 = [0.0; MAX_DIM];
        let mut inv_2h = [0.0; MAX_DIM];
        for a in 0..grid.dim() {
            let h = grid.spacing()[a];
            inv_h2[a] = 1.0 / (h * h);
            inv_2h[a] = 0.5 / h;
        }
        Stencil {
            grid,
            weights: grid.weights(),
            inv_h2,
            inv_2h,
        }
    }

    fn dim(&self) -> usize {
        self.grid.dim()
    }

    fn neighbors(&self, i: usize, a: usize) -> (usize, usize) {
        (self.grid.neighbor(i, a, true), self.grid.neighbor(i, a, false))
    }

    pub fn laplacian(&self, v: &[f64], i: usize) -> f64 {
        (0..self.dim())
            .map(|a| {
                let (p, q) = self.neighbors(i, a);
                (v[p] - 2.0 * v[i] + v[q]) * self.inv_h2[a]
            })
            .sum()
    }

    pub fn gradient(&self, v: &[f64], i: usize) -> [f64; MAX_DIM] {
        let mut g = [0.0; MAX_DIM];
        for (a, ga) in g.iter_mut().enumerate().take(self.dim()) {
            let (p, q) = self.neighbors(i, a);
            *ga = (v[p] - v[q]) * self.inv_2h[a];
        }
        g
    }

    fn push_laplacian(&self, jac: &mut SparseMatrix, row: usize, col_offset: usize, i: usize, scale: f64) {
        for a in 0..self.dim() {
            let (p, q) = self.neighbors(i, a);
            let c = scale * self.inv_h2[a];
            jac.push(row, col_offset + p, c);
            jac.push(row, col_offset + q, c);
            jac.push(row, col_offset + i, -2.0 * c);
        }
    }
}

/// HJB residual `-εΔu + R|Du|^r - H0 + λ - F` at every node.
pub fn hjb_residual(u: &[f64], lambda: f64, cost: &[f64], ham: &HamiltonianSpec, grid: &Grid, epsilon: f64) -> Vec<f64> {
    let st = Stencil::new(grid);
    hjb_residual_with(&st, u, lambda, cost, ham, epsilon)
}

pub(crate) fn hjb_residual_with(
    st: &Stencil,
    u: &[f64],
    lambda: f64,
    cost: &[f64],
    ham: &HamiltonianSpec,
    epsilon: f64,
) -> Vec<f64> {
    let d = st.grid.dim();
    (0..st.grid.len())
        .map(|i| {
            let g = st.gradient(u, i);
            -epsilon * st.laplacian(u, i) + ham.value(&g[..d]) - ham.offset_at(i) + lambda - cost[i]
        })
        .collect()
}

/// Fokker-Planck residual `εΔm + div(m D_pH(Du))` with no-flux boundary,
/// assembled as the discrete adjoint of the HJB transport.
pub fn fp_residual(m: &[f64], u: &[f64], ham: &HamiltonianSpec, grid: &Grid, epsilon: f64) -> Vec<f64> {
    let st = Stencil::new(grid);
    fp_residual_with(&st, m, u, ham, epsilon)
}

pub(crate) fn fp_residual_with(st: &Stencil, m: &[f64], u: &[f64], ham: &HamiltonianSpec, epsilon: f64) -> Vec<f64> {
    let d = st.grid.dim();
    let n = st.grid.len();
    let mut res: Vec<f64> = (0..n).map(|i| epsilon * st.laplacian(m, i)).collect();
    for j in 0..n {
        let g = st.gradient(u, j);
        let p = ham.momentum(&g[..d]);
        let mass = st.weights[j] * m[j];
        for a in 0..d {
            let (fwd, bwd) = st.neighbors(j, a);
            let c = mass * p[a] * st.inv_2h[a];
            res[fwd] -= c / st.weights[fwd];
            res[bwd] += c / st.weights[bwd];
        }
    }
    res
}

/// `A = ∂/∂u [R |D_h u|^r]`, the linearised Hamiltonian term (N × N).
pub fn hamiltonian_linearization(u: &[f64], ham: &HamiltonianSpec, grid: &Grid) -> SparseMatrix {
    let st = Stencil::new(grid);
    let d = grid.dim();
    let mut a_mat = SparseMatrix::new(grid.len(), grid.len());
    for j in 0..grid.len() {
        let p = ham.momentum(&st.gradient(u, j)[..d]);
        for a in 0..d {
            let (fwd, bwd) = st.neighbors(j, a);
            let c = p[a] * st.inv_2h[a];
            a_mat.push(j, fwd, c);
            a_mat.push(j, bwd, -c);
        }
    }
    a_mat
}

/// Number of residual rows `2N + 2` and unknowns `2N + 1` for `N` nodes.
pub fn system_shape(grid: &Grid) -> (usize, usize) {
    (2 * grid.len() + 2, 2 * grid.len() + 1)
}

/// Full residual and Jacobian of the population system.
///
/// Rows: `N` HJB, `N` FP, `∫m - 1`, `∫u`. Columns: `N` values of `u`,
/// `N` values of `m`, then `λ`.
pub fn assemble_system(
    u: &[f64],
    m: &[f64],
    lambda: f64,
    cost: &[f64],
    ham: &HamiltonianSpec,
    grid: &Grid,
    epsilon: f64,
) -> (Vec<f64>, SparseMatrix) {
    let st = Stencil::new(grid);
    let residual = system_residual_with(&st, u, m, lambda, cost, ham, epsilon);
    (residual, jacobian_with(&st, u, m, ham, epsilon))
}

pub(crate) fn system_residual_with(
    st: &Stencil,
    u: &[f64],
    m: &[f64],
    lambda: f64,
    cost: &[f64],
    ham: &HamiltonianSpec,
    epsilon: f64,
) -> Vec<f64> {
    let mut r = hjb_residual_with(st, u, lambda, cost, ham, epsilon);
    r.extend(fp_residual_with(st, m, u, ham, epsilon));
    let dot = |v: &[f64]| st.weights.iter().zip(v).map(|(w, x)| w * x).sum::<f64>();
    r.push(dot(m) - 1.0);
    r.push(dot(u));
    r
}

pub(crate) fn jacobian_with(st: &Stencil, u: &[f64], m: &[f64], ham: &HamiltonianSpec, epsilon: f64) -> SparseMatrix {
    let grid = st.grid;
    let d = grid.dim();
    let n = grid.len();
    let (rows, cols) = system_shape(grid);
    let mut jac = SparseMatrix::new(rows, cols);
    let (u_col, m_col, lambda_col) = (0, n, 2 * n);
    for j in 0..n {
        let g = st.gradient(u, j);
        let p = ham.momentum(&g[..d]);
        let hess = ham.hessian(&g[..d]);

        // HJB row j: -εΔ + A, plus λ
        st.push_laplacian(&mut jac, j, u_col, j, -epsilon);
        jac.push(j, lambda_col, 1.0);
        // FP row j: εΔm
        st.push_laplacian(&mut jac, n + j, m_col, j, epsilon);

        let mass = st.weights[j] * m[j];
        for a in 0..d {
            let (fwd, bwd) = st.neighbors(j, a);
            let c = p[a] * st.inv_2h[a];
            jac.push(j, u_col + fwd, c);
            jac.push(j, u_col + bwd, -c);

            // FP transport, ∂/∂m_j of -(1/w_i) A_ji w_j m_j
            jac.push(n + fwd, m_col + j, -c * st.weights[j] / st.weights[fwd]);
            jac.push(n + bwd, m_col + j, c * st.weights[j] / st.weights[bwd]);

            // FP transport, ∂/∂u through D_pH(D_h u_j)
            for b in 0..d {
                let (kf, kb) = st.neighbors(j, b);
                let hab = mass * hess[a][b] * st.inv_2h[a] * st.inv_2h[b];
                for (row, si) in [(fwd, 1.0), (bwd, -1.0)] {
                    let scale = -si / st.weights[row];
                    jac.push(n + row, u_col + kf, scale * hab);
                    jac.push(n + row, u_col + kb, -scale * hab);
                }
            }
        }

        jac.push(2 * n, m_col + j, st.weights[j]);
        jac.push(2 * n + 1, u_col + j, st.weights[j]);
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_duplicates_sum() {
        let mut s = SparseMatrix::new(2, 2);
        s.push(0, 0, 1.0);
        s.push(0, 0, 2.0);
        s.push(1, 1, 1.0);
        assert_eq!(s.to_dense(), vec![vec![3.0, 0.0], vec![0.0, 1.0]]);
        let f = s.to_faer().unwrap();
        assert_eq!(f.compute_nnz(), 2);
        assert_eq!(s.mul_vec(&[1.0, 1.0]), vec![3.0, 1.0]);
    }

    #[test]
    fn constants_cancel_in_hjb() {
        let g = Grid::unit_interval(11).unwrap();
        let ham = HamiltonianSpec::quadratic();
        let r = hjb_residual(&[0.0; 11], 2.5, &[2.5; 11], &ham, &g, 1.0);
        assert!(r.iter().all(|v| v.abs() < 1e-15));
        // F + c moves the zero-residual λ by exactly c
        let r = hjb_residual(&[0.0; 11], 3.25, &[3.25; 11], &ham, &g, 1.0);
        assert!(r.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn uniform_density_no_drift() {
        let g = Grid::unit_square(9).unwrap();
        let ham = HamiltonianSpec::quadratic();
        let r = fp_residual(&vec![1.0; g.len()], &vec![0.0; g.len()], &ham, &g, 1.0);
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn jacobian_shape_and_lambda_column() {
        let g = Grid::unit_interval(201).unwrap();
        let ham = HamiltonianSpec::quadratic();
        let n = g.len();
        let u: Vec<f64> = (0..n).map(|i| (g.coord(i, 0) - 0.3).powi(2)).collect();
        let (res, jac) = assemble_system(&u, &vec![1.0; n], 0.0, &vec![0.0; n], &ham, &g, 1.0);
        assert_eq!(res.len(), 404);
        assert_eq!((jac.nrows(), jac.ncols()), (404, 403));
        let dense = jac.to_dense();
        for (r, row) in dense.iter().enumerate() {
            assert_eq!(row[2 * n], if r < n { 1.0 } else { 0.0 });
        }
    }
}
