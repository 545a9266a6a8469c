//! Mixture state and the quantities the E-step derives from it.
//!
//! All moments use the ratio form `m_k / m` of the responsibilities, so a
//! component whose weight has collapsed to zero still has a well defined
//! barycentre and covariance.

use nalgebra::{DMatrix, DVector};

use crate::density::DensityField;
use crate::error::{Error, Result};
use crate::grid::{moment_integrals, Grid, ScalarField};

/// Eigenvalue floor for covariances; `Σ ← Σ + σ²_min I` below it.
pub const COVARIANCE_FLOOR: f64 = 1e-4;

/// Mixture values below `MIXTURE_FLOOR / |Ω|` are clamped.
pub const MIXTURE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureState {
    pub alpha: Vec<f64>,
    pub components: Vec<DensityField>,
    pub responsibilities: Vec<ScalarField>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl MixtureState {
    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn grid(&self) -> &Grid {
        self.components[0].grid()
    }

    /// `m(x) = Σ α_k m_k(x)`.
    pub fn mixture_values(&self) -> Vec<f64> {
        mixture_values(&self.alpha, &self.components)
    }
}

fn mixture_values(alpha: &[f64], components: &[DensityField]) -> Vec<f64> {
    let n = components[0].values().len();
    let mut m = vec![0.0; n];
    for (a, c) in alpha.iter().zip(components) {
        for (mi, ci) in m.iter_mut().zip(c.values()) {
            *mi += a * ci;
        }
    }
    m
}

/// Responsibilities and the number of nodes where the mixture was clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub fields: Vec<ScalarField>,
    /// Ratios `m_k / m`, equal to `γ_k / α_k` wherever `α_k > 0`.
    pub ratios: Vec<Vec<f64>>,
    pub clamped_nodes: usize,
}

/// `γ_k = α_k m_k / m`.
///
/// Where `m` falls below the floor every component value is raised to the
/// floor before dividing, so the `γ_k` still sum to one there.
pub fn responsibilities(alpha: &[f64], components: &[DensityField]) -> Result<Responsibilities> {
    if alpha.is_empty() || alpha.len() != components.len() {
        return Err(Error::InvalidConfig(format!(
            "{} weights for {} components",
            alpha.len(),
            components.len()
        )));
    }
    let grid = *components[0].grid();
    let floor = MIXTURE_FLOOR / grid.volume();
    let k = alpha.len();
    let n = grid.len();
    let mut fields = vec![vec![0.0; n]; k];
    let mut ratios = vec![vec![0.0; n]; k];
    let mut clamped_nodes = 0;
    let mut vals = vec![0.0; k];
    for i in 0..n {
        let mut m = 0.0;
        for c in 0..k {
            vals[c] = components[c].values()[i];
            m += alpha[c] * vals[c];
        }
        if !m.is_finite() {
            return Err(Error::IllConditionedMixture {
                node: i,
                reason: "non-finite mixture value".into(),
            });
        }
        if m < floor {
            clamped_nodes += 1;
            m = 0.0;
            for c in 0..k {
                vals[c] = vals[c].max(floor);
                m += alpha[c] * vals[c];
            }
            if m <= 0.0 {
                return Err(Error::IllConditionedMixture {
                    node: i,
                    reason: "all mixture weights vanish".into(),
                });
            }
        }
        for c in 0..k {
            ratios[c][i] = vals[c] / m;
            fields[c][i] = alpha[c] * vals[c] / m;
        }
    }
    let fields = fields
        .into_iter()
        .map(|v| ScalarField::new(grid, v))
        .collect::<Result<_>>()?;
    Ok(Responsibilities {
        fields,
        ratios,
        clamped_nodes,
    })
}

/// Weights, barycentres and covariances produced by an E-step.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentUpdate {
    pub alpha: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    /// Number of covariances that needed the eigenvalue floor.
    pub regularized: usize,
}

/// `α_k = ∫ γ_k f`; `μ_k` and `Σ_k` are the mean and covariance of the
/// measure `(m_k/m) f`.
pub fn update_moments(resp: &Responsibilities, f: &DensityField) -> MomentUpdate {
    let d = f.grid().dim();
    let mut update = MomentUpdate {
        alpha: Vec::new(),
        means: Vec::new(),
        covariances: Vec::new(),
        regularized: 0,
    };
    for (gamma, ratio) in resp.fields.iter().zip(&resp.ratios) {
        update.alpha.push(f.grid().integrate(
            &gamma
                .values()
                .iter()
                .zip(f.values())
                .map(|(g, fv)| g * fv)
                .collect::<Vec<_>>(),
        ));
        let mut mom = moment_integrals(ratio, f);
        if !(mom.mass > 0.0) {
            mom = moment_integrals(&vec![1.0; ratio.len()], f);
        }
        let mean = &mom.first / mom.mass;
        let cov = symmetrize(&(&mom.second / mom.mass - &mean * mean.transpose()));
        let (cov, bumped) = regularize_covariance(cov);
        if bumped {
            update.regularized += 1;
        }
        debug_assert_eq!(mean.len(), d);
        update.means.push(mean);
        update.covariances.push(cov);
    }
    update
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Adds `σ²_min I` when the smallest eigenvalue is below `σ²_min`.
pub fn regularize_covariance(cov: DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let cov = symmetrize(&cov);
    let min_eig = cov.clone().symmetric_eigen().eigenvalues.min();
    if !(min_eig >= COVARIANCE_FLOOR) {
        let n = cov.nrows();
        (cov + DMatrix::identity(n, n) * COVARIANCE_FLOOR, true)
    } else {
        (cov, false)
    }
}

fn inverse_spd(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = cov.clone().cholesky().ok_or(Error::SingularCovariance)?;
    Ok(chol.inverse())
}

/// `F_k(x) = ½ |Σ_k⁻¹ (x - μ_k)|²`.
pub fn coupling_cost(grid: &Grid, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<ScalarField> {
    let inv = inverse_spd(cov)?;
    let d = grid.dim();
    ScalarField::from_fn(*grid, |x| {
        let dx = DVector::from_fn(d, |a, _| x[a] - mean[a]);
        0.5 * (&inv * dx).norm_squared()
    })
}

/// Gaussian probability density at `x`.
pub fn gaussian_pdf(x: &[f64], mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let d = mean.len();
    let chol = cov.clone().cholesky().ok_or(Error::SingularCovariance)?;
    let det = chol.determinant();
    let dx = DVector::from_fn(d, |a, _| x[a] - mean[a]);
    let q = dx.dot(&chol.solve(&dx));
    Ok((-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powi(d as i32) * det).sqrt())
}

/// Gaussian evaluated at the nodes and renormalised to unit mass on the grid.
pub fn gaussian_field(grid: &Grid, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<DensityField> {
    let inv = inverse_spd(cov)?;
    let d = grid.dim();
    // the normalising constant cancels in the renormalisation
    let values = (0..grid.len())
        .map(|i| {
            let x = grid.point(i);
            let dx = DVector::from_fn(d, |a, _| x[a] - mean[a]);
            (-0.5 * dx.dot(&(&inv * &dx))).exp()
        })
        .collect();
    DensityField::normalized(*grid, values)
}

/// Mean and covariance of a density field by quadrature.
pub fn field_moments(m: &ScalarField) -> (f64, DVector<f64>, DMatrix<f64>) {
    let mom = moment_integrals(&vec![1.0; m.values().len()], m);
    let mean = &mom.first / mom.mass;
    let cov = &mom.second / mom.mass - &mean * mean.transpose();
    (mom.mass, mean, symmetrize(&cov))
}

/// Defects of one component in the three consistency conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentConsistency {
    pub mean: f64,
    pub covariance: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub components: Vec<ComponentConsistency>,
    pub max_residual: f64,
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Compares each component's own mean `ν_k`, covariance `T_k` and weight
/// `β_k` with the responsibility-weighted moments of the data.
///
/// The mean defect is the Euclidean distance, the covariance defect the
/// largest absolute entry of `T_k - ε Σ_k(γ)`.
pub fn check_consistency(state: &MixtureState, f: &DensityField, epsilon: f64) -> Result<ConsistencyReport> {
    let resp = responsibilities(&state.alpha, &state.components)?;
    let grid = f.grid();
    let mut components = Vec::with_capacity(state.k());
    for (c, gamma) in resp.fields.iter().enumerate() {
        let (_, nu, t) = field_moments(&state.components[c]);
        let mom = moment_integrals(gamma.values(), f);
        let beta = mom.mass;
        let (mean_gap, cov_gap) = if beta > 0.0 {
            let mu = &mom.first / beta;
            // covariance of γ f about ν
            let mut s = DMatrix::zeros(grid.dim(), grid.dim());
            for i in 0..grid.len() {
                let q = grid.weight(i) * gamma.values()[i] * f.values()[i];
                if q == 0.0 {
                    continue;
                }
                let x = grid.point(i);
                let dx = DVector::from_fn(grid.dim(), |a, _| x[a] - nu[a]);
                s += &dx * dx.transpose() * q;
            }
            s /= beta;
            ((&nu - mu).norm(), max_abs(&(&t - s * epsilon)))
        } else {
            (f64::INFINITY, f64::INFINITY)
        };
        components.push(ComponentConsistency {
            mean: mean_gap,
            covariance: cov_gap,
            weight: (state.alpha[c] - beta).abs(),
        });
    }
    let max_residual = components
        .iter()
        .flat_map(|c| [c.mean, c.covariance, c.weight])
        .fold(0.0, f64::max);
    Ok(ConsistencyReport {
        components,
        max_residual,
    })
}

/// Gaps between the mean and covariance of the mixture and those of `f`.
pub fn moment_match_check(state: &MixtureState, f: &DensityField) -> (f64, f64) {
    let grid = f.grid();
    let m = ScalarField::new(*grid, state.mixture_values()).expect("finite mixture");
    let (_, mean_m, cov_m) = field_moments(&m);
    let (_, mean_f, cov_f) = field_moments(f);
    ((mean_m - mean_f).norm(), max_abs(&(cov_m - cov_f)))
}

/// Index of the largest responsibility at the node nearest to `x`; ties go
/// to the lower index. Returns `None` when `x` is outside the grid.
pub fn hard_assign(state: &MixtureState, x: &[f64]) -> Option<usize> {
    let node = state.grid().nearest_node(x)?;
    Some(argmax_at(&state.responsibilities, node))
}

/// Largest responsibility at `node`, lower index on ties.
pub fn argmax_at(gammas: &[ScalarField], node: usize) -> usize {
    let mut best = 0;
    for (k, g) in gammas.iter().enumerate().skip(1) {
        if g.values()[node] > gammas[best].values()[node] {
            best = k;
        }
    }
    best
}

/// Builds a state from weights and component densities, recomputing the
/// responsibilities and taking means and covariances from the components.
pub fn state_from_components(alpha: Vec<f64>, components: Vec<DensityField>) -> Result<MixtureState> {
    let resp = responsibilities(&alpha, &components)?;
    let (means, covariances) = components
        .iter()
        .map(|c| {
            let (_, mu, cov) = field_moments(c);
            (mu, cov)
        })
        .unzip();
    Ok(MixtureState {
        alpha,
        components,
        responsibilities: resp.fields,
        means,
        covariances,
    })
}
