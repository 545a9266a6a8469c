//! Classical K-means and Gaussian-mixture EM on point sets.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::density::PointSet;
use crate::error::{Error, Result};
use crate::mixture::regularize_covariance;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KMeansResult {
    pub barycentres: Vec<Vec<f64>>,
    /// Cluster of each point, 0-based.
    pub assignments: Vec<usize>,
    pub objective: f64,
    /// Objective after each barycentre update.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest centre, lower index on ties.
pub fn nearest(x: &[f64], centres: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centres.iter().enumerate() {
        let d = dist2(x, c);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

fn check_init(points: &PointSet, k: usize, centres: &[Vec<f64>]) -> Result<()> {
    if k == 0 || centres.len() != k {
        return Err(Error::InvalidConfig(format!("{} initial centres for K = {k}", centres.len())));
    }
    if k > points.len() {
        return Err(Error::TooManyComponents {
            k,
            available: points.len(),
        });
    }
    if centres.iter().any(|c| c.len() != points.dim()) {
        return Err(Error::InvalidConfig("initial centre dimension differs from the data".into()));
    }
    Ok(())
}

fn objective(points: &PointSet, centres: &[Vec<f64>], assign: &[usize]) -> f64 {
    points.iter().zip(assign).map(|(p, &c)| dist2(p, &centres[c])).sum()
}

/// Lloyd iteration: assign to the nearest barycentre, move barycentres to
/// cluster means, until assignments repeat. Empty clusters keep their
/// barycentre.
pub fn kmeans(points: &PointSet, k: usize, initial: &[Vec<f64>], max_iter: usize) -> Result<KMeansResult> {
    check_init(points, k, initial)?;
    let d = points.dim();
    let mut centres = initial.to_vec();
    let mut assign: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < max_iter {
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centres)).collect();
        if next == assign {
            break;
        }
        assign = next;
        iterations += 1;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            for a in 0..d {
                sums[c][a] += p[a];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centres[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        trace.push(objective(points, &centres, &assign));
    }
    if assign.is_empty() {
        assign = points.iter().map(|p| nearest(p, &centres)).collect();
    }
    Ok(KMeansResult {
        objective: objective(points, &centres, &assign),
        barycentres: centres,
        assignments: assign,
        objective_trace: trace,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmResult {
    pub alpha: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    /// `responsibilities[i][k] = γ_k(x_i)`.
    pub responsibilities: Vec<Vec<f64>>,
    /// Mean log-likelihood per point, before each E-step and at the end.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sample_covariance(points: &PointSet) -> DMatrix<f64> {
    let d = points.dim();
    let n = points.len() as f64;
    let mean = DVector::from_fn(d, |a, _| points.iter().map(|p| p[a]).sum::<f64>() / n);
    let mut cov = DMatrix::zeros(d, d);
    for p in points.iter() {
        let dx = DVector::from_column_slice(p) - &mean;
        cov += &dx * dx.transpose();
    }
    cov / n
}

struct LogGaussian {
    mean: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    log_norm: f64,
}

impl LogGaussian {
    fn new(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let d = mean.len() as f64;
        let chol = cov.clone().cholesky().ok_or(Error::SingularCovariance)?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(LogGaussian {
            mean: mean.clone(),
            chol,
            log_norm: -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det),
        })
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let dx = DVector::from_column_slice(x) - &self.mean;
        self.log_norm - 0.5 * dx.dot(&self.chol.solve(&dx))
    }
}

/// Responsibilities and mean log-likelihood of the current parameters.
fn e_step(
    points: &PointSet,
    alpha: &[f64],
    means: &[DVector<f64>],
    covs: &[DMatrix<f64>],
) -> Result<(Vec<Vec<f64>>, f64)> {
    let comps = means
        .iter()
        .zip(covs)
        .map(|(m, c)| LogGaussian::new(m, c))
        .collect::<Result<Vec<_>>>()?;
    let mut ll = 0.0;
    let resp = points
        .iter()
        .map(|p| {
            let logs: Vec<f64> = comps
                .iter()
                .zip(alpha)
                .map(|(g, a)| if *a > 0.0 { a.ln() + g.eval(p) } else { f64::NEG_INFINITY })
                .collect();
            let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logs.iter().map(|l| (l - top).exp()).sum();
            ll += top + sum.ln();
            logs.iter().map(|l| (l - top).exp() / sum).collect()
        })
        .collect();
    Ok((resp, ll / points.len() as f64))
}

/// EM for a Gaussian mixture, starting from the given means, equal
/// weights and the sample covariance. Covariances get the same eigenvalue
/// floor as the grid mixtures. Stops when means and covariances move by
/// less than `tol`.
pub fn classical_em(
    points: &PointSet,
    k: usize,
    initial_means: &[Vec<f64>],
    max_iter: usize,
    tol: f64,
) -> Result<GmmResult> {
    check_init(points, k, initial_means)?;
    let d = points.dim();
    let mut alpha = vec![1.0 / k as f64; k];
    let mut means: Vec<DVector<f64>> = initial_means.iter().map(|m| DVector::from_column_slice(m)).collect();
    let (cov0, _) = regularize_covariance(sample_covariance(points));
    let mut covs = vec![cov0; k];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let (resp, ll) = e_step(points, &alpha, &means, &covs)?;
        trace.push(ll);
        let mut new_means = Vec::with_capacity(k);
        let mut new_covs = Vec::with_capacity(k);
        for c in 0..k {
            let nk: f64 = resp.iter().map(|r| r[c]).sum();
            alpha[c] = nk / points.len() as f64;
            if nk <= 0.0 {
                new_means.push(means[c].clone());
                new_covs.push(covs[c].clone());
                continue;
            }
            let mut mu = DVector::zeros(d);
            for (p, r) in points.iter().zip(&resp) {
                mu += DVector::from_column_slice(p) * r[c];
            }
            mu /= nk;
            let mut cov = DMatrix::zeros(d, d);
            for (p, r) in points.iter().zip(&resp) {
                let dx = DVector::from_column_slice(p) - &mu;
                cov += &dx * dx.transpose() * r[c];
            }
            let (cov, _) = regularize_covariance(cov / nk);
            new_means.push(mu);
            new_covs.push(cov);
        }
        let dmu = means.iter().zip(&new_means).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        let dcov = covs
            .iter()
            .zip(&new_covs)
            .flat_map(|(a, b)| (a - b).iter().map(|v| v.abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        means = new_means;
        covs = new_covs;
        if dmu < tol && dcov < tol {
            converged = true;
            break;
        }
    }
    let (responsibilities, ll) = e_step(points, &alpha, &means, &covs)?;
    trace.push(ll);
    Ok(GmmResult {
        alpha,
        means,
        covariances: covs,
        responsibilities,
        log_likelihood: trace,
        iterations,
        converged,
    })
}
