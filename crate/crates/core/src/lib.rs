//! Soft clustering with multi-population stationary mean field games.
//!
//! A data density `f` on a box is approximated by a mixture `m = Σ α_k m_k`.
//! Each component is the density of one population in an ergodic
//! Hamilton-Jacobi-Bellman / Fokker-Planck system whose running cost pulls
//! agents toward the component barycentre. The outer loop alternates a
//! quadrature E-step (responsibilities, weights, means, covariances) with an
//! M-step that solves the `K` independent population systems by damped
//! least-squares Newton.
//!
//! Module map:
//!
//! - [`grid`]: uniform node-centred grids and quadrature.
//! - [`density`]: data densities from points, grey images and profiles.
//! - [`mixture`]: responsibilities, moments, coupling costs, consistency.
//! - [`mfgsolver`]: discretisation and Newton solve of one population.
//! - [`emdriver`]: the outer EM iteration.
//! - [`baselines`]: classical K-means and Gaussian-mixture EM.
//! - [`io`]: CSV point sets, PGM images and result files.
//! - [`cli`]: the `mfgem` command-line surface.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cli;
pub mod density;
pub mod emdriver;
pub mod error;
pub mod grid;
pub mod io;
pub mod mfgsolver;
pub mod mixture;
pub mod verify;

pub use error::{Error, Result};
pub use grid::{Grid, ScalarField};
