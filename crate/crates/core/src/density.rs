//! Data densities `f ≥ 0` with unit mass on a grid.

use std::ops::Deref;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};
use crate::io::GreyImage;

/// Number of grey levels, and of grid nodes for image densities.
pub const GREY_LEVELS: usize = 256;

/// Nonnegative field with unit quadrature mass.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField(ScalarField);

impl DensityField {
    /// Normalises nonnegative nodal values to unit mass.
    pub fn normalized(grid: Grid, values: Vec<f64>) -> Result<Self> {
        let field = ScalarField::new(grid, values)?;
        if let Some((node, &value)) = field.values().iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(Error::NegativeSample { node, value });
        }
        let mass = field.integrate();
        if mass <= 0.0 || !mass.is_finite() {
            return Err(Error::ZeroMass);
        }
        let values = field.into_values().into_iter().map(|v| v / mass).collect();
        Ok(DensityField(ScalarField::new(grid, values)?))
    }

    /// Uniform density `1 / |Ω|`.
    pub fn uniform(grid: Grid) -> Self {
        DensityField(ScalarField::constant(grid, 1.0 / grid.volume()))
    }

    pub fn field(&self) -> &ScalarField {
        &self.0
    }

    pub fn into_field(self) -> ScalarField {
        self.0
    }
}

impl Deref for DensityField {
    type Target = ScalarField;

    fn deref(&self) -> &ScalarField {
        &self.0
    }
}

/// A finite data set in `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    dim: usize,
    coords: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize, points: &[Vec<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point set"));
        }
        let mut coords = Vec::with_capacity(points.len() * dim);
        for (index, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::PointDimension {
                    index,
                    expected: dim,
                    got: p.len(),
                });
            }
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::Parse {
                    line: index + 1,
                    message: "non-finite coordinate".into(),
                });
            }
            coords.extend_from_slice(p);
        }
        Ok(PointSet { dim, coords })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }
}

/// Histogram (nearest node) or Gaussian-kernel density of a point set.
pub fn density_from_points(points: &PointSet, grid: &Grid, bandwidth: Option<f64>) -> Result<DensityField> {
    if points.is_empty() {
        return Err(Error::Empty("point set"));
    }
    if points.dim() != grid.dim() {
        return Err(Error::PointDimension {
            index: 0,
            expected: grid.dim(),
            got: points.dim(),
        });
    }
    if let Some(index) = points.iter().position(|p| !grid.contains(p)) {
        return Err(Error::PointOutOfBounds { index });
    }
    let mut values = vec![0.0; grid.len()];
    match bandwidth {
        None => {
            for p in points.iter() {
                // contains() was checked above
                values[grid.nearest_node(p).unwrap()] += 1.0;
            }
            // each node stands for its quadrature cell
            for (i, v) in values.iter_mut().enumerate() {
                *v /= grid.weight(i);
            }
        }
        Some(b) => {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {b}")));
            }
            let inv = 1.0 / (2.0 * b * b);
            for (i, v) in values.iter_mut().enumerate() {
                let x = grid.point(i);
                *v = points
                    .iter()
                    .map(|p| {
                        let d2: f64 = p.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
                        (-d2 * inv).exp()
                    })
                    .sum();
            }
        }
    }
    DensityField::normalized(*grid, values)
}

/// Grey-level histogram on `[0, 1]` with one node per level `j / 255`.
pub fn density_from_grey_image(image: &GreyImage) -> Result<DensityField> {
    if image.pixels().is_empty() {
        return Err(Error::Empty("image"));
    }
    let grid = Grid::unit_interval(GREY_LEVELS)?;
    let mut counts = vec![0.0; GREY_LEVELS];
    for &p in image.pixels() {
        counts[p as usize] += 1.0;
    }
    DensityField::normalized(grid, counts)
}

/// Pointwise evaluation of a nonnegative profile, normalised.
pub fn density_from_function(grid: &Grid, sampler: impl Fn(&[f64]) -> f64) -> Result<DensityField> {
    let values = (0..grid.len())
        .map(|i| sampler(&grid.point(i)[..grid.dim()]))
        .collect();
    DensityField::normalized(*grid, values)
}

/// Three plateaux of different widths and heights on `[0, 1]`.
pub fn plateau_profile(x: f64) -> f64 {
    if (0.1..=0.3).contains(&x) {
        1.0
    } else if (0.45..=0.55).contains(&x) {
        3.0
    } else if (0.7..=0.9).contains(&x) {
        2.0
    } else {
        0.0
    }
}

/// Oscillatory profile on `[0, 1]`: `t sin(4πt)` on `t = 2x ∈ [0, 2]`,
/// clipped at zero. Four humps of increasing height.
pub fn oscillatory_profile(x: f64) -> f64 {
    let t = 2.0 * x;
    (t * (4.0 * std::f64::consts::PI * t).sin()).max(0.0)
}

/// Built-in one-dimensional densities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinDensity {
    Plateaux,
    Oscillatory,
}

impl BuiltinDensity {
    pub fn build(self, grid: &Grid) -> Result<DensityField> {
        if grid.dim() != 1 {
            return Err(Error::InvalidConfig("built-in profiles are one-dimensional".into()));
        }
        match self {
            BuiltinDensity::Plateaux => density_from_function(grid, |x| plateau_profile(x[0])),
            BuiltinDensity::Oscillatory => density_from_function(grid, |x| oscillatory_profile(x[0])),
        }
    }
}

/// One isotropic Gaussian blob of a synthetic 2-D data set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center: [f64; 2],
    pub sigma: f64,
    pub count: usize,
}

/// Head and two ears: three separated blobs inside `[0, 1]²`.
pub const BLOBS3: [Blob; 3] = [
    Blob {
        center: [0.5, 0.38],
        sigma: 0.08,
        count: 600,
    },
    Blob {
        center: [0.22, 0.75],
        sigma: 0.06,
        count: 300,
    },
    Blob {
        center: [0.78, 0.75],
        sigma: 0.06,
        count: 300,
    },
];

/// Samples labelled points from `blobs`, redrawing samples that fall
/// outside the unit square.
pub fn sample_blobs(blobs: &[Blob], seed: u64) -> (PointSet, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (label, blob) in blobs.iter().enumerate() {
        let normal = Normal::new(0.0, blob.sigma).expect("positive sigma");
        let mut drawn = 0;
        while drawn < blob.count {
            let p = vec![
                blob.center[0] + normal.sample(&mut rng),
                blob.center[1] + normal.sample(&mut rng),
            ];
            if p.iter().all(|c| (0.0..=1.0).contains(c)) {
                points.push(p);
                labels.push(label);
                drawn += 1;
            }
        }
    }
    (PointSet::new(2, &points).expect("finite points"), labels)
}

/// Uniform samples on a box, used by tests and the blob generator.
pub fn sample_uniform(grid: &Grid, count: usize, seed: u64) -> PointSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Vec<f64>> = (0..count)
        .map(|_| {
            (0..grid.dim())
                .map(|a| rng.gen_range(grid.lower()[a]..=grid.upper()[a]))
                .collect()
        })
        .collect();
    PointSet::new(grid.dim(), &pts).expect("finite points")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn line(n: usize) -> Grid {
        Grid::unit_interval(n).unwrap()
    }

    #[test]
    fn two_points_tie_break_low() {
        let pts = PointSet::new(1, &[vec![0.25], vec![0.75]]).unwrap();
        let f = density_from_points(&pts, &line(3), None).unwrap();
        // counts (1, 1, 0) over cells of width (0.25, 0.5, 0.25)
        assert_abs_diff_eq!(f.values()[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(f.values()[1], 1.0, epsilon = 1e-14);
        assert_eq!(f.values()[2], 0.0);
        assert_abs_diff_eq!(f.integrate(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn single_point_on_node() {
        let pts = PointSet::new(1, &[vec![0.5]]).unwrap();
        let f = density_from_points(&pts, &line(11), None).unwrap();
        assert_eq!(f.values().iter().filter(|v| **v > 0.0).count(), 1);
        assert_abs_diff_eq!(f.integrate(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn uniform_samples_are_flat() {
        let g = line(11);
        let pts = sample_uniform(&g, 10_000, 7);
        let f = density_from_points(&pts, &g, None).unwrap();
        let dev = f.values().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
        assert!(dev < 0.15, "max deviation {dev}");
    }

    #[test]
    fn point_errors() {
        let g = line(5);
        let pts = PointSet::new(1, &[vec![0.5], vec![1.5]]).unwrap();
        assert!(matches!(
            density_from_points(&pts, &g, None),
            Err(Error::PointOutOfBounds { index: 1 })
        ));
        assert!(matches!(PointSet::new(1, &[]), Err(Error::Empty(_))));
        let pts = PointSet::new(2, &[vec![0.5, 0.5]]).unwrap();
        assert!(density_from_points(&pts, &g, None).is_err());
    }

    #[test]
    fn kernel_smoothing_has_unit_mass() {
        let g = Grid::unit_square(21).unwrap();
        let pts = PointSet::new(2, &[vec![0.3, 0.3], vec![0.7, 0.6]]).unwrap();
        let f = density_from_points(&pts, &g, Some(0.05)).unwrap();
        assert_abs_diff_eq!(f.integrate(), 1.0, epsilon = 1e-12);
        assert!(f.values().iter().all(|v| *v > 0.0));
        assert!(density_from_points(&pts, &g, Some(0.0)).is_err());
    }

    #[test]
    fn black_and_white_image() {
        let img = GreyImage::new(2, 2, vec![0, 0, 255, 255]).unwrap();
        let f = density_from_grey_image(&img).unwrap();
        let g = f.grid();
        let mass0 = g.weight(0) * f.values()[0];
        let mass255 = g.weight(255) * f.values()[255];
        assert_abs_diff_eq!(mass0, mass255, epsilon = 1e-14);
        assert_abs_diff_eq!(mass0 + mass255, 1.0, epsilon = 1e-12);
        assert!(f.values()[1..255].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_image_is_flat_inside() {
        let img = GreyImage::new(256, 1, (0..=255).collect()).unwrap();
        let f = density_from_grey_image(&img).unwrap();
        let v = f.values()[1];
        assert!(f.values().iter().all(|x| (x - v).abs() < 1e-12));
    }

    #[test]
    fn three_level_image_ratios() {
        let mut px = vec![40u8; 100];
        px.extend(vec![128u8; 200]);
        px.extend(vec![210u8; 100]);
        let img = GreyImage::new(400, 1, px).unwrap();
        let f = density_from_grey_image(&img).unwrap();
        let v = f.values();
        assert_abs_diff_eq!(v[128] / v[40], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[210] / v[40], 1.0, epsilon = 1e-12);
        assert_eq!(v.iter().filter(|x| **x > 0.0).count(), 3);
    }

    #[test]
    fn empty_image_rejected() {
        let img = GreyImage::new(0, 0, vec![]).unwrap();
        assert!(matches!(density_from_grey_image(&img), Err(Error::Empty(_))));
    }

    #[test]
    fn function_densities() {
        let g = line(201);
        let flat = density_from_function(&g, |_| 1.0).unwrap();
        assert!(flat.values().iter().all(|v| (v - 1.0).abs() < 1e-14));
        let plateaux = BuiltinDensity::Plateaux.build(&g).unwrap();
        assert_abs_diff_eq!(plateaux.integrate(), 1.0, epsilon = 1e-12);
        assert_eq!(plateaux.values()[0], 0.0);
        let osc = BuiltinDensity::Oscillatory.build(&g).unwrap();
        assert_abs_diff_eq!(osc.integrate(), 1.0, epsilon = 1e-12);
        assert!(osc.values().iter().all(|v| *v >= 0.0));
        assert!(matches!(density_from_function(&g, |_| 0.0), Err(Error::ZeroMass)));
        assert!(matches!(
            density_from_function(&g, |x| x[0] - 0.5),
            Err(Error::NegativeSample { node: 0, .. })
        ));
    }

    #[test]
    fn blobs_are_labelled_and_inside() {
        let (pts, labels) = sample_blobs(&BLOBS3, 3);
        assert_eq!(pts.len(), 1200);
        assert_eq!(labels.len(), 1200);
        assert!(pts.iter().all(|p| p.iter().all(|c| (0.0..=1.0).contains(c))));
        let (again, _) = sample_blobs(&BLOBS3, 3);
        assert_eq!(pts, again);
    }

    #[test]
    fn blob_separation_at_least_four_sigma() {
        for (i, a) in BLOBS3.iter().enumerate() {
            for b in &BLOBS3[i + 1..] {
                let d = ((a.center[0] - b.center[0]).powi(2) + (a.center[1] - b.center[1]).powi(2)).sqrt();
                assert!(d >= 4.0 * a.sigma.max(b.sigma));
            }
        }
    }
}
