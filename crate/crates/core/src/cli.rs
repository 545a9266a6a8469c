//! The `mfgem` command line: `cluster`, `quantize` and `verify`.
//!
//! Exit codes: 0 on success or convergence, 2 when the outer iteration
//! hits its cap, 1 on any error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;

use crate::baselines::{classical_em, kmeans};
use crate::density::{
    density_from_grey_image, density_from_points, sample_blobs, BuiltinDensity, DensityField, PointSet, BLOBS3,
};
use crate::emdriver::{export, initial_means, mixture_json, run_with_restarts, ClusterResult, EmConfig};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::io::{read_pgm, read_points_csv, write_pgm, write_points_csv};
use crate::mixture::argmax_at;
use crate::verify::VerifyCase;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mfgem", version, about = "Soft clustering with multi-population mean field games")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cluster a built-in density or a CSV point set.
    Cluster(ClusterArgs),
    /// Reduce a grey-level PGM image to K levels.
    Quantize(QuantizeArgs),
    /// Run a verification suite and print a pass/fail table.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityName {
    /// Three plateaux on [0, 1].
    Test1,
    /// Oscillatory profile with four humps on [0, 1].
    Test2,
    /// Three Gaussian blobs in the unit square (sampled points).
    Blobs3,
}

/// Settings shared by `cluster` and `quantize`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct EmArgs {
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub max_iterations: usize,
    /// Independent initialisations tried from consecutive seeds; the best
    /// data log-likelihood wins.
    #[arg(long, default_value_t = 1)]
    pub restarts: usize,
}

impl EmArgs {
    fn config(&self) -> EmConfig {
        EmConfig {
            k: self.k,
            epsilon: self.epsilon,
            tol: self.tol,
            max_iterations: self.max_iterations,
            seed: self.seed,
            ..EmConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ClusterArgs {
    /// Built-in data set.
    #[arg(long, value_enum, conflicts_with = "input", required_unless_present = "input")]
    pub density: Option<DensityName>,
    /// CSV point set, one point per row, optional header.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Nodes per axis (default 201 in 1-D, 51 in 2-D).
    #[arg(long)]
    pub grid: Option<usize>,
    /// Box for CSV input as lo,hi per axis (default: padded bounding box).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub bounds: Option<Vec<f64>>,
    /// Gaussian kernel bandwidth for point histograms.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Seed of the synthetic blob sample.
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
    /// Also run K-means and classical EM on the points.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub em: EmArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct QuantizeArgs {
    /// PGM image (P2 or P5, maxval 255).
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub em: EmArgs,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// gaussian-oracle, manufactured-convergence, duality, jacobian,
    /// consistency, or all.
    #[arg(long, default_value = "all")]
    pub case: String,
    #[arg(long, default_value_t = 201)]
    pub grid: usize,
}

/// Provenance written next to every output set.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest<C: Serialize> {
    pub command: String,
    pub config: C,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub timestamp: u64,
    pub version: String,
}

impl<C: Serialize> RunManifest<C> {
    pub fn new(command: &str, config: C, inputs: Vec<String>, outputs: Vec<String>, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            config,
            inputs,
            outputs,
            seed,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Cluster(a) => cmd_cluster(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::InvalidConfig(format!("{}: {io}", path.display())),
        other => other,
    }
}

fn exit_code(result: &ClusterResult) -> i32 {
    if result.converged {
        EXIT_OK
    } else {
        eprintln!("warning: iteration cap reached after {} outer iterations", result.iterations);
        EXIT_NOT_CONVERGED
    }
}

fn padded_bounds(points: &PointSet) -> Vec<(f64, f64)> {
    (0..points.dim())
        .map(|a| {
            let (lo, hi) = points
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p[a]), h.max(p[a])));
            let pad = 0.05 * (hi - lo).max(1e-9);
            (lo - pad, hi + pad)
        })
        .collect()
}

fn point_grid(points: &PointSet, args: &ClusterArgs) -> Result<Grid> {
    let d = points.dim();
    let bounds = match &args.bounds {
        Some(b) if b.len() == 2 * d => b.chunks(2).map(|c| (c[0], c[1])).collect(),
        Some(b) => {
            return Err(Error::InvalidConfig(format!(
                "--bounds needs {} values for {d}-D points, got {}",
                2 * d,
                b.len()
            )))
        }
        None => padded_bounds(points),
    };
    let n = args.grid.unwrap_or(if d == 1 { 201 } else { 51 });
    Grid::new(d, &bounds, &vec![n; d])
}

#[derive(Serialize)]
struct BaselineRecord {
    initial_means: Vec<Vec<f64>>,
    kmeans: crate::baselines::KMeansResult,
    em_alpha: Vec<f64>,
    em_means: Vec<Vec<f64>>,
    em_covariances: Vec<Vec<Vec<f64>>>,
    em_log_likelihood: Vec<f64>,
    em_iterations: usize,
    em_converged: bool,
}

fn run_baselines(points: &PointSet, init: &[DVector<f64>], em: &EmArgs, dir: &Path) -> Result<()> {
    let init: Vec<Vec<f64>> = init.iter().map(|m| m.iter().copied().collect()).collect();
    let km = kmeans(points, em.k, &init, em.max_iterations)?;
    let gmm = classical_em(points, em.k, &init, em.max_iterations, em.tol)?;
    let record = BaselineRecord {
        initial_means: init,
        kmeans: km,
        em_alpha: gmm.alpha.clone(),
        em_means: gmm.means.iter().map(|m| m.iter().copied().collect()).collect(),
        em_covariances: gmm
            .covariances
            .iter()
            .map(|c| (0..c.nrows()).map(|r| c.row(r).iter().copied().collect()).collect())
            .collect(),
        em_log_likelihood: gmm.log_likelihood,
        em_iterations: gmm.iterations,
        em_converged: gmm.converged,
    };
    fs::write(dir.join("baselines.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(())
}

fn write_assignments(result: &ClusterResult, grid: &Grid, points: Option<&PointSet>, dir: &Path) -> Result<()> {
    let gammas = &result.state.responsibilities;
    let mut w = csv::Writer::from_path(dir.join("assignments.csv"))?;
    let mut header = vec!["index".to_string(), "component".to_string()];
    header.extend((0..gammas.len()).map(|k| format!("gamma{k}")));
    w.write_record(&header)?;
    let nodes: Vec<usize> = match points {
        Some(p) => p
            .iter()
            .enumerate()
            .map(|(i, x)| grid.nearest_node(x).ok_or(Error::PointOutOfBounds { index: i }))
            .collect::<Result<_>>()?,
        None => (0..grid.len()).collect(),
    };
    for (i, &node) in nodes.iter().enumerate() {
        let mut row = vec![i.to_string(), argmax_at(gammas, node).to_string()];
        row.extend(gammas.iter().map(|g| g.values()[node].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_colors(result: &ClusterResult, grid: &Grid, dir: &Path) -> Result<()> {
    let gammas = &result.state.responsibilities;
    let mut w = csv::Writer::from_path(dir.join("colors.csv"))?;
    w.write_record(["x0", "x1", "r", "g", "b"])?;
    for i in 0..grid.len() {
        let x = grid.point(i);
        let mut row = vec![x[0].to_string(), x[1].to_string()];
        row.extend(gammas.iter().map(|g| g.values()[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_cluster(args: &ClusterArgs) -> Result<i32> {
    let config = args.em.config();
    config.validate()?;
    let (f, points): (DensityField, Option<PointSet>) = match (&args.density, &args.input) {
        (Some(DensityName::Test1), _) | (Some(DensityName::Test2), _) => {
            let grid = Grid::unit_interval(args.grid.unwrap_or(201))?;
            let builtin = if args.density == Some(DensityName::Test1) {
                BuiltinDensity::Plateaux
            } else {
                BuiltinDensity::Oscillatory
            };
            (builtin.build(&grid)?, None)
        }
        (Some(DensityName::Blobs3), _) => {
            let grid = Grid::unit_square(args.grid.unwrap_or(51))?;
            let (points, _) = sample_blobs(&BLOBS3, args.data_seed);
            (density_from_points(&points, &grid, args.bandwidth)?, Some(points))
        }
        (None, Some(path)) => {
            let points = read_points_csv(path).map_err(|e| with_path(path, e))?;
            if points.dim() > 2 {
                return Err(Error::InvalidConfig(format!("{}-D points; only 1-D and 2-D are supported", points.dim())));
            }
            let grid = point_grid(&points, args)?;
            (density_from_points(&points, &grid, args.bandwidth)?, Some(points))
        }
        (None, None) => return Err(Error::InvalidConfig("either --density or --input is required".into())),
    };
    let grid = *f.grid();
    let result = run_with_restarts(&f, &config, args.em.restarts)?;

    let dir = &args.out;
    export(&result, &f, dir)?;
    write_assignments(&result, &grid, points.as_ref(), dir)?;
    let mut outputs = vec!["mixture.json", "fields.csv", "history.csv", "assignments.csv"];
    if grid.dim() == 2 && config.k == 3 {
        write_colors(&result, &grid, dir)?;
        outputs.push("colors.csv");
    }
    if let Some(p) = &points {
        if args.density == Some(DensityName::Blobs3) {
            write_points_csv(&dir.join("points.csv"), p)?;
            outputs.push("points.csv");
        }
        if args.baseline {
            let init = initial_means(&f, config.k, config.seed)?;
            run_baselines(p, &init, &args.em, dir)?;
            outputs.push("baselines.json");
        }
    } else if args.baseline {
        eprintln!("note: --baseline needs point data; skipped for built-in 1-D densities");
    }
    outputs.push("manifest.json");
    let inputs = args.input.iter().map(|p| p.display().to_string()).collect();
    RunManifest::new(
        "cluster",
        args.clone(),
        inputs,
        outputs.into_iter().map(String::from).collect(),
        config.seed,
    )
    .write(dir)?;
    print!("{}", mixture_json(&result)? + "\n");
    Ok(exit_code(&result))
}

pub fn cmd_quantize(args: &QuantizeArgs) -> Result<i32> {
    let config = args.em.config();
    config.validate()?;
    let (image, format) = read_pgm(&args.image).map_err(|e| with_path(&args.image, e))?;
    let f = density_from_grey_image(&image)?;
    let result = run_with_restarts(&f, &config, args.em.restarts)?;
    let levels: Vec<u8> = result
        .state
        .means
        .iter()
        .map(|m| (m[0] * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let gammas = &result.state.responsibilities;
    let quantized = image.map_pixels(|p| levels[argmax_at(gammas, p as usize)]);

    let dir = &args.out;
    fs::create_dir_all(dir)?;
    write_pgm(&dir.join("quantized.pgm"), &quantized, format)?;
    fs::write(dir.join("mixture.json"), mixture_json(&result)? + "\n")?;
    RunManifest::new(
        "quantize",
        args.clone(),
        vec![args.image.display().to_string()],
        vec!["quantized.pgm".into(), "mixture.json".into(), "manifest.json".into()],
        config.seed,
    )
    .write(dir)?;
    println!("levels: {levels:?}, distinct in output: {}", quantized.distinct_levels());
    Ok(exit_code(&result))
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    let cases: Vec<VerifyCase> = if args.case == "all" {
        VerifyCase::ALL.to_vec()
    } else {
        vec![args.case.parse()?]
    };
    let mut all = true;
    for case in cases {
        let report = case.run(args.grid)?;
        println!("{report}");
        all &= report.passed();
    }
    Ok(if all { EXIT_OK } else { EXIT_ERROR })
}
