//! JSON file layouts for measures, paths and tabulated drifts, and binary kernel dumps.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fokker_planck::DriftField;
use crate::grid::{Point, TorusGrid};
use crate::kernel::JumpKernel;
use crate::measure::{GridMeasure, MeasurePath};
use crate::step::StepCostResult;

/// `{"dim": 1, "n": 64, "weights": [...]}`; weights are cell masses in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureFile {
    #[serde(default = "one")]
    pub dim: usize,
    pub n: usize,
    pub weights: Vec<f64>,
}

/// `{"dim", "n", "t0", "dt", "frames": [[...], ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathFile {
    #[serde(default = "one")]
    pub dim: usize,
    pub n: usize,
    #[serde(default)]
    pub t0: f64,
    pub dt: f64,
    pub frames: Vec<Vec<f64>>,
}

/// Measure-path layout with a vector per cell per stamp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftFile {
    #[serde(default = "one")]
    pub dim: usize,
    pub n: usize,
    #[serde(default)]
    pub t0: f64,
    pub dt: f64,
    pub frames: Vec<Vec<Vec<f64>>>,
}

fn one() -> usize {
    1
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::File::create(path).and_then(|mut f| f.write_all(bytes)).map_err(io)
}

/// Grid for files: the lift window is irrelevant to storage, so the smallest one is used.
fn file_grid(dim: usize, n: usize) -> Result<TorusGrid> {
    TorusGrid::with_lift_radius(dim, n, 1)
}

pub fn read_measure(path: &Path) -> Result<GridMeasure> {
    let file: MeasureFile = read_json(path)?;
    GridMeasure::new(file_grid(file.dim, file.n)?, file.weights)
}

pub fn write_measure(path: &Path, mu: &GridMeasure) -> Result<()> {
    let file = MeasureFile {
        dim: mu.grid().dim(),
        n: mu.grid().n(),
        weights: mu.weights().to_vec(),
    };
    write_bytes(path, &super::report::to_json(&file)?)
}

pub fn read_path(path: &Path) -> Result<MeasurePath> {
    let file: PathFile = read_json(path)?;
    let grid = file_grid(file.dim, file.n)?;
    let frames = file
        .frames
        .into_iter()
        .map(|w| GridMeasure::new(grid, w))
        .collect::<Result<Vec<_>>>()?;
    MeasurePath::new(file.t0, file.dt, frames)
}

pub fn write_path(path: &Path, mu: &MeasurePath) -> Result<()> {
    write_bytes(path, &path_json(mu)?)
}

/// The path-file JSON of `mu`.
pub fn path_json(mu: &MeasurePath) -> Result<Vec<u8>> {
    let file = PathFile {
        dim: mu.grid().dim(),
        n: mu.grid().n(),
        t0: mu.t0(),
        dt: mu.dt(),
        frames: mu.frames().iter().map(|f| f.weights().to_vec()).collect(),
    };
    super::report::to_json(&file)
}

pub fn read_drift(path: &Path) -> Result<DriftField> {
    let file: DriftFile = read_json(path)?;
    let grid = file_grid(file.dim, file.n)?;
    let frames = file
        .frames
        .into_iter()
        .map(|frame| {
            frame
                .into_iter()
                .map(|v| match v.as_slice() {
                    [x] if file.dim == 1 => Ok([*x, 0.0]),
                    [x, y] if file.dim == 2 => Ok([*x, *y]),
                    _ => Err(Error::GridMismatch(format!(
                        "drift vector of length {} on a {}-dimensional grid",
                        v.len(),
                        file.dim
                    ))),
                })
                .collect::<Result<Vec<Point>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    DriftField::table(grid, file.t0, file.dt, frames)
}

/// Little-endian f64 dump of the lifted kernel, indexed [source][target][lift].
pub fn write_kernel_dump(path: &Path, kernel: &JumpKernel) -> Result<()> {
    let bytes: Vec<u8> = kernel.dense_lifted().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(path, &bytes)
}

pub fn read_kernel_dump(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() % 8 != 0 {
        return Err(Error::GridMismatch(format!(
            "kernel dump of {} bytes is not a whole number of f64 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight bytes")))
        .collect())
}

/// Per-cell kernel statistics: mean displacement and trace of the h-covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelCellSummary {
    pub mean: Vec<f64>,
    pub trace: f64,
}

/// JSON form of a step solve; vectors and matrices are cut to the grid dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
    pub marginal_error: f64,
    pub velocity: Vec<Vec<f64>>,
    pub covariance: Vec<Vec<Vec<f64>>>,
    pub kernel_summary: Vec<KernelCellSummary>,
}

impl StepSummary {
    pub fn new(result: &StepCostResult) -> Self {
        let dim = result.source.grid().dim();
        let h = result.h();
        let velocity: Vec<Vec<f64>> = result.velocity.iter().map(|v| v[..dim].to_vec()).collect();
        let covariance = result
            .covariance
            .iter()
            .map(|m| m[..dim].iter().map(|row| row[..dim].to_vec()).collect())
            .collect();
        let kernel_summary = result
            .velocity
            .iter()
            .zip(&result.covariance)
            .map(|(v, m)| KernelCellSummary {
                mean: v[..dim].iter().map(|c| c * h).collect(),
                trace: (0..dim).map(|i| m[i][i]).sum(),
            })
            .collect();
        Self {
            cost: result.cost,
            converged: result.converged,
            iterations: result.iterations,
            marginal_error: result.marginal_error,
            velocity,
            covariance,
            kernel_summary,
        }
    }
}
