//! Experiment configuration: a JSON document naming a scenario and its parameters.
//! Fields left out fall back to the scenario's defaults.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fokker_planck::DriftField;
use crate::grid::{Point, TorusGrid};
use crate::measure::GridMeasure;
use crate::step::SinkhornOptions;

use super::io::read_drift;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    HeatZeroCost,
    ConstantDrift,
    SineDrift,
    FrozenDriftRefinement,
    AppendixOracles,
    TailLemma,
    ModulusCheck,
    LscProbe,
    CompactnessProbe,
}

impl Scenario {
    pub const ALL: [Scenario; 9] = [
        Scenario::HeatZeroCost,
        Scenario::ConstantDrift,
        Scenario::SineDrift,
        Scenario::FrozenDriftRefinement,
        Scenario::AppendixOracles,
        Scenario::TailLemma,
        Scenario::ModulusCheck,
        Scenario::LscProbe,
        Scenario::CompactnessProbe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::HeatZeroCost => "heat-zero-cost",
            Scenario::ConstantDrift => "constant-drift",
            Scenario::SineDrift => "sine-drift",
            Scenario::FrozenDriftRefinement => "frozen-drift-refinement",
            Scenario::AppendixOracles => "appendix-oracles",
            Scenario::TailLemma => "tail-lemma",
            Scenario::ModulusCheck => "modulus-check",
            Scenario::LscProbe => "lsc-probe",
            Scenario::CompactnessProbe => "compactness-probe",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `{"kind": "constant", "a": [..]}`, `{"kind": "sine", "amplitude": [..]}` or
/// `{"kind": "table", "file": "..."}`; vectors may list one component per dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftSpec {
    Constant { a: Vec<f64> },
    Sine { amplitude: Vec<f64> },
    Table { file: PathBuf },
}

pub(crate) fn vector(name: &'static str, values: &[f64], dim: usize) -> Result<Point> {
    if values.len() != dim {
        return Err(invalid(name, format!("need {dim} components, got {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid(name, "components must be finite"));
    }
    let mut out = [0.0; 2];
    out[..dim].copy_from_slice(values);
    Ok(out)
}

impl DriftSpec {
    /// Parses a drift given inline as JSON or as the path of a JSON file.
    pub fn parse(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        let json = if trimmed.starts_with('{') {
            text.to_string()
        } else {
            fs::read_to_string(text).map_err(|source| Error::Io {
                path: PathBuf::from(text),
                source,
            })?
        };
        serde_json::from_str(&json).map_err(|source| Error::Json {
            context: "drift spec".to_string(),
            source,
        })
    }

    /// Builds the field on `grid`; table files are resolved against `base`.
    pub fn build(&self, grid: TorusGrid, base: &Path) -> Result<DriftField> {
        match self {
            DriftSpec::Constant { a } => Ok(DriftField::constant(grid, vector("a", a, grid.dim())?)),
            DriftSpec::Sine { amplitude } => Ok(DriftField::sine(grid, vector("amplitude", amplitude, grid.dim())?)),
            DriftSpec::Table { file } => {
                let field = read_drift(&base.join(file))?;
                if field.grid().dim() != grid.dim() || field.grid().n() != grid.n() {
                    return Err(Error::GridMismatch(format!(
                        "drift table is {}-dimensional with n = {}, config asks for {}-dimensional n = {}",
                        field.grid().dim(),
                        field.grid().n(),
                        grid.dim(),
                        grid.n()
                    )));
                }
                Ok(field)
            }
        }
    }
}

/// Initial measure of solver paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    Uniform,
    /// Wrapped Gaussian of standard deviation `width` around `center` (default 0.5 per axis).
    Bump {
        #[serde(default)]
        center: Option<Vec<f64>>,
        width: f64,
    },
}

impl InitialSpec {
    pub fn build(&self, grid: TorusGrid) -> Result<GridMeasure> {
        match self {
            InitialSpec::Uniform => Ok(GridMeasure::uniform(grid)),
            InitialSpec::Bump { center, width } => {
                if !(*width > 0.0 && width.is_finite()) {
                    return Err(invalid("width", format!("must be positive, got {width}")));
                }
                let c = match center {
                    Some(c) => vector("center", c, grid.dim())?,
                    None => [0.5; 2],
                };
                bump(grid, c, *width)
            }
        }
    }
}

/// Wrapped Gaussian bump sampled at cell centers.
pub fn bump(grid: TorusGrid, center: Point, width: f64) -> Result<GridMeasure> {
    let images = (8.0 * width).ceil() as i32 + 1;
    let dim = grid.dim();
    GridMeasure::from_density(grid, |x| {
        (0..dim)
            .map(|axis| {
                (-images..=images)
                    .map(|k| {
                        let d = x[axis] - center[axis] + k as f64;
                        (-0.5 * d * d / (width * width)).exp()
                    })
                    .sum::<f64>()
            })
            .product()
    })
}

fn one() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("reports")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    /// Cells per axis.
    pub n: usize,
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default)]
    pub drift: Option<DriftSpec>,
    #[serde(default)]
    pub initial: Option<InitialSpec>,
    #[serde(default)]
    pub t_span: Option<(f64, f64)>,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub h_ladder: Option<Vec<f64>>,
    #[serde(default)]
    pub eps_ladder: Option<Vec<f64>>,
    #[serde(default)]
    pub solver: SinkhornOptions,
    /// Report directory; for loaded configs a relative path is taken from the file's directory.
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Velocity-grid nodes per √h for the oracles.
    #[serde(default)]
    pub vgrid: Option<usize>,
    /// Random specs per kind (oracles) or perturbation count (lsc probe).
    #[serde(default)]
    pub samples: Option<usize>,
    /// Directory that relative file references (and, for loaded configs, `output_dir`)
    /// resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    /// Scenario defaults (see `scenarios`) with everything else left open.
    pub fn new(scenario: Scenario, n: usize) -> Self {
        Self {
            scenario,
            n,
            dim: 1,
            drift: None,
            initial: None,
            t_span: None,
            dt: None,
            h_ladder: None,
            eps_ladder: None,
            solver: SinkhornOptions::default(),
            output_dir: default_output(),
            seed: 0,
            vgrid: None,
            samples: None,
            base_dir: PathBuf::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "config".to_string(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Reads and validates a config file; relative references and the output directory
    /// resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.output_dir = config.base_dir.join(&config.output_dir);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 2 {
            return Err(Error::UnsupportedDimension(self.dim));
        }
        if self.n < 4 {
            return Err(invalid("n", format!("need at least 4 cells per axis, got {}", self.n)));
        }
        if let Some((a, b)) = self.t_span {
            if !(a.is_finite() && b.is_finite() && b > a) {
                return Err(invalid("t_span", format!("need a < b, got ({a}, {b})")));
            }
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(invalid("dt", format!("must be positive, got {dt}")));
            }
        }
        for (name, ladder) in [("h_ladder", &self.h_ladder), ("eps_ladder", &self.eps_ladder)] {
            if let Some(values) = ladder {
                if values.is_empty() {
                    return Err(invalid(name, "must not be empty"));
                }
                if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return Err(invalid(name, "entries must be positive"));
                }
            }
        }
        if self.samples == Some(0) {
            return Err(invalid("samples", "must be at least 1"));
        }
        self.solver.validate()
    }

    pub fn grid(&self) -> Result<TorusGrid> {
        TorusGrid::with_lift_radius(self.dim, self.n, 1)
    }

    pub fn drift_field(&self, grid: TorusGrid, default: DriftSpec) -> Result<DriftField> {
        self.drift.clone().unwrap_or(default).build(grid, &self.base_dir)
    }

    pub fn initial_measure(&self, grid: TorusGrid, default: InitialSpec) -> Result<GridMeasure> {
        self.initial.clone().unwrap_or(default).build(grid)
    }
}
