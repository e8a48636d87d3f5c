//! Path costs: time-integrated step costs, h-ladders and brackets of the relaxed cost.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fokker_planck::{recovery_from_fields, DriftField, DriftRecovery};
use crate::gaussian::HeatTable;
use crate::grid::{Point, TorusGrid};
use crate::measure::{GridMeasure, MeasurePath};
use crate::step::{SinkhornOptions, StepSolver};
use crate::transport::wasserstein;

/// Radius passed to the tail-moment evaluation (only the third moment is used here).
const TAIL_RADIUS: f64 = 0.5;
/// Increment ratio above which the last ladder rungs count as non-settling.
const DIVERGENCE_RATIO: f64 = 0.8;

/// Trapezoid weights for stamps 0..=last with spacing dt.
fn trapezoid(last: usize, dt: f64) -> Vec<f64> {
    (0..=last)
        .map(|i| if i == 0 || i == last { 0.5 * dt } else { dt })
        .collect()
}

fn interior_stamps(path: &MeasurePath, h: f64) -> Result<(usize, usize)> {
    let m = path.steps_for(h)?;
    if m + 1 >= path.len() {
        return Err(invalid(
            "h",
            format!(
                "path of {} frames over [{}, {}] is too short for h = {h}",
                path.len(),
                path.t0(),
                path.t_end()
            ),
        ));
    }
    Ok((m, path.len() - 1 - m))
}

/// Normalization of path energies. Step costs carry ½|v|²/h, so every energy computed here
/// is ∫∫½|X|² (`Half`); `Full` states the same quantity as ∫∫|X|².
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyConvention {
    #[default]
    Half,
    Full,
}

impl EnergyConvention {
    /// Restates an energy computed in the `Half` convention.
    pub fn express(self, half: f64) -> f64 {
        match self {
            Self::Half => half,
            Self::Full => 2.0 * half,
        }
    }
}

/// One rung of the ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub h: f64,
    /// ℰ^h over [a, b − h]: (1/h)·∫ ℰ^h(μ_t, μ_{t+h}) dt.
    #[serde(deserialize_with = "crate::nullable::deserialize")]
    pub energy: f64,
    /// ∫∫ ½|v^h|² dμ_t dt over the same interval.
    #[serde(deserialize_with = "crate::nullable::deserialize")]
    pub drift_energy: f64,
    /// Time-mean of ∫ ‖D^h − Id‖_F dμ_t.
    #[serde(deserialize_with = "crate::nullable::deserialize")]
    pub covariance_gap: f64,
    /// ∫ (1/h)∫∫ min(|v|³, 1) γ dt.
    #[serde(deserialize_with = "crate::nullable::deserialize")]
    pub third_moment: f64,
    /// Stamps whose scaling iteration did not reach tolerance.
    pub failures: usize,
}

impl Rung {
    pub fn converged(&self) -> bool {
        self.failures == 0 && self.energy.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub rungs: Vec<Rung>,
    /// Minimum energy over the three smallest converged rungs.
    #[serde(deserialize_with = "crate::nullable::deserialize")]
    pub liminf_estimate: f64,
    /// Energies keep growing without settling over the last rungs.
    pub divergent: bool,
}

impl LadderReport {
    pub fn h_values(&self) -> Vec<f64> {
        self.rungs.iter().map(|r| r.h).collect()
    }

    pub fn energies(&self) -> Vec<f64> {
        self.rungs.iter().map(|r| r.energy).collect()
    }

    pub fn drift_energy(&self) -> Vec<f64> {
        self.rungs.iter().map(|r| r.drift_energy).collect()
    }

    pub fn covariance_gap(&self) -> Vec<f64> {
        self.rungs.iter().map(|r| r.covariance_gap).collect()
    }

    pub fn third_moment(&self) -> Vec<f64> {
        self.rungs.iter().map(|r| r.third_moment).collect()
    }

    /// Smallest rung whose steps all converged.
    pub fn finest_converged(&self) -> Option<&Rung> {
        self.rungs.iter().rev().find(|r| r.converged())
    }

    /// Minimum drift energy over the same rungs as `liminf_estimate`.
    pub fn drift_liminf(&self) -> Option<f64> {
        tail_min(&self.rungs, |r| r.drift_energy)
    }
}

/// Minimum of `f` over the three smallest converged rungs.
fn tail_min(rungs: &[Rung], f: impl Fn(&Rung) -> f64) -> Option<f64> {
    rungs
        .iter()
        .rev()
        .filter(|r| r.converged())
        .take(3)
        .map(f)
        .reduce(f64::min)
}

/// Rung data plus, optionally, the forward velocities at every stamp.
pub(crate) struct RungRun {
    pub rung: Rung,
    pub velocities: Option<Vec<Vec<Point>>>,
}

pub(crate) fn run_rung(path: &MeasurePath, h: f64, opts: &SinkhornOptions, keep: bool) -> Result<RungRun> {
    let (_, last) = interior_stamps(path, h)?;
    let m = path.steps_for(h)?;
    let grid = *path.grid();
    let solver = StepSolver::new(&grid, h)?;
    let weights = trapezoid(last, path.dt());
    let frames = path.frames();
    let dim = grid.dim();
    let mut rung = Rung {
        h,
        energy: 0.0,
        drift_energy: 0.0,
        covariance_gap: 0.0,
        third_moment: 0.0,
        failures: 0,
    };
    let mut velocities = keep.then(Vec::new);
    let mut warm: Option<Vec<f64>> = None;
    for (i, &w) in weights.iter().enumerate() {
        let (mu1, mu2) = (&frames[i], &frames[i + m]);
        let res = solver.solve_from(mu1, mu2, opts, warm.as_deref())?;
        if !res.converged {
            rung.failures += 1;
        }
        rung.energy += w * res.cost / h;
        let mut kinetic = 0.0;
        let mut gap = 0.0;
        for (x, &mass) in mu1.weights().iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let v = res.velocity[x];
            kinetic += mass * 0.5 * (v[0] * v[0] + v[1] * v[1]);
            let d = res.covariance[x];
            let mut fro = 0.0;
            for a in 0..dim {
                for b in 0..dim {
                    let id = if a == b { 1.0 } else { 0.0 };
                    fro += (d[a][b] - id).powi(2);
                }
            }
            gap += mass * fro.sqrt();
        }
        rung.drift_energy += w * kinetic;
        rung.covariance_gap += w * gap;
        rung.third_moment += w * res.kernel.tail_moments(mu1, TAIL_RADIUS)?.third_moment;
        if let Some(vs) = velocities.as_mut() {
            vs.push(res.velocity.clone());
        }
        warm = Some(
            res.potentials
                .column
                .iter()
                .map(|g| if g.is_finite() { *g } else { 0.0 })
                .collect(),
        );
    }
    rung.covariance_gap /= weights.iter().sum::<f64>();
    Ok(RungRun { rung, velocities })
}

/// (1/h)·∫_a^{b−h} ℰ^h(μ_t, μ_{t+h}) dt by the trapezoid rule over the frame stamps.
pub fn step_cost_integral(path: &MeasurePath, h: f64, opts: &SinkhornOptions) -> Result<f64> {
    Ok(run_rung(path, h, opts, false)?.rung.energy)
}

/// Geometric ladder (b − a)/8, (b − a)/16, … down to 4·dt, kept on multiples of dt.
pub fn default_ladder(path: &MeasurePath) -> Vec<f64> {
    let dt = path.dt();
    let mut out = Vec::new();
    let mut h = path.span() / 8.0;
    while h >= 4.0 * dt * (1.0 - 1e-9) {
        let snapped = (h / dt).round() * dt;
        if out.last().is_none_or(|&last: &f64| snapped < last) {
            out.push(snapped);
        }
        h /= 2.0;
    }
    out
}

fn validate_ladder(path: &MeasurePath, h_list: &[f64]) -> Result<()> {
    if h_list.is_empty() {
        return Err(invalid("h_list", "ladder must not be empty"));
    }
    if h_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(invalid("h_list", "ladder must be strictly descending"));
    }
    for &h in h_list {
        interior_stamps(path, h)?;
    }
    Ok(())
}

/// Energies keep growing with increments that do not shrink.
fn diverges(energies: &[f64]) -> bool {
    let e: Vec<f64> = energies.iter().copied().filter(|v| v.is_finite()).collect();
    if e.len() < 3 {
        return false;
    }
    let k = e.len() - 1;
    let (d1, d2) = (e[k - 1] - e[k - 2], e[k] - e[k - 1]);
    d1 > 0.0 && d2 > 0.0 && d2 >= DIVERGENCE_RATIO * d1 && e[k] > 1e-3 && d2 > 0.02 * e[k]
}

fn assemble(rungs: Vec<Rung>) -> LadderReport {
    let liminf_estimate = tail_min(&rungs, |r| r.energy).unwrap_or(f64::NAN);
    let divergent = diverges(&rungs.iter().map(|r| r.energy).collect::<Vec<_>>());
    LadderReport {
        rungs,
        liminf_estimate,
        divergent,
    }
}

/// Runs every rung of a descending h-ladder.
pub fn energy_ladder(path: &MeasurePath, h_list: &[f64], opts: &SinkhornOptions) -> Result<LadderReport> {
    validate_ladder(path, h_list)?;
    let rungs = h_list
        .iter()
        .map(|&h| run_rung(path, h, opts, false).map(|r| r.rung))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(rungs))
}

/// Ladder plus the velocity fields of the finest rungs used for drift recovery.
pub(crate) fn ladder_with_velocities(
    path: &MeasurePath,
    h_list: &[f64],
    opts: &SinkhornOptions,
) -> Result<(LadderReport, Vec<(f64, Vec<Vec<Point>>)>)> {
    validate_ladder(path, h_list)?;
    let mut rungs = Vec::with_capacity(h_list.len());
    let mut fields = Vec::new();
    for (k, &h) in h_list.iter().enumerate() {
        let keep = k + crate::fokker_planck::RICHARDSON_LEVELS >= h_list.len();
        let run = run_rung(path, h, opts, keep)?;
        if let Some(v) = run.velocities {
            fields.push((h, v));
        }
        rungs.push(run.rung);
    }
    Ok((assemble(rungs), fields))
}

/// ∫_a^b ∫ ½|X|² dμ_t dt by the trapezoid rule.
pub fn path_drift_energy(path: &MeasurePath, drift: &DriftField) -> Result<f64> {
    path.grid().ensure_same(drift.grid())?;
    let weights = trapezoid(path.len() - 1, path.dt());
    let mut total = 0.0;
    for (i, frame) in path.frames().iter().enumerate() {
        let t = path.time(i);
        let e: f64 = frame
            .weights()
            .iter()
            .enumerate()
            .map(|(c, &m)| {
                let x = drift.at_cell(t, c);
                m * 0.5 * (x[0] * x[0] + x[1] * x[1])
            })
            .sum();
        total += weights[i] * e;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MollifiedBound {
    /// Energy at the smallest width.
    pub value: f64,
    pub eps: Vec<f64>,
    pub energies: Vec<f64>,
}

/// Spatial convolution with the wrapped N(0, ε·Id) cell masses.
fn spatial_smoother(grid: &TorusGrid, eps: f64) -> Result<Vec<f64>> {
    let wide = TorusGrid::new(grid.dim(), grid.n(), eps)?;
    let table = HeatTable::heat(&wide, eps)?;
    Ok((0..grid.cells()).map(|d| table.log_kernel(d).exp()).collect())
}

fn convolve(grid: &TorusGrid, kernel: &[f64], values: &[f64]) -> Vec<f64> {
    let cells = grid.cells();
    let mut out = vec![0.0; cells];
    for (x, &v) in values.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        for (y, o) in out.iter_mut().enumerate() {
            *o += v * kernel[grid.offset(x, y)];
        }
    }
    out
}

/// Row-normalized Gaussian time weights of width σ with reflection at both ends.
fn time_smoother(path: &MeasurePath, sigma: f64) -> Vec<Vec<(usize, f64)>> {
    let (a, b) = (path.t0(), path.t_end());
    let len = path.len();
    let reach = 8.0 * sigma;
    (0..len)
        .map(|i| {
            let ti = path.time(i);
            let mut row: Vec<(usize, f64)> = (0..len)
                .filter_map(|j| {
                    let tj = path.time(j);
                    let w: f64 = [tj, 2.0 * a - tj, 2.0 * b - tj]
                        .iter()
                        .map(|&s| {
                            let d = ti - s;
                            if d.abs() > reach {
                                0.0
                            } else {
                                (-0.5 * d * d / (sigma * sigma)).exp()
                            }
                        })
                        .sum();
                    (w > 0.0).then_some((j, w))
                })
                .collect();
            let total: f64 = row.iter().map(|(_, w)| w).sum();
            for (_, w) in row.iter_mut() {
                *w /= total;
            }
            row
        })
        .collect()
}

/// Energy of the mollified pair (μ^ε, E^ε) for a single width.
fn mollified_energy(path: &MeasurePath, drift_values: &[Vec<Point>], eps: f64) -> Result<f64> {
    let grid = *path.grid();
    let dim = grid.dim();
    let kernel = spatial_smoother(&grid, eps)?;
    let mut rho = Vec::with_capacity(path.len());
    let mut flux: Vec<[Vec<f64>; 2]> = Vec::with_capacity(path.len());
    for (frame, x) in path.frames().iter().zip(drift_values) {
        rho.push(convolve(&grid, &kernel, frame.weights()));
        let mut e = [Vec::new(), Vec::new()];
        for (axis, slot) in e.iter_mut().enumerate().take(dim) {
            let weighted: Vec<f64> = frame.weights().iter().zip(x).map(|(m, v)| m * v[axis]).collect();
            *slot = convolve(&grid, &kernel, &weighted);
        }
        flux.push(e);
    }
    let smoother = time_smoother(path, eps.sqrt());
    let weights = trapezoid(path.len() - 1, path.dt());
    let cells = grid.cells();
    let mut total = 0.0;
    for (i, row) in smoother.iter().enumerate() {
        let mut r = vec![0.0; cells];
        let mut e = [vec![0.0; cells], vec![0.0; cells]];
        for &(j, w) in row {
            for y in 0..cells {
                r[y] += w * rho[j][y];
                for axis in 0..dim {
                    e[axis][y] += w * flux[j][axis][y];
                }
            }
        }
        let mut frame_energy = 0.0;
        for y in 0..cells {
            if !(r[y] > 0.0) {
                return Err(Error::NonFinite("mollified density"));
            }
            let sq: f64 = (0..dim).map(|axis| e[axis][y] * e[axis][y]).sum();
            frame_energy += 0.5 * sq / r[y];
        }
        total += weights[i] * frame_energy;
    }
    Ok(total)
}

fn drift_table(path: &MeasurePath, drift: &DriftField) -> Vec<Vec<Point>> {
    (0..path.len())
        .map(|i| {
            let t = path.time(i);
            (0..path.grid().cells()).map(|c| drift.at_cell(t, c)).collect()
        })
        .collect()
}

/// Upper bound ∫∫ ½|E^ε/ρ^ε|² dρ^ε dt from space–time Gaussian mollification, taken at the
/// smallest width (the energies are all reported).
/// Without a drift, the drift is recovered from the path's default ladder.
pub fn mollified_upper_bound(
    path: &MeasurePath,
    drift: Option<&DriftField>,
    eps_list: &[f64],
    opts: &SinkhornOptions,
) -> Result<MollifiedBound> {
    if eps_list.is_empty() || eps_list.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(invalid("eps_list", "widths must be positive and nonempty"));
    }
    let recovered;
    let drift = match drift {
        Some(d) => d,
        None => {
            recovered = crate::fokker_planck::drift_recovery(path, &default_ladder(path), opts)?;
            &recovered.drift
        }
    };
    path.grid().ensure_same(drift.grid())?;
    let values = drift_table(path, drift);
    let energies = eps_list
        .iter()
        .map(|&eps| mollified_energy(path, &values, eps))
        .collect::<Result<Vec<_>>>()?;
    // Energies grow as ε decreases (Jensen), and only the ε → 0 end bounds the path itself.
    let finest = eps_list
        .iter()
        .enumerate()
        .fold(0, |best, (k, &e)| if e < eps_list[best] { k } else { best });
    Ok(MollifiedBound {
        value: energies[finest],
        eps: eps_list.to_vec(),
        energies,
    })
}

#[derive(Clone, Debug)]
pub struct Bracket {
    /// Drift energy over the liminf rungs; never above the ladder liminf.
    pub lower: f64,
    /// min(ladder liminf, mollified bound); +∞ for divergent ladders.
    pub upper: f64,
    pub ladder: LadderReport,
    pub mollified: MollifiedBound,
    /// Drift recovered from the same ladder (None for divergent ladders).
    pub recovery: Option<DriftRecovery>,
    /// False when the ladder diverges (cost-infinite path).
    pub finite: bool,
}

impl Bracket {
    /// (upper − lower)/upper.
    pub fn relative_width(&self) -> f64 {
        (self.upper - self.lower) / self.upper.abs()
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Brackets the relaxed cost between the recovered-drift energy and the best upper bound.
/// The mollified bound uses `drift` when given and the recovered drift otherwise.
pub fn relaxed_bracket(
    path: &MeasurePath,
    drift: Option<&DriftField>,
    h_list: &[f64],
    eps_list: &[f64],
    opts: &SinkhornOptions,
) -> Result<Bracket> {
    let (ladder, fields) = ladder_with_velocities(path, h_list, opts)?;
    let lower = ladder.drift_liminf().ok_or(Error::NotConverged {
            iterations: opts.max_iterations,
            residual: f64::NAN,
        })?;
    let finite = !ladder.divergent;
    let recovery = if finite {
        Some(recovery_from_fields(path, &ladder, &fields)?)
    } else {
        None
    };
    let zero = DriftField::constant(*path.grid(), [0.0; 2]);
    let mollifier = match (drift, &recovery) {
        (Some(d), _) => d,
        (None, Some(r)) => &r.drift,
        (None, None) => &zero,
    };
    let mollified = mollified_upper_bound(path, Some(mollifier), eps_list, opts)?;
    let upper = if finite {
        ladder.liminf_estimate.min(mollified.value)
    } else {
        f64::INFINITY
    };
    Ok(Bracket {
        lower,
        upper,
        ladder,
        mollified,
        recovery,
        finite,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulusReport {
    pub samples: usize,
    pub violations: usize,
    /// Largest d₂(μ_t, μ_{t+h})² − bound over the samples (≤ 0 when the bound holds).
    pub worst_excess: f64,
}

/// Checks d₂(μ_t, μ_{t+h})² ≤ 2h·(2·energy) + 2p·h + tolerance, where `energy` bounds
/// ∫∫ ½|X|² dμ dt, for lags 1, 2, 4, … frames and every `stride`-th start stamp.
pub fn modulus_check(path: &MeasurePath, energy: f64, stride: usize, tolerance: f64) -> Result<ModulusReport> {
    if stride == 0 {
        return Err(invalid("stride", "must be at least 1"));
    }
    let p = path.grid().dim() as f64;
    let frames = path.frames();
    let mut report = ModulusReport {
        samples: 0,
        violations: 0,
        worst_excess: f64::NEG_INFINITY,
    };
    let mut lag = 1;
    while lag < path.len() {
        let h = lag as f64 * path.dt();
        let bound = 2.0 * h * (2.0 * energy) + 2.0 * p * h;
        for i in (0..path.len() - lag).step_by(stride) {
            let d = wasserstein(&frames[i], &frames[i + lag], 2)?.distance;
            let excess = d * d - bound;
            report.samples += 1;
            if excess > tolerance {
                report.violations += 1;
            }
            report.worst_excess = report.worst_excess.max(excess);
        }
        lag *= 2;
    }
    Ok(report)
}

/// Uniform measure path helper used by tests and scenarios: frames repeated over a span.
pub fn constant_path(mu: &GridMeasure, t0: f64, dt: f64, steps: usize) -> Result<MeasurePath> {
    MeasurePath::new(t0, dt, vec![mu.clone(); steps + 1])
}
