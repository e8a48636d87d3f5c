//! Reference dynamics ∂_t μ − ½Δμ + div(Xμ) = 0 on the grid.
//!
//! Space is discretized by a conservative finite-volume generator: diffusion through
//! neighbor fluxes and advection through centered face fluxes (upwinded only where the cell
//! Péclet number exceeds one). The generator has nonnegative off-diagonal rates, so its
//! exponential is a stochastic matrix; it is applied exactly by uniformization, which keeps
//! the scheme linear, positive and mass conserving for any step.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::grid::{Point, TorusGrid};
use crate::kernel::JumpKernel;
use crate::measure::{GridMeasure, MeasurePath};
use crate::path::{ladder_with_velocities, LadderReport};
use crate::step::SinkhornOptions;

/// Poisson tail dropped by the uniformization series.
const SERIES_TAIL: f64 = 1e-17;
/// Largest uniformization exponent per substep.
const MAX_RATE_STEP: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
enum DriftKind {
    Constant(Point),
    Sine(Point),
    Table {
        t0: f64,
        dt: f64,
        values: Vec<Vec<Point>>,
    },
}

/// Drift field X(t, x) with its sup-norm and spatial Lipschitz estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftField {
    grid: TorusGrid,
    kind: DriftKind,
    offset: Point,
    bound: f64,
    lipschitz: f64,
}

impl DriftField {
    /// X ≡ a.
    pub fn constant(grid: TorusGrid, a: Point) -> Self {
        let a = mask(&grid, a);
        Self {
            grid,
            kind: DriftKind::Constant(a),
            offset: [0.0; 2],
            bound: (a[0] * a[0] + a[1] * a[1]).sqrt(),
            lipschitz: 0.0,
        }
    }

    /// X_i(x) = amplitude_i·sin(2π x_i).
    pub fn sine(grid: TorusGrid, amplitude: Point) -> Self {
        let amp = mask(&grid, amplitude);
        let bound = (amp[0] * amp[0] + amp[1] * amp[1]).sqrt();
        Self {
            grid,
            kind: DriftKind::Sine(amp),
            offset: [0.0; 2],
            bound,
            lipschitz: 2.0 * PI * amp[0].abs().max(amp[1].abs()),
        }
    }

    /// Tabulated drift at cell centers for stamps t0 + k·dt, interpolated linearly in time
    /// and (periodically) in space. Bound and Lipschitz constants are estimated from the table.
    pub fn table(grid: TorusGrid, t0: f64, dt: f64, values: Vec<Vec<Point>>) -> Result<Self> {
        if values.is_empty() || !(dt > 0.0) {
            return Err(invalid("table", "need at least one stamp and a positive spacing"));
        }
        let cells = grid.cells();
        let mut bound: f64 = 0.0;
        let mut lipschitz: f64 = 0.0;
        for frame in &values {
            if frame.len() != cells {
                return Err(Error::GridMismatch(format!(
                    "drift frame with {} vectors for {} cells",
                    frame.len(),
                    cells
                )));
            }
            for (c, v) in frame.iter().enumerate() {
                if !(v[0].is_finite() && v[1].is_finite()) {
                    return Err(Error::NonFinite("tabulated drift"));
                }
                bound = bound.max((v[0] * v[0] + v[1] * v[1]).sqrt());
                let coords = grid.coords(c);
                for axis in 0..grid.dim() {
                    let mut next = coords;
                    next[axis] += 1;
                    let w = frame[grid.index(next)];
                    let diff = ((w[0] - v[0]).powi(2) + (w[1] - v[1]).powi(2)).sqrt();
                    lipschitz = lipschitz.max(diff / grid.cell_width());
                }
            }
        }
        Ok(Self {
            grid,
            kind: DriftKind::Table { t0, dt, values },
            offset: [0.0; 2],
            bound,
            lipschitz,
        })
    }

    /// X + c.
    pub fn shifted(&self, c: Point) -> Self {
        let c = mask(&self.grid, c);
        let mut out = self.clone();
        out.offset = [self.offset[0] + c[0], self.offset[1] + c[1]];
        out.bound += (c[0] * c[0] + c[1] * c[1]).sqrt();
        out
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn is_autonomous(&self) -> bool {
        !matches!(self.kind, DriftKind::Table { .. })
    }

    /// X(t, x) at an arbitrary point of ℝ^p.
    pub fn eval(&self, t: f64, x: Point) -> Point {
        let base = match &self.kind {
            DriftKind::Constant(a) => *a,
            DriftKind::Sine(amp) => [
                amp[0] * (2.0 * PI * x[0]).sin(),
                amp[1] * (2.0 * PI * x[1]).sin(),
            ],
            DriftKind::Table { t0, dt, values } => {
                let s = ((t - t0) / dt).clamp(0.0, (values.len() - 1) as f64);
                let k = (s.floor() as usize).min(values.len() - 1);
                let frac = s - k as f64;
                let a = self.interpolate(&values[k], x);
                if frac > 0.0 && k + 1 < values.len() {
                    let b = self.interpolate(&values[k + 1], x);
                    [a[0] + frac * (b[0] - a[0]), a[1] + frac * (b[1] - a[1])]
                } else {
                    a
                }
            }
        };
        [base[0] + self.offset[0], base[1] + self.offset[1]]
    }

    /// X(t, ·) at a cell center.
    pub fn at_cell(&self, t: f64, cell: usize) -> Point {
        self.eval(t, self.grid.center(cell))
    }

    /// Bilinear periodic interpolation of cell-center values.
    fn interpolate(&self, frame: &[Point], x: Point) -> Point {
        let n = self.grid.n();
        let mut base = [0usize; 2];
        let mut frac = [0.0; 2];
        for axis in 0..self.grid.dim() {
            let s = x[axis] * n as f64 - 0.5;
            let fl = s.floor();
            frac[axis] = s - fl;
            base[axis] = (fl as i64).rem_euclid(n as i64) as usize;
        }
        let mut out = [0.0; 2];
        let corners: &[[usize; 2]] = if self.grid.dim() == 1 {
            &[[0, 0], [1, 0]]
        } else {
            &[[0, 0], [1, 0], [0, 1], [1, 1]]
        };
        for c in corners {
            let mut w = 1.0;
            for axis in 0..self.grid.dim() {
                w *= if c[axis] == 1 { frac[axis] } else { 1.0 - frac[axis] };
            }
            let v = frame[self.grid.index([base[0] + c[0], base[1] + c[1]])];
            out[0] += w * v[0];
            out[1] += w * v[1];
        }
        out
    }
}

fn mask(grid: &TorusGrid, v: Point) -> Point {
    if grid.dim() == 1 {
        [v[0], 0.0]
    } else {
        v
    }
}

/// Nonnegative transition rates of the semi-discrete generator.
#[derive(Clone, Debug)]
struct Generator {
    /// (from, to, rate) for every oriented neighbor pair.
    edges: Vec<(usize, usize, f64)>,
    outflow: Vec<f64>,
    max_outflow: f64,
}

impl Generator {
    fn new(drift: &DriftField, t: f64) -> Self {
        let grid = drift.grid;
        let w = grid.cell_width();
        let diffusion = 0.5 / (w * w);
        let cells = grid.cells();
        let mut edges = Vec::with_capacity(2 * grid.dim() * cells);
        let mut outflow = vec![0.0; cells];
        for c in 0..cells {
            let coords = grid.coords(c);
            let center = grid.center(c);
            for axis in 0..grid.dim() {
                let mut next = coords;
                next[axis] += 1;
                let d = grid.index(next);
                let mut face = center;
                face[axis] += 0.5 * w;
                let x = drift.eval(t, face)[axis];
                let (up, down) = if x.abs() * w <= 1.0 {
                    (diffusion + 0.5 * x / w, diffusion - 0.5 * x / w)
                } else {
                    (diffusion + x.max(0.0) / w, diffusion + (-x).max(0.0) / w)
                };
                edges.push((c, d, up));
                edges.push((d, c, down));
                outflow[c] += up;
                outflow[d] += down;
            }
        }
        let max_outflow = outflow.iter().copied().fold(0.0, f64::max);
        Self {
            edges,
            outflow,
            max_outflow,
        }
    }

    /// m ← exp(τ·Q)ᵀ m, by uniformization with substeps of rate·τ ≤ MAX_RATE_STEP.
    fn propagate(&self, m: &mut [f64], tau: f64, scratch: &mut Vec<f64>, term: &mut Vec<f64>) {
        let lam = self.max_outflow.max(1e-300);
        let substeps = ((lam * tau) / MAX_RATE_STEP).ceil().max(1.0) as usize;
        let x = lam * tau / substeps as f64;
        let n = m.len();
        scratch.resize(n, 0.0);
        term.resize(n, 0.0);
        for _ in 0..substeps {
            // Σ_k e^{−x} x^k/k! · P^k m with P = I + Q/λ.
            let mut weight = (-x).exp();
            term.copy_from_slice(m);
            for (o, t) in m.iter_mut().zip(term.iter()) {
                *o = weight * t;
            }
            let mut k = 0usize;
            while !poisson_tail_below(weight, x, k) {
                k += 1;
                for (i, s) in scratch.iter_mut().enumerate() {
                    *s = term[i] * (1.0 - self.outflow[i] / lam);
                }
                for &(from, to, rate) in &self.edges {
                    scratch[to] += term[from] * rate / lam;
                }
                std::mem::swap(term, scratch);
                weight *= x / k as f64;
                for (o, t) in m.iter_mut().zip(term.iter()) {
                    *o += weight * t;
                }
            }
        }
    }
}

/// Whether Σ_{j>k} e^{−x}x^j/j! < SERIES_TAIL, given the k-th weight.
fn poisson_tail_below(weight: f64, x: f64, k: usize) -> bool {
    let ratio = x / (k + 2) as f64;
    (k as f64 + 1.0) > x && ratio < 1.0 && weight * x / (k + 1) as f64 / (1.0 - ratio) < SERIES_TAIL
}

fn check_stability(drift: &DriftField, dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid("dt", format!("must be positive, got {dt}")));
    }
    if drift.bound > 0.0 {
        let limit = drift.grid.cell_width() / (2.0 * drift.bound);
        if dt > limit * (1.0 + 1e-12) {
            return Err(Error::Stability { dt, limit });
        }
    }
    Ok(())
}

fn frame_count(t_span: (f64, f64), dt: f64) -> Result<usize> {
    let steps = (t_span.1 - t_span.0) / dt;
    let rounded = steps.round();
    if !(rounded >= 1.0) || (steps - rounded).abs() > 1e-9 * steps.max(1.0) {
        return Err(invalid(
            "t_span",
            format!("span {:?} is not a positive multiple of dt = {dt}", t_span),
        ));
    }
    Ok(rounded as usize)
}

/// Evolves `m` over one frame interval starting at `t`.
struct Stepper<'a> {
    drift: &'a DriftField,
    frozen: Option<Generator>,
}

impl<'a> Stepper<'a> {
    fn new(drift: &'a DriftField) -> Self {
        let frozen = drift.is_autonomous().then(|| Generator::new(drift, 0.0));
        Self { drift, frozen }
    }

    fn advance(&self, m: &mut [f64], t: f64, dt: f64, scratch: &mut Vec<f64>, term: &mut Vec<f64>) {
        match &self.frozen {
            Some(g) => g.propagate(m, dt, scratch, term),
            None => Generator::new(self.drift, t + 0.5 * dt).propagate(m, dt, scratch, term),
        }
    }
}

/// Solves the Fokker–Planck equation, returning frames every `dt` over `t_span`.
pub fn fp_solve(mu0: &GridMeasure, drift: &DriftField, t_span: (f64, f64), dt: f64) -> Result<MeasurePath> {
    drift.grid.ensure_same(mu0.grid())?;
    check_stability(drift, dt)?;
    let steps = frame_count(t_span, dt)?;
    let stepper = Stepper::new(drift);
    let mut m = mu0.weights().to_vec();
    let mut frames = Vec::with_capacity(steps + 1);
    frames.push(mu0.clone());
    let (mut scratch, mut term) = (Vec::new(), Vec::new());
    for k in 0..steps {
        stepper.advance(&mut m, t_span.0 + k as f64 * dt, dt, &mut scratch, &mut term);
        frames.push(finish_frame(*mu0.grid(), &mut m)?);
    }
    MeasurePath::new(t_span.0, dt, frames)
}

fn finish_frame(grid: TorusGrid, m: &mut [f64]) -> Result<GridMeasure> {
    let mut total = 0.0;
    for v in m.iter_mut() {
        if v.is_nan() {
            return Err(Error::NonFinite("Fokker–Planck frame"));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
        total += *v;
    }
    if (total - 1.0).abs() > 1e-13 {
        for v in m.iter_mut() {
            *v /= total;
        }
    }
    GridMeasure::new(grid, m.to_vec())
}

/// Cell-to-cell transition probabilities between two times.
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticKernel {
    grid: TorusGrid,
    matrix: Vec<f64>,
    s: f64,
    t: f64,
}

impl StochasticKernel {
    pub fn new(grid: TorusGrid, matrix: Vec<f64>, s: f64, t: f64) -> Result<Self> {
        let cells = grid.cells();
        if matrix.len() != cells * cells {
            return Err(Error::GridMismatch(format!(
                "matrix of length {} for {} cells",
                matrix.len(),
                cells
            )));
        }
        for (x, row) in matrix.chunks(cells).enumerate() {
            if row.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::InvalidWeight {
                    cell: x,
                    value: row.iter().copied().fold(f64::INFINITY, f64::min),
                });
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-10 {
                return Err(Error::UnnormalizedRow { cell: x, total });
            }
        }
        Ok(Self { grid, matrix, s, t })
    }

    pub fn identity(grid: TorusGrid, t: f64) -> Self {
        let cells = grid.cells();
        let mut matrix = vec![0.0; cells * cells];
        for x in 0..cells {
            matrix[x * cells + x] = 1.0;
        }
        Self {
            grid,
            matrix,
            s: t,
            t,
        }
    }

    /// Wrapped rows of a jump kernel, spanning [s, s + h].
    pub fn from_jump_kernel(kernel: &JumpKernel, s: f64) -> Result<Self> {
        let grid = *kernel.grid();
        let matrix = (0..grid.cells()).flat_map(|x| kernel.wrapped_row(x)).collect();
        Self::new(grid, matrix, s, s + kernel.h())
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn row(&self, x: usize) -> &[f64] {
        let cells = self.grid.cells();
        &self.matrix[x * cells..(x + 1) * cells]
    }

    /// μ ↦ μ·P.
    pub fn apply(&self, mu: &GridMeasure) -> Result<GridMeasure> {
        self.grid.ensure_same(mu.grid())?;
        let cells = self.grid.cells();
        let mut out = vec![0.0; cells];
        for (x, &m) in mu.weights().iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(self.row(x)) {
                *o += m * p;
            }
        }
        Ok(GridMeasure::from_raw(self.grid, out))
    }

    /// Largest total-variation distance between corresponding rows.
    pub fn max_row_tv(&self, other: &StochasticKernel) -> Result<f64> {
        self.grid.ensure_same(&other.grid)?;
        let cells = self.grid.cells();
        Ok((0..cells)
            .map(|x| {
                0.5 * self
                    .row(x)
                    .iter()
                    .zip(other.row(x))
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max))
    }
}

/// Transition kernel of the Fokker–Planck flow from s to t: row x evolves δ_x.
pub fn transition_kernels(drift: &DriftField, s: f64, t: f64, dt: f64) -> Result<StochasticKernel> {
    if !(s < t) {
        return Err(invalid("t", format!("need s < t, got s = {s}, t = {t}")));
    }
    check_stability(drift, dt)?;
    let steps = frame_count((s, t), dt)?;
    let grid = drift.grid;
    let cells = grid.cells();
    let stepper = Stepper::new(drift);
    if drift.is_autonomous() {
        let step = one_step_matrix(&stepper, cells, s, dt);
        let mut power = StochasticKernel::identity(grid, s);
        let mut base = StochasticKernel {
            grid,
            matrix: step,
            s,
            t: s,
        };
        let mut e = steps;
        while e > 0 {
            if e & 1 == 1 {
                power.matrix = multiply(&power.matrix, &base.matrix, cells);
            }
            e >>= 1;
            if e > 0 {
                base.matrix = multiply(&base.matrix, &base.matrix, cells);
            }
        }
        for v in power.matrix.iter_mut() {
            *v = v.max(0.0);
        }
        return StochasticKernel::new(grid, power.matrix, s, t);
    }
    let rows: Vec<Vec<f64>> = (0..cells)
        .into_par_iter()
        .map(|x| {
            let mut m = vec![0.0; cells];
            m[x] = 1.0;
            let (mut scratch, mut term) = (Vec::new(), Vec::new());
            for k in 0..steps {
                stepper.advance(&mut m, s + k as f64 * dt, dt, &mut scratch, &mut term);
            }
            for v in m.iter_mut() {
                *v = v.max(0.0);
            }
            m
        })
        .collect();
    StochasticKernel::new(grid, rows.concat(), s, t)
}

fn one_step_matrix(stepper: &Stepper, cells: usize, t: f64, dt: f64) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = (0..cells)
        .into_par_iter()
        .map(|x| {
            let mut m = vec![0.0; cells];
            m[x] = 1.0;
            stepper.advance(&mut m, t, dt, &mut Vec::new(), &mut Vec::new());
            m
        })
        .collect();
    rows.concat()
}

/// Row-major product of two square matrices.
fn multiply(a: &[f64], b: &[f64], cells: usize) -> Vec<f64> {
    (0..cells)
        .into_par_iter()
        .flat_map_iter(|x| {
            let mut out = vec![0.0; cells];
            for (z, &p) in a[x * cells..(x + 1) * cells].iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (o, q) in out.iter_mut().zip(&b[z * cells..(z + 1) * cells]) {
                    *o += p * q;
                }
            }
            out
        })
        .collect()
}

/// γ₁ ⊖ γ₂: first jump by γ₁, then by γ₂.
pub fn compose_kernels(g1: &StochasticKernel, g2: &StochasticKernel) -> Result<StochasticKernel> {
    g1.grid.ensure_same(&g2.grid)?;
    if (g1.t - g2.s).abs() > 1e-12 {
        return Err(Error::TimeMismatch(format!(
            "first kernel ends at {} but second starts at {}",
            g1.t, g2.s
        )));
    }
    Ok(StochasticKernel {
        grid: g1.grid,
        matrix: multiply(&g1.matrix, &g2.matrix, g1.grid.cells()),
        s: g1.s,
        t: g2.t,
    })
}

/// Path and window kernels of the frozen-drift construction.
#[derive(Clone, Debug)]
pub struct FrozenSemigroup {
    pub path: MeasurePath,
    pub windows: Vec<StochasticKernel>,
}

/// Row x of the window kernel: wrapped N(x + τ·X(t_k, x), τ·Id) sampled at cell centers.
fn frozen_rows(drift: &DriftField, t_k: f64, tau: f64) -> Vec<f64> {
    let grid = drift.grid;
    let cells = grid.cells();
    let sd = tau.sqrt();
    let images = (8.0 * sd).ceil() as i64 + 1;
    let rows: Vec<Vec<f64>> = (0..cells)
        .into_par_iter()
        .map(|x| {
            let c = grid.center(x);
            let v = drift.at_cell(t_k, x);
            let mean = [c[0] + tau * v[0], c[1] + tau * v[1]];
            let axis_weights: Vec<Vec<f64>> = (0..grid.dim())
                .map(|axis| {
                    (0..grid.n())
                        .map(|i| {
                            let y = (i as f64 + 0.5) * grid.cell_width();
                            (-images..=images)
                                .map(|k| {
                                    let d = y + k as f64 - mean[axis];
                                    (-0.5 * d * d / tau).exp()
                                })
                                .sum::<f64>()
                        })
                        .collect()
                })
                .collect();
            let mut row: Vec<f64> = (0..cells)
                .map(|y| {
                    let co = grid.coords(y);
                    (0..grid.dim()).map(|axis| axis_weights[axis][co[axis]]).product()
                })
                .collect();
            let total: f64 = row.iter().sum();
            for r in row.iter_mut() {
                *r /= total;
            }
            row
        })
        .collect();
    rows.concat()
}

/// Piecewise-frozen approximation: on each window [a + kε, a + (k+1)ε) every source moves as a
/// Gaussian with the drift frozen at the window start; windows compose by ⊖.
pub fn frozen_drift_semigroup(
    drift: &DriftField,
    mu0: &GridMeasure,
    eps: f64,
    t_span: (f64, f64),
    dt: f64,
) -> Result<FrozenSemigroup> {
    drift.grid.ensure_same(mu0.grid())?;
    let per_window = {
        let m = eps / dt;
        let r = m.round();
        if r < 1.0 || (m - r).abs() > 1e-9 * m {
            return Err(invalid("eps", format!("{eps} is not a multiple of dt = {dt}")));
        }
        r as usize
    };
    let steps = frame_count(t_span, dt)?;
    let grid = drift.grid;
    let mut frames = vec![mu0.clone()];
    let mut windows = Vec::new();
    let mut start = mu0.clone();
    let mut k = 0;
    while k < steps {
        let t_k = t_span.0 + k as f64 * dt;
        let len = per_window.min(steps - k);
        for j in 1..=len {
            let tau = j as f64 * dt;
            let kernel = StochasticKernel::new(grid, frozen_rows(drift, t_k, tau), t_k, t_k + tau)?;
            let frame = kernel.apply(&start)?;
            if j == len {
                windows.push(kernel);
            }
            frames.push(frame);
        }
        start = frames.last().expect("frames are nonempty").clone();
        k += len;
    }
    Ok(FrozenSemigroup {
        path: MeasurePath::new(t_span.0, dt, frames)?,
        windows,
    })
}

/// Binned Monte-Carlo path plus the lifted displacements of every sample at the final time.
#[derive(Clone, Debug)]
pub struct SdeRun {
    pub path: MeasurePath,
    pub displacements: Vec<Point>,
}

/// Euler–Maruyama for dx = X(t, x)dt + dW on the lifted space, binned to the torus grid.
/// Each sample path draws from its own counter-addressed stream of `seed`.
pub fn sde_sample(
    drift: &DriftField,
    mu0: &GridMeasure,
    t_span: (f64, f64),
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<SdeRun> {
    drift.grid.ensure_same(mu0.grid())?;
    if n_paths < 1000 {
        return Err(invalid("n_paths", format!("need at least 1000 paths, got {n_paths}")));
    }
    if !(dt > 0.0) {
        return Err(invalid("dt", format!("must be positive, got {dt}")));
    }
    let steps = frame_count(t_span, dt)?;
    let grid = drift.grid;
    let cells = grid.cells();
    let dim = grid.dim();
    let cdf: Vec<f64> = mu0
        .weights()
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let sq = dt.sqrt();
    let chunk = 1024;
    let partial: Vec<(Vec<u64>, Vec<Point>)> = (0..n_paths.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut counts = vec![0u64; (steps + 1) * cells];
            let mut disp = Vec::new();
            for path in c * chunk..((c + 1) * chunk).min(n_paths) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(path as u64);
                let u: f64 = rng.random::<f64>() * cdf[cells - 1];
                let start = cdf.partition_point(|&v| v <= u).min(cells - 1);
                let x0 = grid.center(start);
                let mut x = x0;
                counts[start] += 1;
                for k in 0..steps {
                    let t = t_span.0 + k as f64 * dt;
                    let v = drift.eval(t, x);
                    for axis in 0..dim {
                        let z: f64 = rng.sample(StandardNormal);
                        x[axis] += v[axis] * dt + sq * z;
                    }
                    counts[(k + 1) * cells + grid.locate(x)] += 1;
                }
                disp.push([x[0] - x0[0], x[1] - x0[1]]);
            }
            (counts, disp)
        })
        .collect();
    let mut counts = vec![0u64; (steps + 1) * cells];
    let mut displacements = Vec::with_capacity(n_paths);
    for (c, d) in partial {
        for (a, b) in counts.iter_mut().zip(c) {
            *a += b;
        }
        displacements.extend(d);
    }
    let frames = counts
        .chunks(cells)
        .map(|row| GridMeasure::normalized(grid, row.iter().map(|&c| c as f64).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SdeRun {
        path: MeasurePath::new(t_span.0, dt, frames)?,
        displacements,
    })
}

/// Smooth bump supported in the open interval (a, b) and its time derivative.
fn bump(t: f64, a: f64, b: f64) -> (f64, f64) {
    let s = (2.0 * t - a - b) / (b - a);
    if s.abs() >= 1.0 {
        return (0.0, 0.0);
    }
    let q = 1.0 - s * s;
    let value = (1.0 - 1.0 / q).exp();
    let ds_dt = 2.0 / (b - a);
    (value, value * (-2.0 * s / (q * q)) * ds_dt)
}

/// Wave vectors of the spatial test functions for harmonics up to `k_max`.
fn wave_vectors(dim: usize, k_max: usize) -> Vec<[i64; 2]> {
    let k = k_max as i64;
    if dim == 1 {
        return (1..=k).map(|k1| [k1, 0]).collect();
    }
    let mut out = Vec::new();
    for k1 in 0..=k {
        for k2 in -k..=k {
            if k1 == 0 && k2 <= 0 {
                continue;
            }
            out.push([k1, k2]);
        }
    }
    out
}

/// Residuals of the weak Fokker–Planck identity
/// ∫∫ (∂_tφ + ½Δφ + ⟨∇φ, X⟩) dμ_t dt = 0 for φ = bump(t)·{cos, sin}(2π k·x).
pub fn weak_residual(path: &MeasurePath, drift: &DriftField, basis_size: usize) -> Result<Vec<f64>> {
    let grid = *path.grid();
    grid.ensure_same(drift.grid())?;
    if basis_size == 0 || basis_size > grid.n() / 4 {
        return Err(invalid(
            "basis_size",
            format!("harmonics must lie in 1..={} on this grid, got {basis_size}", grid.n() / 4),
        ));
    }
    let waves = wave_vectors(grid.dim(), basis_size);
    let (a, b) = (path.t0(), path.t_end());
    let last = path.len() - 1;
    let cells = grid.cells();
    let mut out = vec![0.0; 2 * waves.len()];
    for (i, frame) in path.frames().iter().enumerate() {
        let t = path.time(i);
        let (bv, bd) = bump(t, a, b);
        if bv == 0.0 && bd == 0.0 {
            continue;
        }
        let w = if i == 0 || i == last { 0.5 * path.dt() } else { path.dt() };
        let drift_frame: Vec<Point> = (0..cells).map(|c| drift.at_cell(t, c)).collect();
        for (q, k) in waves.iter().enumerate() {
            let kv = [2.0 * PI * k[0] as f64, 2.0 * PI * k[1] as f64];
            let lap = -(kv[0] * kv[0] + kv[1] * kv[1]);
            let (mut rc, mut rs) = (0.0, 0.0);
            for (c, &m) in frame.weights().iter().enumerate() {
                if m == 0.0 {
                    continue;
                }
                let x = grid.center(c);
                let phase = kv[0] * x[0] + kv[1] * x[1];
                let (s, co) = phase.sin_cos();
                let x_dot_k = drift_frame[c][0] * kv[0] + drift_frame[c][1] * kv[1];
                // φ = cos: ∇φ = −sin·k; φ = sin: ∇φ = cos·k.
                rc += m * (bd * co + bv * (0.5 * lap * co - s * x_dot_k));
                rs += m * (bd * s + bv * (0.5 * lap * s + co * x_dot_k));
            }
            out[2 * q] += w * rc;
            out[2 * q + 1] += w * rs;
        }
    }
    Ok(out)
}

/// Drift read off the forward velocities of a converged ladder.
#[derive(Clone, Debug)]
pub struct DriftRecovery {
    pub drift: DriftField,
    /// Finest rung used.
    pub h: f64,
    /// Whether the finest rungs were combined by Richardson extrapolation.
    pub extrapolated: bool,
    /// Largest |v^{h₁} − v^{h₂}| between the two finest rungs on cells of mass ≥ 1e−4,
    /// both fields centered at their step midpoints (NaN with a single rung).
    pub cauchy_gap: f64,
    pub ladder: LadderReport,
}

/// Drift recovered from the forward velocities of the ladder's finest converged rungs.
///
/// The velocity of the step from t to t + h is attributed to the midpoint t + h/2. When the
/// two finest rungs halve (and the finest spans an even number of stamps), their fields are
/// combined as 2·v_h − v_{2h}, cancelling the O(h) bias; otherwise the finest field is used
/// as is.
pub fn drift_recovery(path: &MeasurePath, h_list: &[f64], opts: &SinkhornOptions) -> Result<DriftRecovery> {
    let (ladder, fields) = ladder_with_velocities(path, h_list, opts)?;
    recovery_from_fields(path, &ladder, &fields)
}

/// Rungs combined by the Richardson extrapolation of the recovered drift.
pub const RICHARDSON_LEVELS: usize = 2;

/// Field of a rung at stamp j, read at its midpoint alignment (clamped to the stamps it covers).
fn centered(field: &[Vec<Point>], steps: usize, j: usize, cell: usize) -> Point {
    let idx = j.saturating_sub(steps / 2).min(field.len() - 1);
    field[idx][cell]
}

pub(crate) fn recovery_from_fields(
    path: &MeasurePath,
    ladder: &LadderReport,
    fields: &[(f64, Vec<Vec<Point>>)],
) -> Result<DriftRecovery> {
    if ladder.divergent {
        return Err(Error::Divergent);
    }
    let not_converged = || Error::NotConverged {
        iterations: 0,
        residual: f64::NAN,
    };
    let finest = ladder.finest_converged().ok_or_else(not_converged)?;
    let pos = fields
        .iter()
        .position(|(h, _)| *h == finest.h)
        .ok_or_else(not_converged)?;
    let usable: Vec<&(f64, Vec<Vec<Point>>)> = fields[..=pos]
        .iter()
        .filter(|(h, _)| ladder.rungs.iter().any(|r| r.h == *h && r.converged()))
        .collect();
    let steps = |h: f64| (h / path.dt()).round() as usize;
    let (h, finest_field) = (fields[pos].0, &fields[pos].1);
    let cells = path.grid().cells();
    let stamps = path.len();

    let mut cauchy_gap = f64::NAN;
    if usable.len() >= 2 {
        let (h2, coarse) = usable[usable.len() - 2];
        let mut gap: f64 = 0.0;
        for j in 0..stamps {
            for (c, &m) in path.frames()[j].weights().iter().enumerate() {
                if m >= 1e-4 {
                    let a = centered(finest_field, steps(h), j, c);
                    let b = centered(coarse, steps(*h2), j, c);
                    gap = gap.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
                }
            }
        }
        cauchy_gap = gap;
    }

    // Longest run of successively halving rungs ending at the finest one.
    let mut chain = vec![usable.len() - 1];
    while chain.len() < RICHARDSON_LEVELS {
        let k = *chain.last().expect("chain is nonempty");
        if k == 0 || steps(usable[k - 1].0) != 2 * steps(usable[k].0) {
            break;
        }
        chain.push(k - 1);
    }
    if steps(h) % 2 != 0 {
        chain.truncate(1);
    }
    let extrapolated = chain.len() >= 2;
    let values: Vec<Vec<Point>> = (0..stamps)
        .map(|j| {
            (0..cells)
                .map(|c| {
                    // Richardson tableau in h with ratio 2, finest rung first.
                    let mut col: Vec<Point> = chain
                        .iter()
                        .map(|&k| centered(&usable[k].1, steps(usable[k].0), j, c))
                        .collect();
                    for level in 1..col.len() {
                        let f = (1u64 << level) as f64;
                        for i in 0..col.len() - level {
                            let (fine, coarse) = (col[i], col[i + 1]);
                            col[i] = [
                                (f * fine[0] - coarse[0]) / (f - 1.0),
                                (f * fine[1] - coarse[1]) / (f - 1.0),
                            ];
                        }
                    }
                    col[0]
                })
                .collect()
        })
        .collect();
    let drift = DriftField::table(*path.grid(), path.t0(), path.dt(), values)?;
    Ok(DriftRecovery {
        drift,
        h,
        extrapolated,
        cauchy_gap,
        ladder: ladder.clone(),
    })
}
