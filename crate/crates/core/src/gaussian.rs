use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use statrs::function::erf::erfc;

use crate::error::{invalid, Error, Result};
use crate::grid::{Matrix, Point, TorusGrid};
use crate::kernel::{JumpKernel, LiftSplit};
use crate::quad::{gaussian_ball, scaled_gaussian_tail};

/// Largest tail mass tolerated outside the lift window.
const LIFT_TAIL_LIMIT: f64 = 1e-9;

/// Gaussian N(a, Q) on ℝ^p.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianSpec {
    dim: usize,
    mean: Point,
    covariance: Matrix,
}

impl GaussianSpec {
    pub fn new(dim: usize, mean: Point, covariance: Matrix) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::UnsupportedDimension(dim));
        }
        let spd = if dim == 1 {
            covariance[0][0] > 0.0
        } else {
            (covariance[0][1] - covariance[1][0]).abs() <= 1e-14
                && covariance[0][0] > 0.0
                && det2(&covariance) > 0.0
        };
        if !spd {
            return Err(invalid("covariance", "must be symmetric positive definite"));
        }
        Ok(Self {
            dim,
            mean,
            covariance,
        })
    }

    /// N(mean, variance·Id).
    pub fn isotropic(dim: usize, mean: Point, variance: f64) -> Result<Self> {
        Self::new(dim, mean, [[variance, 0.0], [0.0, variance]])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> Point {
        self.mean
    }

    pub fn covariance(&self) -> Matrix {
        self.covariance
    }

    pub fn log_density(&self, v: Point) -> f64 {
        let d = [v[0] - self.mean[0], v[1] - self.mean[1]];
        if self.dim == 1 {
            let q = self.covariance[0][0];
            -0.5 * d[0] * d[0] / q - 0.5 * (2.0 * PI * q).ln()
        } else {
            let c = &self.covariance;
            let det = det2(c);
            let quad = (c[1][1] * d[0] * d[0] - 2.0 * c[0][1] * d[0] * d[1] + c[0][0] * d[1] * d[1]) / det;
            -0.5 * quad - 0.5 * ((2.0 * PI).powi(2) * det).ln()
        }
    }

    pub fn density(&self, v: Point) -> f64 {
        self.log_density(v).exp()
    }
}

/// Gaussian jump law on the grid: normalized per-offset log masses and their lift split.
#[derive(Clone, Debug)]
pub struct HeatTable {
    grid: TorusGrid,
    h: f64,
    log_kernel: Vec<f64>,
    split: Arc<LiftSplit>,
    log_normalizer: f64,
}

impl HeatTable {
    /// Reference kernel N(0, h·Id): mass of each lifted cell by midpoint evaluation.
    pub fn heat(grid: &TorusGrid, h: f64) -> Result<Self> {
        let spec = GaussianSpec::isotropic(grid.dim(), [0.0; 2], h)?;
        Self::gaussian(grid, h, &spec)
    }

    /// Translation-invariant kernel whose displacement law is `spec`.
    pub fn gaussian(grid: &TorusGrid, h: f64, spec: &GaussianSpec) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(invalid("h", format!("must be positive, got {h}")));
        }
        if spec.dim() != grid.dim() {
            return Err(Error::GridMismatch(format!(
                "Gaussian in dimension {} on a grid of dimension {}",
                spec.dim(),
                grid.dim()
            )));
        }
        let tail = window_tail(grid, spec);
        if tail > LIFT_TAIL_LIMIT {
            return Err(Error::LiftWindowTooSmall { h, tail });
        }
        let lifts = grid.lifts();
        let cells = grid.cells();
        let log_vol = grid.cell_volume().ln();
        let mut log_kernel = vec![0.0; cells];
        let mut fractions = vec![0.0; cells * lifts.len()];
        let mut logs = vec![0.0; lifts.len()];
        for d in 0..cells {
            let base = grid.offset_displacement(d);
            for (l, lift) in lifts.iter().enumerate() {
                let v = [base[0] + lift[0] as f64, base[1] + lift[1] as f64];
                logs[l] = log_vol + spec.log_density(v);
            }
            let lse = log_sum_exp(&logs);
            log_kernel[d] = lse;
            for (l, &lq) in logs.iter().enumerate() {
                fractions[d * lifts.len() + l] = (lq - lse).exp();
            }
        }
        let log_normalizer = log_sum_exp(&log_kernel);
        for lk in &mut log_kernel {
            *lk -= log_normalizer;
        }
        Ok(Self {
            grid: *grid,
            h,
            log_kernel,
            split: Arc::new(LiftSplit::new(lifts, fractions)),
            log_normalizer,
        })
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Normalized log mass of the wrapped kernel at an offset cell.
    pub fn log_kernel(&self, offset: usize) -> f64 {
        self.log_kernel[offset]
    }

    pub fn log_kernels(&self) -> &[f64] {
        &self.log_kernel
    }

    pub fn split(&self) -> &Arc<LiftSplit> {
        &self.split
    }

    /// log of the midpoint sum before normalization; zero for an exact quadrature.
    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    /// Translation-invariant jump kernel with rows given by this table.
    pub fn kernel(&self) -> Result<JumpKernel> {
        let cells = self.grid.cells();
        let per_offset: Vec<f64> = self.log_kernel.iter().map(|l| l.exp()).collect();
        let mut wrapped = vec![0.0; cells * cells];
        for x in 0..cells {
            let row = &mut wrapped[x * cells..(x + 1) * cells];
            for (y, w) in row.iter_mut().enumerate() {
                *w = per_offset[self.grid.offset(x, y)];
            }
            let total: f64 = row.iter().sum();
            for w in row.iter_mut() {
                *w /= total;
            }
        }
        JumpKernel::from_wrapped(self.grid, self.h, wrapped, self.split.clone())
    }
}

/// Wrapped N(0, h·Id) kernel on the grid.
pub fn wrapped_heat_kernel(grid: &TorusGrid, h: f64) -> Result<JumpKernel> {
    HeatTable::heat(grid, h)?.kernel()
}

/// Kernel whose rows are the law `spec` of the displacement (e.g. N(h·a, h·δ·Id)).
pub fn gaussian_jump_kernel(grid: &TorusGrid, h: f64, spec: &GaussianSpec) -> Result<JumpKernel> {
    HeatTable::gaussian(grid, h, spec)?.kernel()
}

/// Gaussian mass outside the lift window, per-axis union bound.
fn window_tail(grid: &TorusGrid, spec: &GaussianSpec) -> f64 {
    let reach = grid.lift_radius() as f64 + 0.5;
    let mut tail = 0.0;
    for axis in 0..grid.dim() {
        let sd = spec.covariance()[axis][axis].sqrt();
        let m = spec.mean()[axis].abs();
        tail += 0.5 * erfc((reach - m) / (sd * 2f64.sqrt())) + 0.5 * erfc((reach + m) / (sd * 2f64.sqrt()));
    }
    tail
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn det2(c: &Matrix) -> f64 {
    c[0][0] * c[1][1] - c[0][1] * c[1][0]
}

fn check_positive(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(invalid(name, format!("must be positive, got {value}")))
    }
}

fn check_dim(p: usize) -> Result<()> {
    if p == 0 {
        Err(invalid("p", "dimension must be at least 1"))
    } else {
        Ok(())
    }
}

fn sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// T(a, δ) = p(δ−1)/2 + (h/2)|a|² + (p/2)·ln(1/(2πhδ)): minimum of I over Trace(a, δ).
pub fn trace_bound(a: &[f64], delta: f64, h: f64, p: usize) -> Result<f64> {
    check_positive("delta", delta)?;
    check_positive("h", h)?;
    check_dim(p)?;
    let p = p as f64;
    Ok(p * (delta - 1.0) / 2.0 + 0.5 * h * sq(a) + 0.5 * p * (1.0 / (2.0 * PI * h * delta)).ln())
}

/// Minimum of I over Corr_{i,i}(a, δ).
pub fn diag_bound(a: &[f64], delta: f64, h: f64, p: usize) -> Result<f64> {
    check_positive("delta", delta)?;
    check_positive("h", h)?;
    check_dim(p)?;
    Ok((delta - 1.0) / 2.0
        + 0.5 * h * sq(a)
        + 0.5 * (1.0 / (2.0 * PI * h * delta)).ln()
        + 0.5 * (p as f64 - 1.0) * (1.0 / (2.0 * PI * h)).ln())
}

/// Minimum of I over Corr_{i,j}(a, δ), i ≠ j.
pub fn offdiag_bound(a: &[f64], delta: f64, h: f64, p: usize) -> Result<f64> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(invalid("delta", format!("must be nonnegative, got {delta}")));
    }
    check_positive("h", h)?;
    if p < 2 {
        return Err(invalid("p", "off-diagonal correlations need p ≥ 2"));
    }
    let (_, alpha) = eta_alpha(delta)?;
    // (−1 + √(1+4δ²))/(2δ²) = α, continuously extended by 1 at δ = 0.
    let excess = 1.0 / alpha - 1.0;
    Ok(excess + 0.5 * h * sq(a) + 0.5 * (alpha.ln() - p as f64 * (2.0 * PI * h).ln()))
}

/// η = (−1 + √(1+4δ²))/(2δ) and α = 1 − η², the solution of η/(1−η²) = δ in [0, 1).
pub fn eta_alpha(delta: f64) -> Result<(f64, f64)> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(invalid("delta", format!("must be nonnegative, got {delta}")));
    }
    // Rationalized form 2δ/(1 + √(1+4δ²)) avoids cancellation near δ = 0.
    let eta = 2.0 * delta / (1.0 + (1.0 + 4.0 * delta * delta).sqrt());
    Ok((eta, (1.0 - eta) * (1.0 + eta)))
}

/// T(a, δ) − T(a, 1).
pub fn gap_trace(delta: f64, p: usize) -> Result<f64> {
    check_positive("delta", delta)?;
    check_dim(p)?;
    let p = p as f64;
    Ok(p * (delta - 1.0) / 2.0 - 0.5 * p * delta.ln())
}

/// B_diag(a, δ) − B_diag(a, 1).
pub fn gap_diag(delta: f64) -> Result<f64> {
    check_positive("delta", delta)?;
    Ok((delta - 1.0) / 2.0 - 0.5 * delta.ln())
}

/// B_off-diag(a, δ) − B_off-diag(a, 0).
pub fn gap_offdiag(delta: f64) -> Result<f64> {
    let (_, alpha) = eta_alpha(delta)?;
    Ok(1.0 / alpha - 1.0 + 0.5 * alpha.ln())
}

/// Solution of the tail-constrained problem at a given multiplier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailSolveResult {
    pub eta: f64,
    pub lambda: f64,
    pub bar_delta: f64,
    pub f_value: f64,
}

/// Radial integrals of γ_η(v) ∝ exp(−|v|²/2h − η|v|²/2h·1_{|v|>r}).
struct TailProblem {
    r: f64,
    h: f64,
    p: usize,
    inner: f64,
}

impl TailProblem {
    fn new(r: f64, h: f64, p: usize) -> Result<Self> {
        check_positive("r", r)?;
        check_positive("h", h)?;
        if p != 1 && p != 2 {
            return Err(Error::UnsupportedDimension(p));
        }
        let inner = h.powf(p as f64 / 2.0) * gaussian_ball(p, r / h.sqrt())?;
        Ok(Self { r, h, p, inner })
    }

    /// (normalizer Z, tail second moment / 2h before normalization).
    fn integrals(&self, eta: f64) -> Result<(f64, f64)> {
        let scale = self.h / (1.0 + eta);
        let y0 = self.r / scale.sqrt();
        let damp = (-0.5 * y0 * y0).exp();
        let half_p = self.p as f64 / 2.0;
        if damp == 0.0 {
            return Ok((self.inner, 0.0));
        }
        let outer = scale.powf(half_p) * damp * scaled_gaussian_tail(self.p, y0, 0)?;
        let second = scale.powf(half_p + 1.0) * damp * scaled_gaussian_tail(self.p, y0, 2)?;
        Ok((self.inner + outer, second / (2.0 * self.h)))
    }

    fn bar_delta(&self, eta: f64) -> Result<f64> {
        let (z, num) = self.integrals(eta)?;
        Ok(num / z)
    }

    fn solve(&self, eta: f64, delta: f64) -> Result<TailSolveResult> {
        let (z, num) = self.integrals(eta)?;
        let p = self.p as f64;
        Ok(TailSolveResult {
            eta,
            lambda: 1.0 - z.ln(),
            bar_delta: num / z,
            f_value: -z.ln() - eta * delta + 0.5 * p * (2.0 * PI * self.h).ln(),
        })
    }
}

/// δ̄(η) = (1/2h)∫_{B(0,r)ᶜ} |v|² γ_η(v) dv for the normalized minimizer γ_η.
pub fn bar_delta(eta: f64, r: f64, h: f64, p: usize) -> Result<f64> {
    if !(eta > -1.0 && eta.is_finite()) {
        return Err(invalid("eta", format!("must exceed −1, got {eta}")));
    }
    TailProblem::new(r, h, p)?.bar_delta(eta)
}

const ETA_MIN: f64 = -1.0 + 1e-12;
const ETA_MAX: f64 = 1e6;

/// F_h(r, δ): minimal A_h-cost (minus log(1/2πh)^{p/2}) of a density whose tail outside
/// B(0, r) carries second moment 2hδ; solved by bisection on the multiplier η.
pub fn out_cost(r: f64, delta: f64, h: f64, p: usize) -> Result<TailSolveResult> {
    check_positive("delta", delta)?;
    let problem = TailProblem::new(r, h, p)?;
    // Parameterize by u = ln(1 + η), on which δ̄ is decreasing.
    let eta_of = |u: f64| u.exp_m1();
    let (mut lo, mut hi) = ((1.0 + ETA_MIN).ln(), (1.0 + ETA_MAX).ln());
    let top = problem.bar_delta(eta_of(lo))?;
    let bottom = problem.bar_delta(eta_of(hi))?;
    if !(delta <= top && delta >= bottom) {
        return Err(Error::OutOfRange {
            target: delta,
            lo: bottom,
            hi: top,
        });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let value = problem.bar_delta(eta_of(mid))?;
        if (value - delta).abs() <= 1e-11 * delta {
            lo = mid;
            hi = mid;
            break;
        }
        if value > delta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi.abs().max(1.0) {
            break;
        }
    }
    problem.solve(eta_of(0.5 * (lo + hi)), delta)
}

/// Points per decade of the δ₀ search grid.
const DELTA0_PER_DECADE: usize = 64;

/// Smallest δ on a geometric grid over [1e−6, 1e2] such that F_h(r, δ′) ≥ δ′/2 at every
/// grid point δ′ ≥ δ.
pub fn delta0(r: f64, h: f64, p: usize) -> Result<f64> {
    let points = 8 * DELTA0_PER_DECADE + 1;
    let grid: Vec<f64> = (0..points)
        .map(|k| 10f64.powf(-6.0 + k as f64 / DELTA0_PER_DECADE as f64))
        .collect();
    let holds: Vec<bool> = grid
        .par_iter()
        .map(|&d| {
            out_cost(r, d, h, p)
                .map(|res| res.f_value >= 0.5 * d)
                .unwrap_or(false)
        })
        .collect();
    let first_failure_from_top = holds.iter().rposition(|&ok| !ok);
    match first_failure_from_top {
        None => Ok(grid[0]),
        Some(k) if k + 1 < points => Ok(grid[k + 1]),
        Some(_) => Err(Error::SearchExhausted(format!(
            "F_h(r={r}, δ, h={h}) < δ/2 at the top of the search grid"
        ))),
    }
}
