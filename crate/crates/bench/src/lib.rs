//! Fixtures shared by the benchmarks in `benches/`.

use fpcost_core::harness::config::bump;
use fpcost_core::{fp_solve, DriftField, GridMeasure, MeasurePath, Result, TorusGrid};

/// A bump and its heat-flowed image after time `h` on a 1D grid of `n` cells.
pub fn heat_pair(n: usize, h: f64) -> Result<(GridMeasure, GridMeasure)> {
    let grid = TorusGrid::with_lift_radius(1, n, 1)?;
    let mu1 = bump(grid, [0.5, 0.5], 0.05)?;
    let mu2 = bump(grid, [0.5, 0.5], (0.05f64 * 0.05 + h).sqrt())?;
    Ok((mu1, mu2))
}

/// Solver path of a bump under the constant drift 0.5 on [0, span].
pub fn drift_path(n: usize, span: f64, dt: f64) -> Result<MeasurePath> {
    let grid = TorusGrid::with_lift_radius(1, n, 1)?;
    let mu0 = bump(grid, [0.5, 0.5], 0.05)?;
    fp_solve(&mu0, &DriftField::constant(grid, [0.5, 0.0]), (0.0, span), dt)
}
