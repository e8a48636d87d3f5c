use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::grid::{norm, norm_sq, Matrix, Point, TorusGrid};
use crate::measure::GridMeasure;

const ROW_TOLERANCE: f64 = 1e-10;

/// Mass sent from a source cell to one lifted copy of a target cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jump {
    pub target: usize,
    pub lift: [i32; 2],
    pub mass: f64,
}

/// Per-offset split of wrapped mass across lifts.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftSplit {
    lifts: Vec<[i32; 2]>,
    fractions: Vec<f64>,
}

impl LiftSplit {
    /// `fractions[offset * lifts.len() + l]` must sum to one over `l` for every offset.
    pub fn new(lifts: Vec<[i32; 2]>, fractions: Vec<f64>) -> Self {
        debug_assert_eq!(fractions.len() % lifts.len(), 0);
        Self { lifts, fractions }
    }

    pub fn lifts(&self) -> &[[i32; 2]] {
        &self.lifts
    }

    pub fn fractions(&self, offset: usize) -> &[f64] {
        let l = self.lifts.len();
        &self.fractions[offset * l..(offset + 1) * l]
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Rows {
    Sparse(Vec<Vec<Jump>>),
    Split {
        wrapped: Vec<f64>,
        split: Arc<LiftSplit>,
    },
}

/// Discrete jump kernel γ(x, ·): per source cell, mass over (target cell, lift).
#[derive(Clone, Debug, PartialEq)]
pub struct JumpKernel {
    grid: TorusGrid,
    h: f64,
    rows: Rows,
}

/// μ₁-averaged tail quantities of a kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailMoments {
    /// (1/h)·mass outside B(0, r).
    pub epsilon_out: f64,
    /// (1/2h)·second moment outside B(0, r).
    pub delta_out: f64,
    /// (1/h)·∫ l(v) γ with l(v) = min(|v|³, 1).
    pub third_moment: f64,
}

impl JumpKernel {
    /// Sparse kernel; empty rows are allowed and mean "unconstrained source".
    pub fn from_rows(grid: TorusGrid, h: f64, rows: Vec<Vec<Jump>>) -> Result<Self> {
        check_h(h)?;
        if rows.len() != grid.cells() {
            return Err(Error::GridMismatch(format!(
                "{} kernel rows for {} cells",
                rows.len(),
                grid.cells()
            )));
        }
        for (cell, row) in rows.iter().enumerate() {
            for jump in row {
                grid.check_cell(jump.target)?;
                if !(jump.mass >= 0.0 && jump.mass.is_finite()) {
                    return Err(Error::InvalidWeight {
                        cell,
                        value: jump.mass,
                    });
                }
            }
            if !row.is_empty() {
                let total: f64 = row.iter().map(|j| j.mass).sum();
                if (total - 1.0).abs() > ROW_TOLERANCE {
                    return Err(Error::UnnormalizedRow { cell, total });
                }
            }
        }
        Ok(Self {
            grid,
            h,
            rows: Rows::Sparse(rows),
        })
    }

    /// Kernel given by a wrapped cell×cell matrix and a translation-invariant lift split.
    /// Zero rows of `wrapped` denote unconstrained sources.
    pub fn from_wrapped(
        grid: TorusGrid,
        h: f64,
        wrapped: Vec<f64>,
        split: Arc<LiftSplit>,
    ) -> Result<Self> {
        check_h(h)?;
        let cells = grid.cells();
        if wrapped.len() != cells * cells {
            return Err(Error::GridMismatch(format!(
                "wrapped matrix of length {} for {} cells",
                wrapped.len(),
                cells
            )));
        }
        for (x, row) in wrapped.chunks(cells).enumerate() {
            let total: f64 = row.iter().sum();
            if total != 0.0 && (total - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::UnnormalizedRow { cell: x, total });
            }
        }
        Ok(Self {
            grid,
            h,
            rows: Rows::Split { wrapped, split },
        })
    }

    /// Every source keeps all of its mass in place.
    pub fn identity(grid: TorusGrid, h: f64) -> Result<Self> {
        Self::shift(grid, h, [0, 0])
    }

    /// Deterministic translation by a whole number of cells per axis.
    pub fn shift(grid: TorusGrid, h: f64, cells: [i64; 2]) -> Result<Self> {
        let n = grid.n() as i64;
        let rows = (0..grid.cells())
            .map(|x| {
                let c = grid.coords(x);
                let mut target = [0usize; 2];
                let mut lift = [0i32; 2];
                for axis in 0..grid.dim() {
                    let raw = c[axis] as i64 + cells[axis];
                    target[axis] = raw.rem_euclid(n) as usize;
                    let wanted = cells[axis] as f64 / n as f64;
                    let near = grid.offset_displacement(grid.offset(x, grid.index(target)))[axis];
                    lift[axis] = (wanted - near).round() as i32;
                }
                vec![Jump {
                    target: grid.index(target),
                    lift,
                    mass: 1.0,
                }]
            })
            .collect();
        Self::from_rows(grid, h, rows)
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// All jumps out of `source`, in a fixed order.
    pub fn row(&self, source: usize) -> Vec<Jump> {
        match &self.rows {
            Rows::Sparse(rows) => rows[source].clone(),
            Rows::Split { wrapped, split } => {
                let cells = self.grid.cells();
                let mut out = Vec::new();
                for (y, &w) in wrapped[source * cells..(source + 1) * cells]
                    .iter()
                    .enumerate()
                {
                    if w == 0.0 {
                        continue;
                    }
                    let fr = split.fractions(self.grid.offset(source, y));
                    for (lift, &f) in split.lifts().iter().zip(fr) {
                        let mass = w * f;
                        if mass > 0.0 {
                            out.push(Jump {
                                target: y,
                                lift: *lift,
                                mass,
                            });
                        }
                    }
                }
                out
            }
        }
    }

    /// Mass per target cell, lifts summed.
    pub fn wrapped_row(&self, source: usize) -> Vec<f64> {
        let cells = self.grid.cells();
        match &self.rows {
            Rows::Sparse(rows) => {
                let mut out = vec![0.0; cells];
                for j in &rows[source] {
                    out[j.target] += j.mass;
                }
                out
            }
            Rows::Split { wrapped, .. } => wrapped[source * cells..(source + 1) * cells].to_vec(),
        }
    }

    pub fn row_mass(&self, source: usize) -> f64 {
        self.wrapped_row(source).iter().sum()
    }

    /// Dense lifted kernel, row-major over (source, target, lift index of `grid.lifts()`).
    /// Jumps whose lift falls outside the grid's window are folded onto the nearest lift.
    pub fn dense_lifted(&self) -> Vec<f64> {
        let cells = self.grid.cells();
        let lifts = self.grid.lifts();
        let r = self.grid.lift_radius() as i32;
        let side = (2 * r + 1) as usize;
        let mut out = vec![0.0; cells * cells * lifts.len()];
        for x in 0..cells {
            for j in self.row(x) {
                let l0 = (j.lift[0].clamp(-r, r) + r) as usize;
                let l = if self.grid.dim() == 1 {
                    l0
                } else {
                    l0 * side + (j.lift[1].clamp(-r, r) + r) as usize
                };
                out[(x * cells + j.target) * lifts.len() + l] += j.mass;
            }
        }
        out
    }

    /// Checks that every row with positive source mass is normalized.
    pub fn check_rows(&self, mu: &GridMeasure) -> Result<()> {
        self.grid.ensure_same(mu.grid())?;
        for (x, &m) in mu.weights().iter().enumerate() {
            if m > 0.0 {
                let total = self.row_mass(x);
                if (total - 1.0).abs() > ROW_TOLERANCE {
                    return Err(Error::UnnormalizedRow { cell: x, total });
                }
            }
        }
        Ok(())
    }

    /// h-forward velocity (1/h)·Σ v γ(x, v); zero on cells without mass.
    pub fn forward_velocity(&self, mu: &GridMeasure) -> Result<Vec<Point>> {
        self.check_rows(mu)?;
        let dim = self.grid.dim();
        Ok(self.per_source(mu, [0.0; 2], |x, row| {
            let mut m = [0.0; 2];
            for j in row {
                let v = self.grid.displacement(x, j.target, j.lift);
                for axis in 0..dim {
                    m[axis] += v[axis] * j.mass;
                }
            }
            [m[0] / self.h, m[1] / self.h]
        }))
    }

    /// h-covariance (1/h)·Σ (v − h v^h)(v − h v^h)ᵀ γ(x, v); zero on cells without mass.
    pub fn covariance(&self, mu: &GridMeasure) -> Result<Vec<Matrix>> {
        self.check_rows(mu)?;
        let dim = self.grid.dim();
        Ok(self.per_source(mu, [[0.0; 2]; 2], |x, row| {
            let mut mean = [0.0; 2];
            for j in row {
                let v = self.grid.displacement(x, j.target, j.lift);
                for axis in 0..dim {
                    mean[axis] += v[axis] * j.mass;
                }
            }
            let mut c = [[0.0; 2]; 2];
            for j in row {
                let v = self.grid.displacement(x, j.target, j.lift);
                for a in 0..dim {
                    for b in 0..dim {
                        c[a][b] += (v[a] - mean[a]) * (v[b] - mean[b]) * j.mass;
                    }
                }
            }
            for row in c.iter_mut() {
                for e in row.iter_mut() {
                    *e /= self.h;
                }
            }
            c
        }))
    }

    /// μ-averaged tail quantities at radius `r`.
    pub fn tail_moments(&self, mu: &GridMeasure, r: f64) -> Result<TailMoments> {
        if !(r > 0.0) {
            return Err(invalid("r", format!("must be positive, got {r}")));
        }
        self.check_rows(mu)?;
        let mut out = TailMoments {
            epsilon_out: 0.0,
            delta_out: 0.0,
            third_moment: 0.0,
        };
        for (x, &m) in mu.weights().iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for j in self.row(x) {
                let v = self.grid.displacement(x, j.target, j.lift);
                let len = norm(v);
                if len > r {
                    out.epsilon_out += m * j.mass;
                    out.delta_out += m * j.mass * len * len;
                }
                out.third_moment += m * j.mass * third_order_weight(len);
            }
        }
        out.epsilon_out /= self.h;
        out.delta_out /= 2.0 * self.h;
        out.third_moment /= self.h;
        Ok(out)
    }

    /// Σ_x μ(x)·Σ γ(x,v)·[|v|²/2h + log(γ(x,v)/cell volume)] − log(1/2πh)^{p/2}:
    /// the A_h functional with the density taken constant on each lifted cell.
    pub fn action_cost(&self, mu: &GridMeasure) -> Result<f64> {
        self.check_rows(mu)?;
        let vol = self.grid.cell_volume();
        let mut total = 0.0;
        for (x, &m) in mu.weights().iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let mut row_sum = 0.0;
            for j in self.row(x) {
                let v = self.grid.displacement(x, j.target, j.lift);
                row_sum += j.mass * (norm_sq(v) / (2.0 * self.h) + (j.mass / vol).ln());
            }
            total += m * row_sum;
        }
        let p = self.grid.dim() as f64;
        Ok(total + 0.5 * p * (2.0 * std::f64::consts::PI * self.h).ln())
    }

    fn per_source<T: Copy>(
        &self,
        mu: &GridMeasure,
        zero: T,
        f: impl Fn(usize, &[Jump]) -> T,
    ) -> Vec<T> {
        mu.weights()
            .iter()
            .enumerate()
            .map(|(x, &m)| if m > 0.0 { f(x, &self.row(x)) } else { zero })
            .collect()
    }
}

/// l(v) = |v|³ inside the unit ball, 1 outside.
pub fn third_order_weight(len: f64) -> f64 {
    if len <= 1.0 {
        len * len * len
    } else {
        1.0
    }
}

/// Distribution after one jump: (μ∗γ)(y) = Σ_x Σ_k μ(x)·γ(x, y, k).
pub fn push_forward(mu: &GridMeasure, gamma: &JumpKernel) -> Result<GridMeasure> {
    gamma.check_rows(mu)?;
    let cells = mu.grid().cells();
    let mut out = vec![0.0; cells];
    for (x, &m) in mu.weights().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for (y, w) in gamma.wrapped_row(x).into_iter().enumerate() {
            out[y] += m * w;
        }
    }
    Ok(GridMeasure::from_raw(*mu.grid(), out))
}

fn check_h(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(invalid("h", format!("must be positive, got {h}")))
    }
}
