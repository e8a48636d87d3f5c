use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// A point or displacement in ℝ^p. Components beyond the grid dimension are zero.
pub type Point = [f64; 2];

/// A p×p matrix stored in a fixed 2×2 block; unused entries are zero.
pub type Matrix = [[f64; 2]; 2];

/// Tail level the automatic lift window is sized for.
const LIFT_TAIL: f64 = 1e-12;
/// Largest number of fundamental-domain copies chosen automatically per axis.
const MAX_AUTO_LIFTS: usize = 3;

/// Periodic cell grid on the unit torus 𝕋^p.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TorusGrid {
    dim: usize,
    n: usize,
    lift_radius: usize,
}

impl TorusGrid {
    /// Builds a grid whose lift window keeps the Gaussian tail of N(0, h·Id) below 1e-12
    /// for the time step `h` (capped at three copies per axis).
    pub fn new(dim: usize, n: usize, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(invalid("h_min", format!("must be positive, got {h}")));
        }
        let reach = (2.0 * h * (1.0 / LIFT_TAIL).ln()).sqrt();
        let cells = (reach * n as f64).ceil() as usize + 1;
        let copies = cells.div_ceil(n.max(1)).clamp(1, MAX_AUTO_LIFTS);
        Self::with_lift_radius(dim, n, copies)
    }

    pub fn with_lift_radius(dim: usize, n: usize, lift_radius: usize) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::UnsupportedDimension(dim));
        }
        if n < 2 {
            return Err(invalid("n", format!("need at least 2 cells per axis, got {n}")));
        }
        if lift_radius == 0 {
            return Err(invalid("lift_radius", "must be at least 1"));
        }
        Ok(Self {
            dim,
            n,
            lift_radius,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lift_radius(&self) -> usize {
        self.lift_radius
    }

    pub fn cells(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn cell_width(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_width().powi(self.dim as i32)
    }

    pub fn lift_count(&self) -> usize {
        (2 * self.lift_radius + 1).pow(self.dim as u32)
    }

    /// Integer lift vectors, ordered row-major with the last axis fastest.
    pub fn lifts(&self) -> Vec<[i32; 2]> {
        let r = self.lift_radius as i32;
        let mut out = Vec::with_capacity(self.lift_count());
        if self.dim == 1 {
            out.extend((-r..=r).map(|k| [k, 0]));
        } else {
            for k0 in -r..=r {
                out.extend((-r..=r).map(|k1| [k0, k1]));
            }
        }
        out
    }

    pub fn check_cell(&self, cell: usize) -> Result<()> {
        if cell < self.cells() {
            Ok(())
        } else {
            Err(Error::InvalidCell {
                index: cell,
                cells: self.cells(),
            })
        }
    }

    /// Per-axis integer coordinates of a cell (row-major, last axis fastest).
    pub fn coords(&self, cell: usize) -> [usize; 2] {
        if self.dim == 1 {
            [cell, 0]
        } else {
            [cell / self.n, cell % self.n]
        }
    }

    pub fn index(&self, coords: [usize; 2]) -> usize {
        if self.dim == 1 {
            coords[0] % self.n
        } else {
            (coords[0] % self.n) * self.n + coords[1] % self.n
        }
    }

    pub fn center(&self, cell: usize) -> Point {
        let c = self.coords(cell);
        let w = self.cell_width();
        let mut x = [0.0; 2];
        for (axis, xi) in x.iter_mut().enumerate().take(self.dim) {
            *xi = (c[axis] as f64 + 0.5) * w;
        }
        x
    }

    /// Cell containing a point of ℝ^p after projection onto the torus.
    pub fn locate(&self, x: Point) -> usize {
        let mut c = [0usize; 2];
        for axis in 0..self.dim {
            let u = x[axis] - x[axis].floor();
            c[axis] = ((u * self.n as f64) as usize).min(self.n - 1);
        }
        self.index(c)
    }

    /// Cell index of the offset `to − from` taken modulo n on every axis.
    pub fn offset(&self, from: usize, to: usize) -> usize {
        let a = self.coords(from);
        let b = self.coords(to);
        let mut d = [0usize; 2];
        for axis in 0..self.dim {
            d[axis] = (b[axis] + self.n - a[axis]) % self.n;
        }
        self.index(d)
    }

    /// Cell reached from `from` by an offset cell index.
    pub fn translate(&self, from: usize, offset: usize) -> usize {
        let a = self.coords(from);
        let d = self.coords(offset);
        self.index([a[0] + d[0], a[1] + d[1]])
    }

    /// Nearest-image displacement of an offset, per axis in (−1/2, 1/2].
    pub fn offset_displacement(&self, offset: usize) -> Point {
        let d = self.coords(offset);
        let w = self.cell_width();
        let mut v = [0.0; 2];
        for axis in 0..self.dim {
            let k = d[axis] as i64;
            let signed = if 2 * k > self.n as i64 { k - self.n as i64 } else { k };
            v[axis] = signed as f64 * w;
        }
        v
    }

    /// Displacement in ℝ^p of the jump from `from` to the `lift` copy of `to`.
    pub fn displacement(&self, from: usize, to: usize, lift: [i32; 2]) -> Point {
        let mut v = self.offset_displacement(self.offset(from, to));
        for axis in 0..self.dim {
            v[axis] += lift[axis] as f64;
        }
        v
    }

    /// Torus distance between two cell centers.
    pub fn wrap_distance(&self, i: usize, j: usize) -> Result<f64> {
        self.check_cell(i)?;
        self.check_cell(j)?;
        Ok(norm(self.offset_displacement(self.offset(i, j))))
    }

    /// Dense matrix of torus distances raised to `power`.
    pub fn distance_matrix(&self, power: f64) -> Vec<f64> {
        let cells = self.cells();
        let per_offset: Vec<f64> = (0..cells)
            .map(|d| norm(self.offset_displacement(d)).powf(power))
            .collect();
        let mut out = vec![0.0; cells * cells];
        for i in 0..cells {
            for j in 0..cells {
                out[i * cells + j] = per_offset[self.offset(i, j)];
            }
        }
        out
    }

    pub fn ensure_same(&self, other: &TorusGrid) -> Result<()> {
        if self.dim == other.dim && self.n == other.n {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "p={} n={} vs p={} n={}",
                self.dim, self.n, other.dim, other.n
            )))
        }
    }
}

pub fn norm_sq(v: Point) -> f64 {
    v[0] * v[0] + v[1] * v[1]
}

pub fn norm(v: Point) -> f64 {
    norm_sq(v).sqrt()
}
