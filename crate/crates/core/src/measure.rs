use crate::error::{invalid, Error, Result};
use crate::grid::TorusGrid;

const MASS_TOLERANCE: f64 = 1e-12;

/// Discrete probability measure on the cells of a torus grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMeasure {
    grid: TorusGrid,
    weights: Vec<f64>,
}

impl GridMeasure {
    pub fn new(grid: TorusGrid, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid.cells() {
            return Err(Error::GridMismatch(format!(
                "{} weights for {} cells",
                weights.len(),
                grid.cells()
            )));
        }
        for (cell, &w) in weights.iter().enumerate() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidWeight { cell, value: w });
            }
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::NotNormalized { total });
        }
        Ok(Self { grid, weights })
    }

    /// Divides nonnegative weights by their sum.
    pub fn normalized(grid: TorusGrid, mut weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::NotNormalized { total });
        }
        for w in &mut weights {
            *w /= total;
        }
        Self::new(grid, weights)
    }

    pub fn uniform(grid: TorusGrid) -> Self {
        let cells = grid.cells();
        Self {
            grid,
            weights: vec![1.0 / cells as f64; cells],
        }
    }

    pub fn dirac(grid: TorusGrid, cell: usize) -> Result<Self> {
        grid.check_cell(cell)?;
        let mut weights = vec![0.0; grid.cells()];
        weights[cell] = 1.0;
        Ok(Self { grid, weights })
    }

    /// Measure with cell-center density proportional to `density`.
    pub fn from_density(grid: TorusGrid, density: impl Fn([f64; 2]) -> f64) -> Result<Self> {
        let weights = (0..grid.cells()).map(|c| density(grid.center(c))).collect();
        Self::normalized(grid, weights)
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Translation by whole cells along each axis.
    pub fn shifted(&self, cells: [i64; 2]) -> Self {
        let n = self.grid.n() as i64;
        let mut weights = vec![0.0; self.weights.len()];
        for (cell, &w) in self.weights.iter().enumerate() {
            let c = self.grid.coords(cell);
            let target = self.grid.index([
                (c[0] as i64 + cells[0]).rem_euclid(n) as usize,
                (c[1] as i64 + cells[1]).rem_euclid(n) as usize,
            ]);
            weights[target] += w;
        }
        Self {
            grid: self.grid,
            weights,
        }
    }

    /// Total-variation distance ½Σ|μ − ν|.
    pub fn total_variation(&self, other: &GridMeasure) -> Result<f64> {
        self.grid.ensure_same(&other.grid)?;
        Ok(0.5
            * self
                .weights
                .iter()
                .zip(&other.weights)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>())
    }

    pub(crate) fn from_raw(grid: TorusGrid, weights: Vec<f64>) -> Self {
        Self { grid, weights }
    }
}

/// Time-indexed sequence of measures with uniform frame spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurePath {
    grid: TorusGrid,
    t0: f64,
    dt: f64,
    frames: Vec<GridMeasure>,
}

impl MeasurePath {
    pub fn new(t0: f64, dt: f64, frames: Vec<GridMeasure>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid("dt", format!("must be positive, got {dt}")));
        }
        if frames.len() < 2 {
            return Err(invalid("frames", "a path needs at least two frames"));
        }
        let grid = *frames[0].grid();
        for f in &frames[1..] {
            grid.ensure_same(f.grid())?;
        }
        Ok(Self {
            grid,
            t0,
            dt,
            frames,
        })
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn frames(&self) -> &[GridMeasure] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn time(&self, index: usize) -> f64 {
        self.t0 + index as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.frames.len() - 1)
    }

    pub fn span(&self) -> f64 {
        (self.frames.len() - 1) as f64 * self.dt
    }

    /// Integer number of frames spanned by `h`.
    pub fn steps_for(&self, h: f64) -> Result<usize> {
        let m = h / self.dt;
        let rounded = m.round();
        if rounded < 1.0 || (m - rounded).abs() > 1e-9 * m.max(1.0) {
            return Err(invalid(
                "h",
                format!("{h} is not a positive integer multiple of dt = {}", self.dt),
            ));
        }
        Ok(rounded as usize)
    }

    /// The same frames in reverse time order.
    pub fn reversed(&self) -> Self {
        let mut frames = self.frames.clone();
        frames.reverse();
        Self { frames, ..*self }
    }

    /// Every `stride`-th frame, keeping the first.
    pub fn subsampled(&self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(invalid("stride", "must be positive"));
        }
        let frames: Vec<_> = self.frames.iter().step_by(stride).cloned().collect();
        Self::new(self.t0, self.dt * stride as f64, frames)
    }
}
