use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gaussian::HeatTable;
use crate::grid::{Matrix, Point, TorusGrid};
use crate::kernel::{JumpKernel, TailMoments};
use crate::measure::GridMeasure;

/// Scalings are folded into the log potentials once they leave [1/BOUND, BOUND].
const ABSORB_BOUND: f64 = 1e50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornOptions {
    /// Largest admissible marginal violation Σ_y |(μ₁∗γ)(y) − μ₂(y)|.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Kernel entries below this level switch the iteration to pure log-domain sweeps.
    pub epsilon_floor: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            max_iterations: 100_000,
            epsilon_floor: 1e-300,
        }
    }
}

impl SinkhornOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance <= 1e-4) {
            return Err(invalid("tolerance", format!("must lie in (0, 1e-4], got {}", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations", "must be at least 1"));
        }
        if !(self.epsilon_floor > 0.0) {
            return Err(invalid("epsilon_floor", "must be positive"));
        }
        Ok(())
    }
}

/// Log scalings of the optimal plan P(x, y) = exp(row(x) + column(y))·K(x, y).
/// Cells outside the supports carry −∞.
#[derive(Clone, Debug, PartialEq)]
pub struct Potentials {
    pub row: Vec<f64>,
    pub column: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct StepCostResult {
    pub cost: f64,
    pub kernel: JumpKernel,
    pub velocity: Vec<Point>,
    pub covariance: Vec<Matrix>,
    pub potentials: Potentials,
    pub iterations: usize,
    pub converged: bool,
    /// Final Σ_y |(μ₁∗γ)(y) − μ₂(y)|.
    pub marginal_error: f64,
    pub source: GridMeasure,
}

impl StepCostResult {
    fn ensure_converged(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::NotConverged {
                iterations: self.iterations,
                residual: self.marginal_error,
            })
        }
    }

    pub fn h(&self) -> f64 {
        self.kernel.h()
    }
}

/// h-forward velocity of a converged step.
pub fn forward_velocity(result: &StepCostResult) -> Result<&[Point]> {
    result.ensure_converged()?;
    Ok(&result.velocity)
}

/// h-covariance matrices of a converged step.
pub fn covariance(result: &StepCostResult) -> Result<&[Matrix]> {
    result.ensure_converged()?;
    Ok(&result.covariance)
}

/// Tail quantities of the minimizing kernel at radius `r`.
pub fn tail_moments(result: &StepCostResult, r: f64) -> Result<TailMoments> {
    result.ensure_converged()?;
    result.kernel.tail_moments(&result.source, r)
}

/// One-step cost ℰ^h(μ₁, μ₂) with its minimizing kernel.
pub fn solve_step(
    mu1: &GridMeasure,
    mu2: &GridMeasure,
    h: f64,
    opts: &SinkhornOptions,
) -> Result<StepCostResult> {
    StepSolver::new(mu1.grid(), h)?.solve(mu1, mu2, opts)
}

/// Reusable solver for a fixed grid and time step.
#[derive(Clone, Debug)]
pub struct StepSolver {
    table: HeatTable,
    first: Vec<Point>,
    second: Vec<Matrix>,
}

impl StepSolver {
    /// The lift window is widened to the automatic size for `h` when `grid`'s is smaller.
    pub fn new(grid: &TorusGrid, h: f64) -> Result<Self> {
        let auto = TorusGrid::new(grid.dim(), grid.n(), h)?;
        let grid = &if auto.lift_radius() > grid.lift_radius() { auto } else { *grid };
        let table = HeatTable::heat(grid, h)?;
        let cells = grid.cells();
        let lifts = table.split().lifts().to_vec();
        let mut first = vec![[0.0; 2]; cells];
        let mut second = vec![[[0.0; 2]; 2]; cells];
        for d in 0..cells {
            let base = grid.offset_displacement(d);
            for (lift, &f) in lifts.iter().zip(table.split().fractions(d)) {
                let v = [base[0] + lift[0] as f64, base[1] + lift[1] as f64];
                for a in 0..grid.dim() {
                    first[d][a] += f * v[a];
                    for b in 0..grid.dim() {
                        second[d][a][b] += f * v[a] * v[b];
                    }
                }
            }
        }
        Ok(Self {
            table,
            first,
            second,
        })
    }

    pub fn table(&self) -> &HeatTable {
        &self.table
    }

    pub fn h(&self) -> f64 {
        self.table.h()
    }

    pub fn solve(&self, mu1: &GridMeasure, mu2: &GridMeasure, opts: &SinkhornOptions) -> Result<StepCostResult> {
        self.solve_from(mu1, mu2, opts, None)
    }

    /// Starts the scaling iteration from the given column log-potential.
    pub fn solve_from(
        &self,
        mu1: &GridMeasure,
        mu2: &GridMeasure,
        opts: &SinkhornOptions,
        initial_column: Option<&[f64]>,
    ) -> Result<StepCostResult> {
        opts.validate()?;
        let grid = *self.table.grid();
        grid.ensure_same(mu1.grid())?;
        grid.ensure_same(mu2.grid())?;
        let cells = grid.cells();
        if let Some(g) = initial_column {
            if g.len() != cells {
                return Err(invalid("initial_column", "length must equal the number of cells"));
            }
        }
        let rows: Vec<usize> = (0..cells).filter(|&x| mu1.weights()[x] > 0.0).collect();
        let cols: Vec<usize> = (0..cells).filter(|&y| mu2.weights()[y] > 0.0).collect();
        let a: Vec<f64> = rows.iter().map(|&x| mu1.weights()[x]).collect();
        let b: Vec<f64> = cols.iter().map(|&y| mu2.weights()[y]).collect();
        let log_k: Vec<f64> = rows
            .iter()
            .flat_map(|&x| {
                cols.iter()
                    .map(move |&y| self.table.log_kernel(grid.offset(x, y)))
            })
            .collect();
        let g0: Vec<f64> = match initial_column {
            Some(g) => cols.iter().map(|&y| g[y]).collect(),
            None => vec![0.0; cols.len()],
        };
        let min_log = log_k.iter().copied().fold(f64::INFINITY, f64::min);
        let scaling = if min_log < opts.epsilon_floor.ln() {
            log_domain(&log_k, &a, &b, g0, opts)
        } else {
            stabilized(&log_k, &a, &b, g0, opts)
        };
        if !scaling.f.iter().chain(&scaling.g).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("step scaling potentials"));
        }

        let (nr, nc) = (rows.len(), cols.len());
        let mut wrapped = vec![0.0; cells * cells];
        let mut cost = 0.0;
        let mut col_mass = vec![0.0; nc];
        for i in 0..nr {
            let x = rows[i];
            let mut row_total = 0.0;
            for j in 0..nc {
                let pij = (scaling.f[i] + scaling.g[j] + log_k[i * nc + j]).exp();
                wrapped[x * cells + cols[j]] = pij;
                row_total += pij;
            }
            for j in 0..nc {
                let w = &mut wrapped[x * cells + cols[j]];
                *w /= row_total;
                col_mass[j] += a[i] * *w;
            }
            // Exact row normalization folds the residual into the row potential.
            let f_exact = scaling.f[i] + (a[i] / row_total).ln();
            cost += a[i] * (f_exact - a[i].ln());
        }
        for j in 0..nc {
            cost += col_mass[j] * scaling.g[j];
        }
        let marginal_error: f64 = col_mass.iter().zip(&b).map(|(m, t)| (m - t).abs()).sum();

        let dim = grid.dim();
        let h = self.h();
        let mut velocity = vec![[0.0; 2]; cells];
        let mut cov = vec![[[0.0; 2]; 2]; cells];
        for &x in &rows {
            let mut m1 = [0.0; 2];
            let mut m2 = [[0.0; 2]; 2];
            for &y in &cols {
                let w = wrapped[x * cells + y];
                let d = grid.offset(x, y);
                for a_ in 0..dim {
                    m1[a_] += w * self.first[d][a_];
                    for b_ in 0..dim {
                        m2[a_][b_] += w * self.second[d][a_][b_];
                    }
                }
            }
            for a_ in 0..dim {
                velocity[x][a_] = m1[a_] / h;
                for b_ in 0..dim {
                    cov[x][a_][b_] = (m2[a_][b_] - m1[a_] * m1[b_]) / h;
                }
            }
        }

        let mut row_pot = vec![f64::NEG_INFINITY; cells];
        let mut col_pot = vec![f64::NEG_INFINITY; cells];
        for (i, &x) in rows.iter().enumerate() {
            row_pot[x] = scaling.f[i];
        }
        for (j, &y) in cols.iter().enumerate() {
            col_pot[y] = scaling.g[j];
        }
        let kernel = JumpKernel::from_wrapped(grid, h, wrapped, self.table.split().clone())?;
        Ok(StepCostResult {
            cost,
            kernel,
            velocity,
            covariance: cov,
            potentials: Potentials {
                row: row_pot,
                column: col_pot,
            },
            iterations: scaling.iterations,
            converged: scaling.converged,
            marginal_error,
            source: mu1.clone(),
        })
    }
}

struct Scaling {
    f: Vec<f64>,
    g: Vec<f64>,
    iterations: usize,
    converged: bool,
}

/// Alternating scaling in the linear domain with the scalings periodically absorbed into
/// log potentials. The row update comes last so the returned rows are exact.
fn stabilized(log_k: &[f64], a: &[f64], b: &[f64], g0: Vec<f64>, opts: &SinkhornOptions) -> Scaling {
    let (nr, nc) = (a.len(), b.len());
    let mut f = vec![0.0; nr];
    let mut g = g0;
    let mut kt = vec![0.0; nr * nc];
    let rebuild = |kt: &mut [f64], f: &[f64], g: &[f64]| {
        for i in 0..nr {
            for j in 0..nc {
                kt[i * nc + j] = (f[i] + g[j] + log_k[i * nc + j]).exp();
            }
        }
    };
    rebuild(&mut kt, &f, &g);
    let mut u = vec![1.0; nr];
    let mut v = vec![1.0; nc];
    let mut col = vec![0.0; nc];
    // Start with a row update so the first column check is meaningful.
    row_update(&kt, &v, a, &mut u);
    let mut iterations = 0;
    let mut converged = false;
    loop {
        col.fill(0.0);
        for i in 0..nr {
            let ui = u[i];
            for (c, k) in col.iter_mut().zip(&kt[i * nc..(i + 1) * nc]) {
                *c += ui * k;
            }
        }
        let err: f64 = col.iter().zip(&v).zip(b).map(|((c, vj), bj)| (c * vj - bj).abs()).sum();
        if err <= opts.tolerance {
            converged = true;
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }
        iterations += 1;
        for j in 0..nc {
            v[j] = b[j] / col[j];
        }
        row_update(&kt, &v, a, &mut u);
        let out_of_range = u
            .iter()
            .chain(&v)
            .any(|&s| !(s > 1.0 / ABSORB_BOUND && s < ABSORB_BOUND));
        if out_of_range {
            for i in 0..nr {
                f[i] += u[i].ln();
            }
            for j in 0..nc {
                g[j] += v[j].ln();
            }
            if f.iter().chain(&g).any(|x| !x.is_finite()) {
                // Underflow in the linear domain: finish with log-domain sweeps.
                let mut rest = *opts;
                rest.max_iterations = opts.max_iterations.saturating_sub(iterations).max(1);
                let fallback = log_domain(log_k, a, b, vec![0.0; nc], &rest);
                return Scaling {
                    iterations: iterations + fallback.iterations,
                    ..fallback
                };
            }
            rebuild(&mut kt, &f, &g);
            u.fill(1.0);
            v.fill(1.0);
        }
    }
    for i in 0..nr {
        f[i] += u[i].ln();
    }
    for j in 0..nc {
        g[j] += v[j].ln();
    }
    Scaling {
        f,
        g,
        iterations,
        converged,
    }
}

fn row_update(kt: &[f64], v: &[f64], a: &[f64], u: &mut [f64]) {
    let nc = v.len();
    for (i, ui) in u.iter_mut().enumerate() {
        let s: f64 = kt[i * nc..(i + 1) * nc].iter().zip(v).map(|(k, vj)| k * vj).sum();
        *ui = a[i] / s;
    }
}

/// Pure log-domain alternating updates for kernels too small for linear arithmetic.
fn log_domain(log_k: &[f64], a: &[f64], b: &[f64], g0: Vec<f64>, opts: &SinkhornOptions) -> Scaling {
    let (nr, nc) = (a.len(), b.len());
    let la: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; nr];
    let mut g = g0;
    let mut buf = vec![0.0; nr.max(nc)];
    let update_f = |f: &mut [f64], g: &[f64], buf: &mut [f64]| {
        for i in 0..nr {
            for j in 0..nc {
                buf[j] = g[j] + log_k[i * nc + j];
            }
            f[i] = la[i] - crate::gaussian::log_sum_exp(&buf[..nc]);
        }
    };
    update_f(&mut f, &g, &mut buf);
    let mut iterations = 0;
    let mut converged = false;
    let mut log_col = vec![0.0; nc];
    loop {
        for j in 0..nc {
            for i in 0..nr {
                buf[i] = f[i] + log_k[i * nc + j];
            }
            log_col[j] = crate::gaussian::log_sum_exp(&buf[..nr]);
        }
        let err: f64 = (0..nc).map(|j| ((log_col[j] + g[j]).exp() - b[j]).abs()).sum();
        if err <= opts.tolerance {
            converged = true;
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }
        iterations += 1;
        for j in 0..nc {
            g[j] = lb[j] - log_col[j];
        }
        update_f(&mut f, &g, &mut buf);
    }
    Scaling {
        f,
        g,
        iterations,
        converged,
    }
}
