//! Penalized step cost c_λ(μ₁, μ₂) = min_γ I(γ) + λ·d₁(μ₁∗γ, μ₂) − log(1/2πh)^{p/2}.
//!
//! By Kantorovich–Rubinstein duality the penalty is a supremum over λ-Lipschitz potentials,
//! and exchanging min and max leaves the concave problem
//!
//!   c_λ = max_{φ λ-Lipschitz}  −Σ_x μ₁(x)·log Σ_y K(x,y)·e^{−φ(y)} − Σ_y φ(y)·μ₂(y),
//!
//! whose unconstrained maximum is the entropic step cost. It is solved here by a
//! log-barrier Newton method on the Lipschitz constraints.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::gaussian::log_sum_exp;
use crate::grid::TorusGrid;
use crate::measure::GridMeasure;
use crate::step::{SinkhornOptions, StepSolver};

/// Duality-gap target m/t of the barrier path.
const GAP_TARGET: f64 = 1e-11;
/// Barrier weight growth between centering stages.
const BARRIER_GROWTH: f64 = 10.0;
/// Largest two-dimensional grid handled (all cell pairs are constrained).
const MAX_PAIR_CELLS: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct PenalizedResult {
    pub value: f64,
    /// Optimal potential φ, gauge-fixed by φ(0) = 0.
    pub potential: Vec<f64>,
    pub newton_steps: usize,
    /// Upper bound on the gap between `value` and the exact maximum.
    pub gap: f64,
}

pub fn penalized_cost(
    mu1: &GridMeasure,
    mu2: &GridMeasure,
    h: f64,
    lambda: f64,
    opts: &SinkhornOptions,
) -> Result<f64> {
    let solver = StepSolver::new(mu1.grid(), h)?;
    Ok(penalized_cost_with(&solver, mu1, mu2, lambda, opts)?.value)
}

struct Constraint {
    i: usize,
    j: usize,
    bound: f64,
}

fn constraints(grid: &TorusGrid, lambda: f64) -> Result<Vec<Constraint>> {
    let cells = grid.cells();
    if grid.dim() == 1 {
        // The torus metric on a circle of cells is the path metric of neighbor steps.
        return Ok((0..cells)
            .map(|i| Constraint {
                i,
                j: (i + 1) % cells,
                bound: lambda * grid.cell_width(),
            })
            .collect());
    }
    if cells > MAX_PAIR_CELLS {
        return Err(invalid(
            "grid",
            format!("two-dimensional penalized costs are limited to n ≤ 16, got n = {}", grid.n()),
        ));
    }
    let mut out = Vec::with_capacity(cells * (cells - 1) / 2);
    for i in 0..cells {
        for j in i + 1..cells {
            out.push(Constraint {
                i,
                j,
                bound: lambda * grid.wrap_distance(i, j)?,
            });
        }
    }
    Ok(out)
}

struct Dual<'a> {
    log_k: Vec<f64>,
    a: Vec<f64>,
    b: &'a [f64],
    cells: usize,
    cons: Vec<Constraint>,
}

impl Dual<'_> {
    /// Concave dual objective G(φ).
    fn value(&self, phi: &[f64]) -> f64 {
        let n = self.cells;
        let mut buf = vec![0.0; n];
        let mut total = 0.0;
        for (r, &ar) in self.a.iter().enumerate() {
            for y in 0..n {
                buf[y] = self.log_k[r * n + y] - phi[y];
            }
            total -= ar * log_sum_exp(&buf);
        }
        total - phi.iter().zip(self.b).map(|(p, m)| p * m).sum::<f64>()
    }

    fn slacks(&self, phi: &[f64]) -> Option<Vec<(f64, f64)>> {
        let mut out = Vec::with_capacity(self.cons.len());
        for c in &self.cons {
            let diff = phi[c.i] - phi[c.j];
            let (s1, s2) = (c.bound - diff, c.bound + diff);
            if !(s1 > 0.0 && s2 > 0.0) {
                return None;
            }
            out.push((s1, s2));
        }
        Some(out)
    }

    /// Barrier objective t·(−G) − Σ log s, or +∞ outside the feasible set.
    fn barrier(&self, phi: &[f64], t: f64) -> f64 {
        match self.slacks(phi) {
            Some(s) => -t * self.value(phi) - s.iter().map(|(a, b)| a.ln() + b.ln()).sum::<f64>(),
            None => f64::INFINITY,
        }
    }

    /// Gradient and Hessian of the barrier objective.
    fn derivatives(&self, phi: &[f64], t: f64) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.cells;
        let mut grad = DVector::from_fn(n, |y, _| t * self.b[y]);
        let mut hess = DMatrix::zeros(n, n);
        let mut pi = vec![0.0; n];
        for (r, &ar) in self.a.iter().enumerate() {
            for y in 0..n {
                pi[y] = self.log_k[r * n + y] - phi[y];
            }
            let lse = log_sum_exp(&pi);
            for p in pi.iter_mut() {
                *p = (*p - lse).exp();
            }
            let w = t * ar;
            for y in 0..n {
                grad[y] -= w * pi[y];
                hess[(y, y)] += w * pi[y];
                let wy = w * pi[y];
                if wy == 0.0 {
                    continue;
                }
                for z in 0..n {
                    hess[(y, z)] -= wy * pi[z];
                }
            }
        }
        let slacks = self.slacks(phi).expect("derivatives evaluated at a feasible point");
        for (c, (s1, s2)) in self.cons.iter().zip(slacks) {
            let g = 1.0 / s1 - 1.0 / s2;
            grad[c.i] += g;
            grad[c.j] -= g;
            let k = 1.0 / (s1 * s1) + 1.0 / (s2 * s2);
            hess[(c.i, c.i)] += k;
            hess[(c.j, c.j)] += k;
            hess[(c.i, c.j)] -= k;
            hess[(c.j, c.i)] -= k;
        }
        (grad, hess)
    }
}

/// c_λ with a prepared step solver (shares the reference kernel across calls).
pub fn penalized_cost_with(
    solver: &StepSolver,
    mu1: &GridMeasure,
    mu2: &GridMeasure,
    lambda: f64,
    opts: &SinkhornOptions,
) -> Result<PenalizedResult> {
    opts.validate()?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid("lambda", format!("must be positive, got {lambda}")));
    }
    let grid = *solver.table().grid();
    grid.ensure_same(mu1.grid())?;
    grid.ensure_same(mu2.grid())?;
    let cells = grid.cells();
    let rows: Vec<usize> = (0..cells).filter(|&x| mu1.weights()[x] > 0.0).collect();
    let mut log_k = Vec::with_capacity(rows.len() * cells);
    for &x in &rows {
        log_k.extend((0..cells).map(|y| solver.table().log_kernel(grid.offset(x, y))));
    }
    let dual = Dual {
        log_k,
        a: rows.iter().map(|&x| mu1.weights()[x]).collect(),
        b: mu2.weights(),
        cells,
        cons: constraints(&grid, lambda)?,
    };
    let m = 2.0 * dual.cons.len() as f64;
    let mut phi = vec![0.0; cells];
    let mut t = 1.0;
    let mut steps = 0;
    loop {
        // Centering by damped Newton on the gauge-fixed variables φ(1..).
        for _ in 0..200 {
            if steps >= opts.max_iterations {
                return Err(Error::NotConverged {
                    iterations: steps,
                    residual: m / t,
                });
            }
            let (grad, hess) = dual.derivatives(&phi, t);
            let g = grad.rows(1, cells - 1).into_owned();
            let hm = hess.view((1, 1), (cells - 1, cells - 1)).into_owned();
            let Some(chol) = hm.cholesky() else {
                return Err(Error::NonFinite("penalized-cost Newton system"));
            };
            let step = -chol.solve(&g);
            let decrement = -g.dot(&step);
            steps += 1;
            if !(decrement.is_finite()) {
                return Err(Error::NonFinite("penalized-cost Newton decrement"));
            }
            if decrement <= 1e-8 {
                break;
            }
            let base = dual.barrier(&phi, t);
            let mut alpha = 1.0;
            let mut moved = false;
            while alpha > 1e-14 {
                let trial: Vec<f64> = phi
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| if k == 0 { p } else { p + alpha * step[k - 1] })
                    .collect();
                let val = dual.barrier(&trial, t);
                if val <= base - 0.25 * alpha * decrement {
                    phi = trial;
                    moved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !moved {
                break;
            }
        }
        if m / t <= GAP_TARGET {
            break;
        }
        t *= BARRIER_GROWTH;
    }
    Ok(PenalizedResult {
        value: dual.value(&phi),
        potential: phi,
        newton_steps: steps,
        gap: m / t,
    })
}
