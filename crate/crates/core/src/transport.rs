use crate::error::{invalid, Error, Result};
use crate::grid::TorusGrid;
use crate::measure::{GridMeasure, MeasurePath};

/// Mass left unassigned below this level is treated as zero by the flow solver.
const FLOW_EPS: f64 = 1e-15;
/// Largest cell count accepted by the dense network solver.
const MAX_NETWORK_CELLS: usize = 1024;

/// Coupling between two grid measures.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    grid: TorusGrid,
    matrix: Vec<f64>,
    marginal_first: GridMeasure,
    marginal_second: GridMeasure,
}

impl TransportPlan {
    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    /// Row-major cell×cell masses.
    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn marginal_first(&self) -> &GridMeasure {
        &self.marginal_first
    }

    pub fn marginal_second(&self) -> &GridMeasure {
        &self.marginal_second
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.matrix
            .chunks(self.grid.cells())
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let cells = self.grid.cells();
        let mut out = vec![0.0; cells];
        for row in self.matrix.chunks(cells) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Σ |x − y|^power_𝕋 Γ(x, y).
    pub fn cost(&self, power: f64) -> f64 {
        self.grid
            .distance_matrix(power)
            .iter()
            .zip(&self.matrix)
            .map(|(c, g)| c * g)
            .sum()
    }
}

/// Exact Wasserstein distance together with an optimal plan.
#[derive(Clone, Debug, PartialEq)]
pub struct Wasserstein {
    pub distance: f64,
    pub plan: TransportPlan,
}

/// d_λ(μ, ν) for λ ∈ {1, 2} with the torus ground distance.
pub fn wasserstein(mu: &GridMeasure, nu: &GridMeasure, order: u32) -> Result<Wasserstein> {
    if order != 1 && order != 2 {
        return Err(invalid("order", format!("only orders 1 and 2 are supported, got {order}")));
    }
    let grid = *mu.grid();
    grid.ensure_same(nu.grid())?;
    let power = order as f64;
    let (cost, matrix) = if grid.dim() == 1 {
        circular_transport(&grid, mu.weights(), nu.weights(), power)
    } else {
        if grid.cells() > MAX_NETWORK_CELLS {
            return Err(invalid(
                "grid",
                format!("exact two-dimensional transport is limited to n ≤ 32, got n = {}", grid.n()),
            ));
        }
        network_transport(&grid.distance_matrix(power), mu.weights(), nu.weights())
    };
    Ok(Wasserstein {
        distance: cost.max(0.0).powf(1.0 / power),
        plan: TransportPlan {
            grid,
            matrix,
            marginal_first: mu.clone(),
            marginal_second: nu.clone(),
        },
    })
}

/// sup over shared stamps of d₂(a_t, b_t).
pub fn path_sup_distance(a: &MeasurePath, b: &MeasurePath) -> Result<f64> {
    a.grid().ensure_same(b.grid())?;
    if a.len() != b.len() || (a.t0() - b.t0()).abs() > 1e-12 || (a.dt() - b.dt()).abs() > 1e-12 {
        return Err(Error::TimeMismatch(format!(
            "({}, {}, {} frames) vs ({}, {}, {} frames)",
            a.t0(),
            a.dt(),
            a.len(),
            b.t0(),
            b.dt(),
            b.len()
        )));
    }
    let mut sup: f64 = 0.0;
    for (x, y) in a.frames().iter().zip(b.frames()) {
        sup = sup.max(wasserstein(x, y, 2)?.distance);
    }
    Ok(sup)
}

struct Atoms {
    cells: Vec<usize>,
    pos: Vec<f64>,
    cum: Vec<f64>,
}

impl Atoms {
    fn new(grid: &TorusGrid, weights: &[f64]) -> Self {
        let total: f64 = weights.iter().sum();
        let mut cells = Vec::new();
        let mut pos = Vec::new();
        let mut cum = vec![0.0];
        let mut acc = 0.0;
        for (c, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                cells.push(c);
                pos.push(grid.center(c)[0]);
                acc += w / total;
                cum.push(acc);
            }
        }
        *cum.last_mut().expect("nonempty measure") = 1.0;
        Self { cells, pos, cum }
    }

    fn len(&self) -> usize {
        self.cells.len()
    }
}

/// Cost of the monotone coupling t ↦ (F⁻¹(t), G⁻¹(t + θ)) of the periodic quantile functions.
fn rotation_cost(a: &Atoms, b: &Atoms, theta: f64, power: f64, mut plan: Option<(&mut [f64], usize)>) -> f64 {
    let mut shift = theta.floor();
    let u0 = theta - shift;
    let mut j = b.cum[..b.len()].partition_point(|&c| c <= u0).saturating_sub(1);
    let mut t = 0.0;
    let mut i = 0;
    let mut cost = 0.0;
    while i < a.len() {
        let end_a = a.cum[i + 1];
        let end_b = b.cum[j + 1] + shift - theta;
        let next = end_a.min(end_b);
        let len = next - t;
        if len > 0.0 {
            let d = (b.pos[j] + shift - a.pos[i]).abs();
            cost += len * d.powf(power);
            if let Some((m, cells)) = plan.as_mut() {
                m[a.cells[i] * *cells + b.cells[j]] += len;
            }
            t = next;
        }
        if end_a <= next {
            i += 1;
        }
        if end_b <= next {
            j += 1;
            if j == b.len() {
                j = 0;
                shift += 1.0;
            }
        }
    }
    cost
}

/// Exact transport on the circle: the cost is convex and piecewise linear in the rotation
/// parameter θ, with breakpoints where quantile levels of the two measures align.
fn circular_transport(grid: &TorusGrid, mu: &[f64], nu: &[f64], power: f64) -> (f64, Vec<f64>) {
    let a = Atoms::new(grid, mu);
    let b = Atoms::new(grid, nu);
    let mut candidates = Vec::with_capacity(3 * (a.len() + 1) * (b.len() + 1));
    for &fa in &a.cum[..a.len()] {
        for &gb in &b.cum[..b.len()] {
            for m in [-1.0, 0.0, 1.0] {
                let th = gb - fa + m;
                if (-1.0..=1.0).contains(&th) {
                    candidates.push(th);
                }
            }
        }
    }
    candidates.sort_by(|x, y| x.total_cmp(y));
    candidates.dedup_by(|x, y| (*x - *y).abs() < 1e-15);
    let f = |k: usize| rotation_cost(&a, &b, candidates[k], power, None);
    let (mut lo, mut hi) = (0usize, candidates.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if f(mid) <= f(mid + 1) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let from = lo.saturating_sub(3);
    let to = (lo + 3).min(candidates.len() - 1);
    let best = (from..=to)
        .map(|k| (k, f(k)))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .map(|(k, _)| k)
        .unwrap_or(lo);
    let cells = grid.cells();
    let mut matrix = vec![0.0; cells * cells];
    let cost = rotation_cost(&a, &b, candidates[best], power, Some((&mut matrix, cells)));
    (cost, matrix)
}

/// Exact discrete transport by successive shortest augmenting paths with node potentials.
/// `cost` is a dense cells×cells matrix; returns the optimal cost and plan.
pub fn network_transport(cost: &[f64], a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let cells = a.len();
    debug_assert_eq!(b.len(), cells);
    debug_assert_eq!(cost.len(), cells * cells);
    let src: Vec<usize> = (0..cells).filter(|&i| a[i] > 0.0).collect();
    let snk: Vec<usize> = (0..cells).filter(|&j| b[j] > 0.0).collect();
    let (ns, nt) = (src.len(), snk.len());
    let c = |i: usize, j: usize| cost[src[i] * cells + snk[j]];
    let mut supply: Vec<f64> = src.iter().map(|&i| a[i]).collect();
    let mut demand: Vec<f64> = snk.iter().map(|&j| b[j]).collect();
    let mut flow = vec![0.0; ns * nt];
    let mut pot_s = vec![0.0; ns];
    let mut pot_t: Vec<f64> = (0..nt)
        .map(|j| (0..ns).map(|i| c(i, j)).fold(f64::INFINITY, f64::min))
        .collect();

    let mut dist_s = vec![0.0; ns];
    let mut dist_t = vec![0.0; nt];
    let mut done_s = vec![false; ns];
    let mut done_t = vec![false; nt];
    let mut pred_s = vec![usize::MAX; ns];
    let mut pred_t = vec![usize::MAX; nt];
    loop {
        if supply.iter().all(|&s| s <= FLOW_EPS) || demand.iter().all(|&d| d <= FLOW_EPS) {
            break;
        }
        for i in 0..ns {
            dist_s[i] = if supply[i] > FLOW_EPS { 0.0 } else { f64::INFINITY };
            done_s[i] = false;
            pred_s[i] = usize::MAX;
        }
        dist_t.fill(f64::INFINITY);
        done_t.fill(false);
        pred_t.fill(usize::MAX);
        let mut target = None;
        let mut reach = 0.0;
        loop {
            let mut best = f64::INFINITY;
            let mut pick = None;
            for i in 0..ns {
                if !done_s[i] && dist_s[i] < best {
                    best = dist_s[i];
                    pick = Some((true, i));
                }
            }
            for j in 0..nt {
                if !done_t[j] && dist_t[j] < best {
                    best = dist_t[j];
                    pick = Some((false, j));
                }
            }
            let Some((is_source, k)) = pick else { break };
            if is_source {
                done_s[k] = true;
                for j in 0..nt {
                    if done_t[j] {
                        continue;
                    }
                    let nd = best + (c(k, j) + pot_s[k] - pot_t[j]).max(0.0);
                    if nd < dist_t[j] {
                        dist_t[j] = nd;
                        pred_t[j] = k;
                    }
                }
            } else {
                done_t[k] = true;
                if demand[k] > FLOW_EPS {
                    target = Some(k);
                    reach = best;
                    break;
                }
                for i in 0..ns {
                    if done_s[i] || flow[i * nt + k] <= 0.0 {
                        continue;
                    }
                    let nd = best + (pot_t[k] - pot_s[i] - c(i, k)).max(0.0);
                    if nd < dist_s[i] {
                        dist_s[i] = nd;
                        pred_s[i] = k;
                    }
                }
            }
        }
        let Some(target) = target else { break };
        for i in 0..ns {
            pot_s[i] += dist_s[i].min(reach);
        }
        for j in 0..nt {
            pot_t[j] += dist_t[j].min(reach);
        }
        // Bottleneck along the path target ← source ← sink ← … ← start.
        let mut amount = demand[target];
        let mut j = target;
        let start = loop {
            let i = pred_t[j];
            match pred_s[i] {
                usize::MAX => break i,
                jp => {
                    amount = amount.min(flow[i * nt + jp]);
                    j = jp;
                }
            }
        };
        amount = amount.min(supply[start]);
        let mut j = target;
        loop {
            let i = pred_t[j];
            flow[i * nt + j] += amount;
            match pred_s[i] {
                usize::MAX => break,
                jp => {
                    flow[i * nt + jp] -= amount;
                    if flow[i * nt + jp] < 0.0 {
                        flow[i * nt + jp] = 0.0;
                    }
                    j = jp;
                }
            }
        }
        supply[start] -= amount;
        demand[target] -= amount;
    }
    let mut matrix = vec![0.0; cells * cells];
    let mut total = 0.0;
    for i in 0..ns {
        for j in 0..nt {
            let f = flow[i * nt + j];
            if f > 0.0 {
                matrix[src[i] * cells + snk[j]] = f;
                total += f * c(i, j);
            }
        }
    }
    (total, matrix)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid1(n: usize) -> TorusGrid {
        TorusGrid::with_lift_radius(1, n, 1).unwrap()
    }

    #[test]
    fn antipodal_diracs_are_half_apart() {
        let g = grid1(8);
        let a = GridMeasure::dirac(g, 0).unwrap();
        let b = GridMeasure::dirac(g, 4).unwrap();
        for order in [1, 2] {
            let w = wasserstein(&a, &b, order).unwrap();
            assert!((w.distance - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn network_matches_brute_force_assignment() {
        // Equal-weight atoms: an optimal plan is a permutation.
        let costs = [
            [0.3, 0.9, 0.2, 0.5],
            [0.8, 0.1, 0.7, 0.4],
            [0.6, 0.5, 0.9, 0.05],
            [0.2, 0.4, 0.3, 0.7],
        ];
        let flat: Vec<f64> = costs.iter().flatten().copied().collect();
        let w = vec![0.25; 4];
        let (total, _) = network_transport(&flat, &w, &w);
        let mut best = f64::INFINITY;
        let mut perm = [0, 1, 2, 3];
        permute(&mut perm, 0, &mut |p| {
            let s: f64 = (0..4).map(|i| costs[i][p[i]]).sum::<f64>() * 0.25;
            best = best.min(s);
        });
        assert!((total - best).abs() < 1e-14, "{total} vs {best}");
    }

    fn permute(p: &mut [usize; 4], k: usize, f: &mut impl FnMut(&[usize; 4])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }
}
