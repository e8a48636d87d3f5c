//! Brute-force minimization of ∫A_h(γ, v)dv under moment constraints on a velocity grid.
//!
//! The discrete problem min Σ w·(|v|²/2h·g + g·log g) subject to Σ w·g·φ = c has the Gibbs
//! minimizer g ∝ exp(−|v|²/2h + ⟨θ, φ(v)⟩) and the concave dual θ ↦ ⟨θ, c⟩ − log Z(θ),
//! which is maximized by damped Newton.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gaussian::{
    diag_bound, eta_alpha, gap_diag, gap_offdiag, gap_trace, log_sum_exp, offdiag_bound, out_cost, trace_bound,
};
use crate::grid::Point;
use crate::quad::surface;

/// Fewest velocity nodes per √h accepted by the oracle.
pub const MIN_RESOLUTION: usize = 8;
const MAX_NEWTON: usize = 200;
/// Relative constraint residual at which Newton stops.
const GRAD_TOLERANCE: f64 = 1e-10;
/// Dual gap (relative) below which Newton stops.
const DECREMENT_TOLERANCE: f64 = 1e-14;
/// Residual accepted when the line search can no longer improve the dual.
const STALL_TOLERANCE: f64 = 1e-7;
const MAX_BOX_GROWTH: usize = 6;
/// Relative mass allowed in the outermost shell of the velocity box.
const EDGE_MASS: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintKind {
    /// (1/h)∫|v − ha|²γ = p·δ.
    Trace,
    /// (1/h)∫(v_i − ha_i)²γ = δ.
    CorrDiag { i: usize },
    /// (1/h)∫(v_i − ha_i)(v_j − ha_j)γ = δ, i ≠ j.
    CorrOffDiag { i: usize, j: usize },
    /// (1/2h)∫_{|v|>r}|v|²γ = δ (no mean constraint).
    Out { r: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub kind: ConstraintKind,
    /// Mean constraint (1/h)∫vγ = a; ignored by `Out`.
    pub a: Point,
    pub delta: f64,
    pub h: f64,
    pub p: usize,
}

impl ConstraintSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p != 1 && self.p != 2 {
            return Err(Error::UnsupportedDimension(self.p));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(invalid("h", format!("must be positive, got {}", self.h)));
        }
        let positive = self.delta > 0.0 && self.delta.is_finite();
        match self.kind {
            ConstraintKind::Trace => {
                if !positive {
                    return Err(invalid("delta", "must be positive"));
                }
            }
            ConstraintKind::CorrDiag { i } => {
                if !positive {
                    return Err(invalid("delta", "must be positive"));
                }
                if i >= self.p {
                    return Err(invalid("i", format!("index {i} out of range for p = {}", self.p)));
                }
            }
            ConstraintKind::CorrOffDiag { i, j } => {
                if !(self.delta >= 0.0 && self.delta.is_finite()) {
                    return Err(invalid("delta", "must be nonnegative"));
                }
                if i >= self.p || j >= self.p || i == j {
                    return Err(invalid("i, j", format!("need distinct indices below p = {}", self.p)));
                }
            }
            ConstraintKind::Out { r } => {
                if !positive {
                    return Err(invalid("delta", "must be positive"));
                }
                if !(r > 0.0 && r.is_finite()) {
                    return Err(invalid("r", format!("must be positive, got {r}")));
                }
            }
        }
        Ok(())
    }

    fn mean(&self) -> &[f64] {
        &self.a[..self.p]
    }

    /// Closed-form minimum in the same convention as the oracle.
    pub fn closed_form(&self) -> Result<f64> {
        self.validate()?;
        match self.kind {
            ConstraintKind::Trace => trace_bound(self.mean(), self.delta, self.h, self.p),
            ConstraintKind::CorrDiag { .. } => diag_bound(self.mean(), self.delta, self.h, self.p),
            ConstraintKind::CorrOffDiag { .. } => offdiag_bound(self.mean(), self.delta, self.h, self.p),
            ConstraintKind::Out { r } => Ok(out_cost(r, self.delta, self.h, self.p)?.f_value),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// min ∫A_h for Trace/Corr; min ∫A_h − log(1/2πh)^{p/2} for Out.
    pub value: f64,
    pub multipliers: Vec<f64>,
    pub newton_steps: usize,
    pub nodes: usize,
}

/// Quadrature nodes: weights, base log-density −|v|²/2h, and feature vectors.
struct Nodes {
    log_w: Vec<f64>,
    features: Vec<Vec<f64>>,
    /// Nodes in the outermost shell (for the box-adequacy check).
    edge: Vec<bool>,
}

fn cartesian_nodes(spec: &ConstraintSpec, spacing: f64, half: f64) -> Nodes {
    let p = spec.p;
    let h = spec.h;
    let center: Vec<f64> = (0..p).map(|k| h * spec.a[k]).collect();
    let count = (half / spacing).ceil() as i64;
    let axis: Vec<f64> = (-count..count).map(|k| (k as f64 + 0.5) * spacing).collect();
    let mut nodes = Nodes {
        log_w: Vec::new(),
        features: Vec::new(),
        edge: Vec::new(),
    };
    let log_cell = p as f64 * spacing.ln();
    let mut push = |v: &[f64], edge: bool| {
        let sq: f64 = v.iter().map(|x| x * x).sum();
        let mut phi: Vec<f64> = v.iter().map(|x| x / h).collect();
        let d: Vec<f64> = (0..p).map(|k| v[k] - center[k]).collect();
        phi.push(match spec.kind {
            ConstraintKind::Trace => d.iter().map(|x| x * x).sum::<f64>() / h,
            ConstraintKind::CorrDiag { i } => d[i] * d[i] / h,
            ConstraintKind::CorrOffDiag { i, j } => d[i] * d[j] / h,
            ConstraintKind::Out { .. } => unreachable!("tail constraints use radial nodes"),
        });
        nodes.log_w.push(log_cell - sq / (2.0 * h));
        nodes.features.push(phi);
        nodes.edge.push(edge);
    };
    let last = axis.len() - 1;
    if p == 1 {
        for (k, &x) in axis.iter().enumerate() {
            push(&[center[0] + x], k == 0 || k == last);
        }
    } else {
        for (k1, &x) in axis.iter().enumerate() {
            for (k2, &y) in axis.iter().enumerate() {
                let edge = k1 == 0 || k1 == last || k2 == 0 || k2 == last;
                push(&[center[0] + x, center[1] + y], edge);
            }
        }
    }
    nodes
}

/// Radial midpoint nodes with r on a shell boundary.
fn radial_nodes(spec: &ConstraintSpec, r: f64, spacing: f64, reach: f64) -> Nodes {
    let h = spec.h;
    let step = r / (r / spacing).ceil();
    let count = ((r + reach) / step).ceil() as usize;
    let mut nodes = Nodes {
        log_w: Vec::with_capacity(count),
        features: Vec::with_capacity(count),
        edge: Vec::with_capacity(count),
    };
    for k in 0..count {
        let rho = (k as f64 + 0.5) * step;
        nodes.log_w.push((surface(spec.p, rho) * step).ln() - rho * rho / (2.0 * h));
        let tail = if rho > r { rho * rho / (2.0 * h) } else { 0.0 };
        nodes.features.push(vec![tail]);
        nodes.edge.push(k + 1 == count);
    }
    nodes
}

/// Newton ascent of the dual; returns (value, θ, steps, relative edge mass).
fn maximize_dual(nodes: &Nodes, target: &[f64], theta0: Vec<f64>) -> Result<(f64, Vec<f64>, usize, f64)> {
    let d = target.len();
    let n = nodes.log_w.len();
    let mut buf = vec![0.0; n];
    let exponent = |theta: &[f64], buf: &mut Vec<f64>| {
        for k in 0..n {
            buf[k] = nodes.log_w[k] + nodes.features[k].iter().zip(theta).map(|(f, t)| f * t).sum::<f64>();
        }
    };
    let dual = |theta: &[f64], buf: &mut Vec<f64>| {
        exponent(theta, buf);
        let lz = log_sum_exp(buf);
        theta.iter().zip(target).map(|(t, c)| t * c).sum::<f64>() - lz
    };
    let mut theta = theta0;
    let mut value = dual(&theta, &mut buf);
    let mut steps = 0;
    loop {
        exponent(&theta, &mut buf);
        let lz = log_sum_exp(&buf);
        let mut mean = DVector::zeros(d);
        let mut second = DMatrix::zeros(d, d);
        let mut edge = 0.0;
        for k in 0..n {
            let g = (buf[k] - lz).exp();
            if g == 0.0 {
                continue;
            }
            if nodes.edge[k] {
                edge += g;
            }
            let f = &nodes.features[k];
            for a in 0..d {
                mean[a] += g * f[a];
                for b in 0..d {
                    second[(a, b)] += g * f[a] * f[b];
                }
            }
        }
        let cov = &second - &mean * mean.transpose();
        let grad = DVector::from_column_slice(target) - &mean;
        let scale = target.iter().map(|c| c.abs()).fold(1.0, f64::max);
        if grad.amax() <= GRAD_TOLERANCE * scale {
            return Ok((value, theta, steps, edge));
        }
        if steps >= MAX_NEWTON {
            return Err(Error::NotConverged {
                iterations: steps,
                residual: grad.amax(),
            });
        }
        steps += 1;
        let step = match cov.clone().cholesky() {
            Some(chol) => chol.solve(&grad),
            None => grad.clone(),
        };
        let slope = grad.dot(&step);
        // Half the Newton decrement estimates the remaining dual gap.
        if 0.5 * slope <= DECREMENT_TOLERANCE * value.abs().max(1.0) && grad.amax() <= STALL_TOLERANCE * scale {
            return Ok((value, theta, steps, edge));
        }
        let mut alpha = 1.0;
        loop {
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + alpha * s).collect();
            let v = dual(&trial, &mut buf);
            if v.is_finite() && v >= value + 1e-4 * alpha * slope - 1e-15 * value.abs() {
                theta = trial;
                value = v;
                break;
            }
            alpha *= 0.5;
            if alpha < 1e-12 {
                // Stalled at rounding level: the value is exact to second order in the residual.
                if grad.amax() <= STALL_TOLERANCE * scale {
                    return Ok((value, theta, steps, edge));
                }
                return Err(Error::NotConverged {
                    iterations: steps,
                    residual: grad.amax(),
                });
            }
        }
    }
}

/// Minimizes the discrete A_h functional under `spec` on a grid with `vgrid` nodes per √h.
pub fn oracle_constrained_min(spec: &ConstraintSpec, vgrid: usize) -> Result<OracleResult> {
    spec.validate()?;
    if vgrid < MIN_RESOLUTION {
        return Err(invalid(
            "vgrid",
            format!("need at least {MIN_RESOLUTION} nodes per √h, got {vgrid}"),
        ));
    }
    let (p, h, delta) = (spec.p, spec.h, spec.delta);
    let spacing = h.sqrt() / vgrid as f64;
    let mut target: Vec<f64> = match spec.kind {
        ConstraintKind::Out { .. } => Vec::new(),
        _ => spec.mean().to_vec(),
    };
    target.push(match spec.kind {
        ConstraintKind::Trace => p as f64 * delta,
        _ => delta,
    });
    // Warm start at the closed-form multipliers where known.
    let theta0: Vec<f64> = match spec.kind {
        ConstraintKind::Trace | ConstraintKind::CorrDiag { .. } => {
            let mut t: Vec<f64> = spec.mean().iter().map(|a| h * a).collect();
            t.push(0.5 * (1.0 - 1.0 / delta));
            t
        }
        ConstraintKind::CorrOffDiag { .. } => {
            let mut t: Vec<f64> = spec.mean().iter().map(|a| h * a).collect();
            t.push(eta_alpha(delta)?.0);
            t
        }
        ConstraintKind::Out { .. } => vec![0.0],
    };
    // Standard deviation scale of the expected minimizer.
    let sigma = match spec.kind {
        ConstraintKind::Trace | ConstraintKind::CorrDiag { .. } => (h * delta.max(1.0)).sqrt(),
        ConstraintKind::CorrOffDiag { .. } => (h / eta_alpha(delta)?.1).sqrt(),
        ConstraintKind::Out { .. } => (h * (1.0 + 2.0 * delta)).sqrt(),
    };
    let mut reach = 10.0 * sigma;
    for _ in 0..MAX_BOX_GROWTH {
        let nodes = match spec.kind {
            ConstraintKind::Out { r } => radial_nodes(spec, r, spacing, reach),
            _ => cartesian_nodes(spec, spacing, reach),
        };
        let (value, theta, steps, edge) = maximize_dual(&nodes, &target, theta0.clone())?;
        if edge <= EDGE_MASS {
            let value = match spec.kind {
                ConstraintKind::Out { .. } => value - 0.5 * p as f64 * (1.0 / (2.0 * PI * h)).ln(),
                _ => value,
            };
            return Ok(OracleResult {
                value,
                multipliers: theta,
                newton_steps: steps,
                nodes: nodes.log_w.len(),
            });
        }
        reach *= 1.5;
    }
    Err(Error::SearchExhausted(format!(
        "velocity box still carries mass at its edge after {MAX_BOX_GROWTH} enlargements"
    )))
}

/// Which gap function of the appendix a fit refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapKind {
    Trace,
    Diag,
    OffDiag,
}

/// Constants of the two-regime lower bound gap(δ) ≥ D₁·{quadratic near the minimizer, linear
/// in the tail}, with least-squares checks of both regimes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapFit {
    pub kind: GapKind,
    /// Largest D₁ valid on the whole δ grid.
    pub d1: f64,
    /// Curvature c of gap ≈ c·x² near the minimizer (x = δ − δ*).
    pub curvature: f64,
    /// Relative RMS residual of the quadratic fit.
    pub quadratic_residual: f64,
    /// Slope of the affine tail fit gap ≈ c₀ + c₁·δ.
    pub slope: f64,
    /// Relative RMS residual of the affine tail fit.
    pub linear_residual: f64,
}

fn gap_value(kind: GapKind, delta: f64, p: usize) -> Result<f64> {
    match kind {
        GapKind::Trace => gap_trace(delta, p),
        GapKind::Diag => gap_diag(delta),
        GapKind::OffDiag => gap_offdiag(delta),
    }
}

/// Fits the gap inequalities on a geometric δ grid over `range`.
pub fn fit_gap(kind: GapKind, p: usize, range: (f64, f64), points: usize) -> Result<GapFit> {
    if !(range.0 > 0.0 && range.1 > range.0) || points < 8 {
        return Err(invalid("range", "need 0 < lo < hi and at least 8 points"));
    }
    let (minimizer, switch) = match kind {
        GapKind::Trace | GapKind::Diag => (1.0, 2.0),
        GapKind::OffDiag => (0.0, 1.0),
    };
    let ratio = (range.1 / range.0).powf(1.0 / (points - 1) as f64);
    let mut d1 = f64::INFINITY;
    for k in 0..points {
        let delta = range.0 * ratio.powi(k as i32);
        let x = delta - minimizer;
        let model = if delta <= switch { x * x } else { x };
        if model > 0.0 {
            d1 = d1.min(gap_value(kind, delta, p)? / model);
        }
    }
    // Quadratic regime on a window symmetric about the minimizer (one-sided at δ* = 0).
    let window = 0.05;
    let xs: Vec<f64> = (0..=40)
        .map(|k| {
            let s = k as f64 / 40.0;
            if minimizer > 0.0 {
                window * (2.0 * s - 1.0)
            } else {
                window * s
            }
        })
        .filter(|x| *x != 0.0)
        .collect();
    let ys = xs
        .iter()
        .map(|x| gap_value(kind, minimizer + x, p))
        .collect::<Result<Vec<_>>>()?;
    let curvature = xs.iter().zip(&ys).map(|(x, y)| x * x * y).sum::<f64>() / xs.iter().map(|x| x.powi(4)).sum::<f64>();
    let quadratic_residual = relative_rms(&ys, xs.iter().map(|x| curvature * x * x));
    // Linear regime over the upper half (in log scale) of the tail.
    let lo = (switch.max(range.0) * range.1).sqrt();
    let tail: Vec<f64> = (0..=40).map(|k| lo * (range.1 / lo).powf(k as f64 / 40.0)).collect();
    let ty = tail.iter().map(|&d| gap_value(kind, d, p)).collect::<Result<Vec<_>>>()?;
    let n = tail.len() as f64;
    let (mx, my) = (tail.iter().sum::<f64>() / n, ty.iter().sum::<f64>() / n);
    let sxx: f64 = tail.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = tail.iter().zip(&ty).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let linear_residual = relative_rms(&ty, tail.iter().map(|x| intercept + slope * x));
    Ok(GapFit {
        kind,
        d1,
        curvature,
        quadratic_residual,
        slope,
        linear_residual,
    })
}

fn relative_rms(values: &[f64], model: impl Iterator<Item = f64>) -> f64 {
    let (mut res, mut norm) = (0.0, 0.0);
    for (v, m) in values.iter().zip(model) {
        res += (v - m).powi(2);
        norm += v * v;
    }
    (res / norm).sqrt()
}
