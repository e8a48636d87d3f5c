//! Independent numerical oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

/// Composite Simpson rule with `panels` (even) subintervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let panels = panels + panels % 2;
    let w = (b - a) / panels as f64;
    let mut sum = f(a) + f(b);
    for k in 1..panels {
        sum += f(a + k as f64 * w) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * w / 3.0
}

/// ∫_{ℝ^p} g(|v|) dv for a radial profile, split at `breaks` (p ∈ {1, 2}).
pub fn radial(p: usize, g: impl Fn(f64) -> f64, breaks: &[f64], r_max: f64) -> f64 {
    let mut nodes = vec![0.0];
    nodes.extend(breaks.iter().copied().filter(|&b| b > 0.0 && b < r_max));
    nodes.push(r_max);
    let weight = |r: f64| if p == 1 { 2.0 } else { 2.0 * PI * r };
    nodes
        .windows(2)
        .map(|w| simpson(|r| weight(r) * g(r), w[0], w[1], 4000))
        .sum()
}

/// Normal density N(0, var) in one dimension.
pub fn normal(x: f64, var: f64) -> f64 {
    (-0.5 * x * x / var).exp() / (2.0 * PI * var).sqrt()
}

/// Wrapped normal N(0, var) integrated over cells of width 1/n, offsets 0..n.
pub fn wrapped_cells(n: usize, var: f64) -> Vec<f64> {
    let cdf = |x: f64| 0.5 * statrs::function::erf::erfc(-x / (2.0 * var).sqrt());
    let w = 1.0 / n as f64;
    (0..n)
        .map(|k| {
            (-20..=20)
                .map(|m| {
                    let centre = k as f64 * w + m as f64;
                    cdf(centre + 0.5 * w) - cdf(centre - 0.5 * w)
                })
                .sum()
        })
        .collect()
}

/// Total variation Σ|a − b|/2.
pub fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
