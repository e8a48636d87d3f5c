//! Adaptive Simpson quadrature and the radial Gaussian integrals built on it.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const MAX_DEPTH: u32 = 60;

/// ∫_a^b f by adaptive Simpson with relative tolerance `rel_tol`.
pub fn adaptive_simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    // A coarse composite pass fixes the absolute scale and keeps narrow peaks from being missed.
    let pieces = 64;
    let step = (b - a) / pieces as f64;
    let mut coarse = Vec::with_capacity(pieces);
    let mut scale = 0.0;
    for k in 0..pieces {
        let (x0, x1) = (a + k as f64 * step, a + (k + 1) as f64 * step);
        let (f0, fm, f1) = (f(x0), f(0.5 * (x0 + x1)), f(x1));
        let s = (x1 - x0) / 6.0 * (f0 + 4.0 * fm + f1);
        scale += s.abs();
        coarse.push((x0, x1, f0, fm, f1, s));
    }
    let tol = rel_tol * scale.max(f64::MIN_POSITIVE) / pieces as f64;
    let mut total = 0.0;
    for (x0, x1, f0, fm, f1, s) in coarse {
        total += refine(&f, x0, x1, f0, fm, f1, s, tol, MAX_DEPTH)?;
    }
    if total.is_finite() {
        Ok(total)
    } else {
        Err(Error::Quadrature { lo: a, hi: b })
    }
}

#[allow(clippy::too_many_arguments)]
fn refine(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(Error::Quadrature { lo: a, hi: b });
    }
    Ok(refine(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?
        + refine(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
}

/// Surface factor of the radial measure: ∫_{ℝ^p} f(|v|) dv = ∫_0^∞ f(ρ) s_p(ρ) dρ.
pub fn surface(p: usize, rho: f64) -> f64 {
    if p == 1 {
        2.0
    } else {
        2.0 * PI * rho
    }
}

/// ∫_{|y|<y_max} e^{−|y|²/2} dy in ℝ^p.
pub fn gaussian_ball(p: usize, y_max: f64) -> Result<f64> {
    let upper = y_max.min(40.0);
    adaptive_simpson(|y| (-0.5 * y * y).exp() * surface(p, y), 0.0, upper, 1e-13)
}

/// e^{y₀²/2}·∫_{|y|>y₀} |y|^k e^{−|y|²/2} dy in ℝ^p (scaled to stay representable).
pub fn scaled_gaussian_tail(p: usize, y0: f64, k: i32) -> Result<f64> {
    let y0 = y0.max(0.0);
    adaptive_simpson(
        |y| y.powi(k) * (-0.5 * (y - y0) * (y + y0)).exp() * surface(p, y),
        y0,
        y0 + 12.0,
        1e-13,
    )
}
