mod common;

use std::f64::consts::PI;

use approx::assert_abs_diff_eq;
use common::{normal, simpson};
use fpcost_core::*;
use proptest::prelude::*;

/// A_h value ∫(|v|²/2h + ln γ)γ of the isotropic Gaussian N(ha, hδ·Id), by quadrature.
fn a_h_of_gaussian(a: &[f64], delta: f64, h: f64) -> f64 {
    let var = h * delta;
    let l = 12.0 * var.sqrt() + h * a.iter().map(|x| x.abs()).fold(0.0, f64::max);
    // Separable: the integrand splits into a sum of one-dimensional terms.
    a.iter()
        .map(|&ai| {
            let mean = h * ai;
            simpson(
                |v| {
                    let g = normal(v - mean, var);
                    if g == 0.0 {
                        0.0
                    } else {
                        (v * v / (2.0 * h) + g.ln()) * g
                    }
                },
                -l,
                l,
                20_000,
            )
        })
        .sum()
}

#[test]
fn gaussian_density_examples() {
    let g1 = GaussianSpec::isotropic(1, [0.0; 2], 1.0).unwrap();
    assert_abs_diff_eq!(g1.density([0.0, 0.0]), 0.398942, epsilon = 1e-6);
    let g2 = GaussianSpec::isotropic(2, [0.0; 2], 1.0).unwrap();
    assert_abs_diff_eq!(g2.density([0.0, 0.0]), 0.159155, epsilon = 1e-6);
    let q = [[0.5, 0.1], [0.1, 0.3]];
    let g = GaussianSpec::new(2, [0.2, -0.1], q).unwrap();
    let det: f64 = 0.5 * 0.3 - 0.01;
    assert_abs_diff_eq!(g.density([0.2, -0.1]), 1.0 / (2.0 * PI * det.sqrt()), epsilon = 1e-12);
    assert!(GaussianSpec::new(2, [0.0; 2], [[1.0, 2.0], [2.0, 1.0]]).is_err());
    assert!(GaussianSpec::isotropic(1, [0.0; 2], 0.0).is_err());
}

#[test]
fn gaussian_density_integrates_to_one() {
    let g = GaussianSpec::new(2, [0.3, -0.2], [[0.4, 0.15], [0.15, 0.2]]).unwrap();
    let total = simpson(
        |x| simpson(|y| g.density([x, y]), -5.0, 5.0, 400),
        -5.0,
        5.0,
        400,
    );
    assert_abs_diff_eq!(total, 1.0, epsilon = 1e-8);
}

#[test]
fn wrapped_heat_kernel_examples() {
    let g = TorusGrid::new(1, 64, 0.01).unwrap();
    let k = wrapped_heat_kernel(&g, 0.01).unwrap();
    let row = k.wrapped_row(10);
    // Midpoint-sampled wrapped density, normalized; within 1e-3 of the cell-integrated masses.
    let sampled: Vec<f64> = (0..64)
        .map(|o| {
            let d = if o <= 32 { o as f64 } else { o as f64 - 64.0 } / 64.0;
            (-20..=20).map(|m| normal(d + m as f64, 0.01)).sum::<f64>()
        })
        .collect();
    let total: f64 = sampled.iter().sum();
    let integrated = common::wrapped_cells(64, 0.01);
    for offset in 0..64 {
        let m = row[(10 + offset) % 64];
        assert_abs_diff_eq!(m, sampled[offset] / total, epsilon = 1e-12);
        assert!((m - integrated[offset]).abs() <= 1e-4);
    }
    let shifted: Vec<f64> = (0..64).map(|o| row[(10 + o) % 64]).collect();
    assert!(common::tv(&shifted, &integrated) <= 1e-3);
    let tail: f64 = k
        .row(10)
        .iter()
        .filter(|j| {
            let d = g.displacement(10, j.target, j.lift)[0].abs();
            d > 3.0 * 0.1 + 1.0 / 64.0
        })
        .map(|j| j.mass)
        .sum();
    assert!(tail < 3e-3, "mass beyond 3√h: {tail}");

    // Large h needs an explicit lift window beyond the automatic cap.
    let g = TorusGrid::with_lift_radius(1, 32, 8).unwrap();
    let k = wrapped_heat_kernel(&g, 1.0).unwrap();
    for w in k.wrapped_row(0) {
        assert_abs_diff_eq!(w, 1.0 / 32.0, epsilon = 1e-6);
    }
    let small = TorusGrid::with_lift_radius(1, 32, 3).unwrap();
    assert!(matches!(wrapped_heat_kernel(&small, 0.5), Err(Error::LiftWindowTooSmall { .. })));
}

#[test]
fn wrapped_heat_kernel_keeps_uniform() {
    for (dim, n, h) in [(1, 50, 0.003), (1, 16, 0.2), (2, 12, 0.01)] {
        let g = TorusGrid::new(dim, n, h).unwrap();
        let out = push_forward(&GridMeasure::uniform(g), &wrapped_heat_kernel(&g, h).unwrap()).unwrap();
        for w in out.weights() {
            assert_abs_diff_eq!(*w, 1.0 / g.cells() as f64, epsilon = 1e-12);
        }
    }
}

#[test]
fn trace_bound_examples() {
    assert_abs_diff_eq!(trace_bound(&[0.0], 1.0, 1.0, 1).unwrap(), -0.918939, epsilon = 1e-6);
    let expected = 0.25 + (1.0 / PI).ln();
    assert_abs_diff_eq!(trace_bound(&[1.0, 0.0], 1.0, 0.5, 2).unwrap(), expected, epsilon = 1e-15);
    assert_abs_diff_eq!(expected, -0.89473, epsilon = 1e-5);
    assert!(trace_bound(&[0.0], 0.0, 1.0, 1).is_err());
    assert!(trace_bound(&[0.0], -1.0, 1.0, 1).is_err());
}

#[test]
fn trace_bound_attained_by_gaussian() {
    for (a, delta, h) in [
        (vec![0.0], 1.0, 0.5),
        (vec![0.7], 0.4, 0.1),
        (vec![-1.5], 3.0, 0.05),
        (vec![0.3, -0.8], 1.7, 0.2),
        (vec![0.0, 2.0], 0.2, 0.01),
    ] {
        let p = a.len();
        let closed = trace_bound(&a, delta, h, p).unwrap();
        assert_abs_diff_eq!(a_h_of_gaussian(&a, delta, h), closed, epsilon = 1e-6);
    }
}

#[test]
fn diag_and_offdiag_examples() {
    for (a, h, p) in [(vec![0.3], 0.1, 1), (vec![1.0, -2.0], 0.5, 2), (vec![0.0, 0.0], 0.02, 2)] {
        assert_abs_diff_eq!(
            diag_bound(&a, 1.0, h, p).unwrap(),
            trace_bound(&a, 1.0, h, p).unwrap(),
            epsilon = 1e-14
        );
    }
    let a = [0.4, -0.3];
    let h = 0.2;
    let expected = 0.5 * h * (0.16 + 0.09) + (1.0 / (2.0 * PI * h)).ln();
    assert_abs_diff_eq!(offdiag_bound(&a, 0.0, h, 2).unwrap(), expected, epsilon = 1e-14);
    assert!(offdiag_bound(&a, -0.1, h, 2).is_err());
    assert!(offdiag_bound(&[0.0], 0.5, h, 1).is_err());
    assert!(diag_bound(&a, 0.0, h, 2).is_err());
}

/// The diagonal minimizer: variance hδ along axis i, h elsewhere.
#[test]
fn diag_bound_attained_by_gaussian() {
    let (a, delta, h) = ([0.5, -1.0], 2.5, 0.1);
    let along = a_h_of_gaussian(&a[..1], delta, h);
    let across = a_h_of_gaussian(&a[1..], 1.0, h);
    assert_abs_diff_eq!(along + across, diag_bound(&a, delta, h, 2).unwrap(), epsilon = 1e-6);
}

/// The off-diagonal minimizer is N(ha, hQ) with Q = [[1, η], [η, 1]]/(1 − η²).
#[test]
fn offdiag_bound_attained_by_gaussian() {
    let (a, delta, h) = ([0.5, -1.0], 0.8, 0.1);
    let (eta, alpha) = eta_alpha(delta).unwrap();
    let q = [[h / alpha, h * eta / alpha], [h * eta / alpha, h / alpha]];
    let g = GaussianSpec::new(2, [h * a[0], h * a[1]], q).unwrap();
    let l = 12.0 * (h / alpha).sqrt();
    let integrand = |x: f64, y: f64| {
        let d = g.density([x, y]);
        if d == 0.0 {
            0.0
        } else {
            ((x * x + y * y) / (2.0 * h) + d.ln()) * d
        }
    };
    let value = simpson(|x| simpson(|y| integrand(x, y), -l, l, 600), -l, l, 600);
    // The achieved correlation (1/h)∫(v₁ − ha₁)(v₂ − ha₂)γ equals δ.
    assert_abs_diff_eq!(q[0][1] / h, delta, epsilon = 1e-12);
    assert_abs_diff_eq!(value, offdiag_bound(&a, delta, h, 2).unwrap(), epsilon = 1e-6);
}

#[test]
fn eta_alpha_examples() {
    assert_eq!(eta_alpha(0.0).unwrap(), (0.0, 1.0));
    let (eta, alpha) = eta_alpha(2f64.sqrt()).unwrap();
    assert_abs_diff_eq!(eta, 1.0 / 2f64.sqrt(), epsilon = 1e-15);
    assert_abs_diff_eq!(alpha, 0.5, epsilon = 1e-15);
    let (eta, _) = eta_alpha(0.75).unwrap();
    assert_abs_diff_eq!(eta, (-1.0 + 3.25f64.sqrt()) / 1.5, epsilon = 1e-15);
    assert_abs_diff_eq!(eta / (1.0 - eta * eta), 0.75, epsilon = 1e-14);
    assert!(eta_alpha(-0.1).is_err());
}

#[test]
fn gap_examples() {
    for p in [1, 2, 3] {
        assert_eq!(gap_trace(1.0, p).unwrap(), 0.0);
    }
    assert_abs_diff_eq!(gap_trace(2.0, 1).unwrap(), 0.5 - 0.5 * 2f64.ln(), epsilon = 1e-15);
    assert_abs_diff_eq!(gap_trace(2.0, 1).unwrap(), 0.153426, epsilon = 1e-6);
    assert_eq!(gap_offdiag(0.0).unwrap(), 0.0);
    let mut previous = 0.0;
    for k in 0..=1000 {
        let g = gap_offdiag(k as f64 * 0.01).unwrap();
        assert!(g >= previous - 1e-15);
        previous = g;
    }
    assert!(gap_trace(0.0, 1).is_err());
    assert!(gap_diag(-1.0).is_err());
    assert!(gap_offdiag(-1.0).is_err());
}

#[test]
fn gaps_do_not_depend_on_the_mean() {
    for delta in [0.1, 0.9, 4.0] {
        for (a, b) in [([0.0, 0.0], [1.3, -0.4]), ([2.0, 0.5], [-0.1, 0.0])] {
            let h = 0.3;
            let t = |m: &[f64]| trace_bound(m, delta, h, 2).unwrap() - trace_bound(m, 1.0, h, 2).unwrap();
            let d = |m: &[f64]| diag_bound(m, delta, h, 2).unwrap() - diag_bound(m, 1.0, h, 2).unwrap();
            let o = |m: &[f64]| offdiag_bound(m, delta, h, 2).unwrap() - offdiag_bound(m, 0.0, h, 2).unwrap();
            assert_abs_diff_eq!(t(&a), t(&b), epsilon = 1e-12);
            assert_abs_diff_eq!(t(&a), gap_trace(delta, 2).unwrap(), epsilon = 1e-12);
            assert_abs_diff_eq!(d(&a), d(&b), epsilon = 1e-12);
            assert_abs_diff_eq!(d(&a), gap_diag(delta).unwrap(), epsilon = 1e-12);
            assert_abs_diff_eq!(o(&a), o(&b), epsilon = 1e-12);
            assert_abs_diff_eq!(o(&a), gap_offdiag(delta).unwrap(), epsilon = 1e-12);
        }
    }
}

/// Fitted constants c > 0 with gap ≥ c·min(|δ − δ*|², |δ − δ*|) over δ ∈ [0.05, 20].
#[test]
fn gap_inequalities_have_positive_constants() {
    let deltas: Vec<f64> = (0..=400).map(|k| 0.05 * (400.0f64).powf(k as f64 / 400.0)).collect();
    let fit = |gap: &dyn Fn(f64) -> f64, centre: f64| {
        deltas
            .iter()
            .filter(|&&d| (d - centre).abs() > 1e-9)
            .map(|&d| {
                let x = (d - centre).abs();
                gap(d) / (x * x).min(x)
            })
            .fold(f64::INFINITY, f64::min)
    };
    let c_trace = fit(&|d| gap_trace(d, 1).unwrap(), 1.0);
    let c_trace2 = fit(&|d| gap_trace(d, 2).unwrap(), 1.0);
    let c_diag = fit(&|d| gap_diag(d).unwrap(), 1.0);
    let c_off = fit(&|d| gap_offdiag(d).unwrap(), 0.0);
    for c in [c_trace, c_trace2, c_diag, c_off] {
        assert!(c > 1e-3, "fitted constant {c}");
    }
}

#[test]
fn bar_delta_limits() {
    assert!(bar_delta(1e4, 1.0, 0.1, 1).unwrap() < 1e-8);
    assert!(bar_delta(-1.0 + 1e-4, 1.0, 0.1, 1).unwrap() > 1e3);
    assert!(bar_delta(-1.0, 1.0, 0.1, 1).is_err());
    // η = 0 is the plain heat kernel: (1/2h)∫_{|v|>1} v² N(0, h).
    let h: f64 = 0.1;
    let oracle = 2.0 * simpson(|v| v * v * normal(v, h), 1.0, 1.0 + 20.0 * h.sqrt(), 20_000) / (2.0 * h);
    let value = bar_delta(0.0, 1.0, h, 1).unwrap();
    assert!((value - oracle).abs() <= 1e-8 * oracle, "{value} vs {oracle}");
}

#[test]
fn bar_delta_is_strictly_decreasing() {
    for (r, h, p) in [(1.0, 0.1, 1), (0.5, 0.05, 2), (1.0, 0.2, 2)] {
        let values: Vec<f64> = (0..200)
            .map(|k| -0.99 + 0.05 * k as f64)
            .map(|eta| bar_delta(eta, r, h, p).unwrap())
            .collect();
        assert!(values.windows(2).all(|w| w[1] < w[0]), "r={r} h={h} p={p}");
    }
}

/// Minimizer density γ_η ∝ exp(−|v|²(1 + η·1_{|v|>r})/2h), evaluated by quadrature on each
/// side of the sphere |v| = r.
fn tail_oracle(r: f64, eta: f64, h: f64, p: usize) -> (f64, f64, f64) {
    let jac = |s: f64| if p == 1 { 2.0 } else { 2.0 * PI * s };
    let inner = |s: f64| (-(s * s) / (2.0 * h)).exp();
    let outer = |s: f64| (-(s * s) * (1.0 + eta) / (2.0 * h)).exp();
    let r_max = r + 40.0 * (h / (1.0 + eta)).sqrt();
    let z = simpson(|s| jac(s) * inner(s), 0.0, r, 20_000) + simpson(|s| jac(s) * outer(s), r, r_max, 20_000);
    let tail = simpson(|s| jac(s) * s * s * outer(s), r, r_max, 20_000) / (2.0 * h * z);
    // I(γ) = −η·δ̄ − ln Z; F = I − ln(1/2πh)^{p/2}.
    let f = -eta * tail - z.ln() + 0.5 * p as f64 * (2.0 * PI * h).ln();
    (z, tail, f)
}

#[test]
fn out_cost_matches_quadrature() {
    for (r, delta, h, p) in [(1.0, 0.5, 0.1, 1), (1.0, 0.05, 0.1, 1), (0.5, 0.3, 0.05, 2), (1.0, 2.0, 0.2, 1)] {
        let res = out_cost(r, delta, h, p).unwrap();
        assert!(res.eta > -1.0 && res.bar_delta > 0.0);
        assert!((res.bar_delta - delta).abs() <= 1e-8 * delta);
        let (_, tail, f) = tail_oracle(r, res.eta, h, p);
        assert!((tail - delta).abs() <= 1e-6 * delta, "tail {tail} vs {delta}");
        assert!((f - res.f_value).abs() <= 1e-6 * res.f_value.abs().max(1e-3), "{f} vs {}", res.f_value);
    }
}

#[test]
fn out_cost_vanishes_at_the_free_tail() {
    for (r, h, p) in [(1.0, 0.1, 1), (0.5, 0.05, 2)] {
        let free = bar_delta(0.0, r, h, p).unwrap();
        let res = out_cost(r, free, h, p).unwrap();
        assert!(res.f_value.abs() < 1e-9, "{}", res.f_value);
        assert!(res.eta.abs() < 1e-6);
        for scale in [0.5, 2.0] {
            assert!(out_cost(r, free * scale, h, p).unwrap().f_value >= 0.0);
        }
    }
    assert!(matches!(out_cost(1.0, 1e14, 0.1, 1), Err(Error::OutOfRange { .. })));
}

#[test]
fn tail_threshold_properties() {
    let hs = [0.2, 0.1, 0.05, 0.025];
    let d0: Vec<f64> = hs.iter().map(|&h| delta0(1.0, h, 1).unwrap()).collect();
    assert!(d0.windows(2).all(|w| w[1] < w[0]), "{d0:?}");
    for (&h, &d) in hs.iter().zip(&d0) {
        for k in 0..40 {
            let delta = d * 10f64.powf(k as f64 / 10.0);
            if delta > 100.0 {
                break;
            }
            assert!(out_cost(1.0, delta, h, 1).unwrap().f_value >= delta / 2.0 - 1e-12);
        }
    }
    let doubled = 2.0 * d0[1];
    assert!(out_cost(1.0, doubled, 0.1, 1).unwrap().f_value >= doubled / 2.0);
    assert!(delta0(0.5, 0.1, 1).unwrap() >= d0[1]);
    for (&h, &d) in hs.iter().zip(&d0).skip(1) {
        let halved = delta0(1.0, h / 2.0, 1).unwrap();
        assert!(halved <= d * 1.1, "h={h}: {halved} vs {d}");
    }
}

proptest! {
    #[test]
    fn eta_alpha_solves_the_quadratic(exp in -6.0f64..3.0) {
        let delta = 10f64.powf(exp);
        let (eta, alpha) = eta_alpha(delta).unwrap();
        prop_assert!((0.0..1.0).contains(&eta));
        prop_assert!(alpha > 0.0 && alpha <= 1.0);
        prop_assert!((eta / (1.0 - eta * eta) - delta).abs() <= 1e-12 * delta.max(1.0));
    }

    #[test]
    fn trace_gap_is_nonnegative(delta in 0.01f64..50.0, p in 1usize..4) {
        prop_assert!(gap_trace(delta, p).unwrap() >= 0.0);
        prop_assert!(gap_diag(delta).unwrap() >= 0.0);
        prop_assert!(gap_offdiag(delta).unwrap() >= 0.0);
    }
}
