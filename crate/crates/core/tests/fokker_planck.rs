mod common;

use std::f64::consts::PI;

use fpcost_core::harness::config::bump;
use fpcost_core::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid1(n: usize) -> TorusGrid {
    TorusGrid::with_lift_radius(1, n, 1).unwrap()
}

fn zero(grid: TorusGrid) -> DriftField {
    DriftField::constant(grid, [0.0; 2])
}

fn random_measure(grid: TorusGrid, rng: &mut ChaCha8Rng) -> GridMeasure {
    let raw: Vec<f64> = (0..grid.cells()).map(|_| rng.random_range(0.0..1.0)).collect();
    GridMeasure::normalized(grid, raw).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn heat_spike_matches_the_wrapped_gaussian() {
    let grid = grid1(128);
    let spike = GridMeasure::dirac(grid, 0).unwrap();
    let path = fp_solve(&spike, &zero(grid), (0.0, 0.1), 1e-3).unwrap();
    let oracle = common::wrapped_cells(128, 0.1);
    let last = path.frames().last().unwrap();
    // Cells are centred at (i + ½)/n; the spike sits at the centre of cell 0.
    let tv = common::tv(last.weights(), &oracle);
    assert!(tv <= 1e-3, "tv {tv}");
}

#[test]
fn constant_drift_keeps_uniform() {
    for (dim, n) in [(1, 32), (2, 8)] {
        let grid = TorusGrid::with_lift_radius(dim, n, 1).unwrap();
        let u = GridMeasure::uniform(grid);
        let drift = DriftField::constant(grid, [0.5, -0.3]);
        let path = fp_solve(&u, &drift, (0.0, 0.5), 1.0 / 128.0).unwrap();
        for f in path.frames() {
            assert!(max_diff(f.weights(), u.weights()) <= 1e-14);
        }
    }
}

/// The discrete stationary state of a sine drift against the quadrature of exp(2∫X).
#[test]
fn sine_drift_relaxes_to_the_stationary_density() {
    let (n, c) = (128, 0.5);
    let grid = grid1(n);
    let drift = DriftField::sine(grid, [-c, 0.0]);
    let path = fp_solve(&GridMeasure::uniform(grid), &drift, (0.0, 3.0), 1.0 / 128.0).unwrap();
    let density = |x: f64| (-2.0 * c * (1.0 - (2.0 * PI * x).cos()) / (2.0 * PI)).exp();
    let masses: Vec<f64> = (0..n)
        .map(|i| common::simpson(density, i as f64 / n as f64, (i + 1) as f64 / n as f64, 16))
        .collect();
    let total: f64 = masses.iter().sum();
    let oracle: Vec<f64> = masses.iter().map(|m| m / total).collect();
    let tv = common::tv(path.frames().last().unwrap().weights(), &oracle);
    assert!(tv <= 1e-3, "tv {tv}");
}

#[test]
fn fp_solve_validates() {
    let grid = grid1(32);
    let u = GridMeasure::uniform(grid);
    let fast = DriftField::constant(grid, [10.0, 0.0]);
    assert!(matches!(fp_solve(&u, &fast, (0.0, 1.0), 0.01), Err(Error::Stability { .. })));
    assert!(fp_solve(&u, &zero(grid), (0.0, 1.0), 0.3).is_err());
    assert!(fp_solve(&u, &zero(grid), (0.0, 1.0), -0.1).is_err());
    assert!(fp_solve(&u, &zero(grid1(16)), (0.0, 1.0), 0.1).is_err());
}

#[test]
fn transition_kernel_examples() {
    let grid = grid1(64);
    let dt = 1.0 / 256.0;
    let short = transition_kernels(&zero(grid), 0.0, dt, dt).unwrap();
    for x in 0..grid.cells() {
        let peak = short.row(x).iter().cloned().fold(0.0, f64::max);
        assert_eq!(short.row(x)[x], peak);
        assert!((short.row(x).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    let heat = transition_kernels(&zero(grid), 0.0, 0.0625, dt).unwrap();
    let oracle = common::wrapped_cells(64, 0.0625);
    for x in [0, 17, 63] {
        let shifted: Vec<f64> = (0..64).map(|o| heat.row(x)[(x + o) % 64]).collect();
        assert!(common::tv(&shifted, &oracle) <= 1e-3);
    }

    let drift = DriftField::sine(grid, [0.8, 0.0]);
    let k = transition_kernels(&drift, 0.125, 0.3125, dt).unwrap();
    for x in [5, 40] {
        let row_path = fp_solve(&GridMeasure::dirac(grid, x).unwrap(), &drift, (0.125, 0.3125), dt).unwrap();
        assert!(max_diff(k.row(x), row_path.frames().last().unwrap().weights()) <= 1e-12);
    }
    assert!(transition_kernels(&drift, 0.3125, 0.125, dt).is_err());
}

#[test]
fn chapman_kolmogorov() {
    let grid = grid1(32);
    let dt = 1.0 / 128.0;
    let drift = DriftField::sine(grid, [1.0, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..4 {
        let mut stamps = [rng.random_range(0..40), rng.random_range(0..40), rng.random_range(0..40)];
        stamps.sort();
        if stamps[0] == stamps[1] || stamps[1] == stamps[2] {
            continue;
        }
        let [s, u, t] = stamps.map(|k| k as f64 * dt);
        let direct = transition_kernels(&drift, s, t, dt).unwrap();
        let first = transition_kernels(&drift, s, u, dt).unwrap();
        let second = transition_kernels(&drift, u, t, dt).unwrap();
        let composed = compose_kernels(&first, &second).unwrap();
        assert!(composed.max_row_tv(&direct).unwrap() <= 1e-8);
    }
}

#[test]
fn composition_examples() {
    let grid = TorusGrid::new(1, 64, 0.03).unwrap();
    let heat = |h: f64, s: f64| StochasticKernel::from_jump_kernel(&wrapped_heat_kernel(&grid, h).unwrap(), s).unwrap();
    let g1 = heat(0.01, 0.0);
    let g2 = heat(0.02, 0.01);
    let both = compose_kernels(&g1, &g2).unwrap();
    assert!(both.max_row_tv(&heat(0.03, 0.0)).unwrap() <= 1e-6);

    let id = StochasticKernel::identity(grid, 0.0);
    let neutral = compose_kernels(&id, &heat(0.01, 0.0)).unwrap();
    assert!(neutral.max_row_tv(&g1).unwrap() <= 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mu = random_measure(grid, &mut rng);
    let lhs = both.apply(&mu).unwrap();
    let rhs = g2.apply(&g1.apply(&mu).unwrap()).unwrap();
    assert!(max_diff(lhs.weights(), rhs.weights()) <= 1e-12);

    let g3 = heat(0.005, 0.03);
    let left = compose_kernels(&compose_kernels(&g1, &g2).unwrap(), &g3).unwrap();
    let right = compose_kernels(&g1, &compose_kernels(&g2, &g3).unwrap()).unwrap();
    assert!(max_diff(left.matrix(), right.matrix()) <= 1e-12);

    assert!(compose_kernels(&g2, &g1).is_err());
}

#[test]
fn frozen_semigroup_is_exact_for_constant_drift() {
    let grid = grid1(64);
    let dt = 1.0 / 256.0;
    let drift = DriftField::constant(grid, [0.5, 0.0]);
    let mu0 = bump(grid, [0.3, 0.5], 0.05).unwrap();
    let fine = frozen_drift_semigroup(&drift, &mu0, dt, (0.0, 0.5), dt).unwrap();
    for eps in [1.0 / 4.0, 1.0 / 8.0, 1.0 / 32.0] {
        let coarse = frozen_drift_semigroup(&drift, &mu0, eps, (0.0, 0.5), dt).unwrap();
        for (a, b) in coarse.path.frames().iter().zip(fine.path.frames()) {
            assert!(max_diff(a.weights(), b.weights()) <= 1e-12);
        }
    }
    assert!(frozen_drift_semigroup(&drift, &mu0, 1.5 * dt, (0.0, 0.5), dt).is_err());
}

#[test]
fn frozen_semigroup_refines_toward_the_solver() {
    let grid = grid1(64);
    let dt = 1.0 / 256.0;
    let drift = DriftField::sine(grid, [1.0, 0.0]);
    let mu0 = bump(grid, [0.3, 0.5], 0.08).unwrap();
    let exact = fp_solve(&mu0, &drift, (0.0, 1.0), dt).unwrap();
    let gaps: Vec<f64> = [0.25, 0.125, 0.0625]
        .iter()
        .map(|&eps| {
            let frozen = frozen_drift_semigroup(&drift, &mu0, eps, (0.0, 1.0), dt).unwrap();
            path_sup_distance(&frozen.path, &exact).unwrap()
        })
        .collect();
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
}

#[test]
fn sde_moments() {
    let grid = grid1(32);
    let n_paths = 20_000;
    let u = GridMeasure::uniform(grid);
    let run = sde_sample(&zero(grid), &u, (0.0, 0.1), 1e-3, n_paths, 1).unwrap();
    let var = run.displacements.iter().map(|d| d[0] * d[0]).sum::<f64>() / n_paths as f64;
    let sigma = 0.1 * (2.0 / n_paths as f64).sqrt();
    assert!((var - 0.1).abs() <= 3.0 * sigma, "variance {var}");

    let a = 0.5;
    let run = sde_sample(&DriftField::constant(grid, [a, 0.0]), &u, (0.0, 0.1), 1e-3, n_paths, 2).unwrap();
    let mean = run.displacements.iter().map(|d| d[0]).sum::<f64>() / n_paths as f64;
    assert!((mean - a * 0.1).abs() <= 3.0 * (0.1 / n_paths as f64).sqrt(), "mean {mean}");

    let again = sde_sample(&DriftField::constant(grid, [a, 0.0]), &u, (0.0, 0.1), 1e-3, n_paths, 2).unwrap();
    assert_eq!(run.displacements, again.displacements);
    assert!(sde_sample(&zero(grid), &u, (0.0, 0.1), 1e-3, 10, 1).is_err());
}

#[test]
fn sde_agrees_with_the_solver() {
    let grid = grid1(32);
    let drift = DriftField::sine(grid, [0.8, 0.0]);
    let mu0 = bump(grid, [0.5, 0.5], 0.1).unwrap();
    let dt = 1.0 / 512.0;
    let run = sde_sample(&drift, &mu0, (0.0, 0.25), dt, 100_000, 4).unwrap();
    let exact = fp_solve(&mu0, &drift, (0.0, 0.25), dt).unwrap();
    let last = run.path.frames().last().unwrap();
    let d2 = wasserstein(last, exact.frames().last().unwrap(), 2).unwrap().distance;
    assert!(d2 <= 0.05, "d2 {d2}");
    // Coarse-binned total variation within the Monte-Carlo tolerance 3/√N.
    let coarse = |w: &[f64]| w.chunks(4).map(|c| c.iter().sum()).collect::<Vec<f64>>();
    let tv = common::tv(&coarse(last.weights()), &coarse(exact.frames().last().unwrap().weights()));
    assert!(tv <= 3.0 / (100_000f64).sqrt(), "tv {tv}");
}

#[test]
fn weak_residual_examples() {
    let grid = grid1(128);
    let dt = 1e-4;
    let drift = DriftField::sine(grid, [1.0, 0.0]);
    let mu0 = bump(grid, [0.4, 0.5], 0.1).unwrap();
    let path = fp_solve(&mu0, &drift, (0.0, 0.5), dt).unwrap();
    let matched = weak_residual(&path, &drift, 8).unwrap();
    let matched_max = matched.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    assert!(matched_max <= 5e-3, "matched residual {matched_max}");
    let wrong = weak_residual(&path, &drift.shifted([1.0, 0.0]), 8).unwrap();
    // Entry 1 is φ = bump(t)·sin(2πx).
    assert!(wrong[1].abs() >= 10.0 * matched_max, "{} vs {matched_max}", wrong[1]);

    let u = constant_path(&GridMeasure::uniform(grid), 0.0, 0.01, 50).unwrap();
    assert!(weak_residual(&u, &zero(grid), 8).unwrap().iter().all(|r| r.abs() <= 1e-12));
    assert!(weak_residual(&u, &zero(grid), 33).is_err());
    assert!(weak_residual(&u, &zero(grid), 0).is_err());
}

#[test]
fn weak_residual_refines() {
    let drift_of = |g: TorusGrid| DriftField::sine(g, [1.0, 0.0]);
    let residual = |n: usize, dt: f64| {
        let g = grid1(n);
        let mu0 = bump(g, [0.4, 0.5], 0.1).unwrap();
        let path = fp_solve(&mu0, &drift_of(g), (0.0, 0.5), dt).unwrap();
        weak_residual(&path, &drift_of(g), 4).unwrap().iter().fold(0.0f64, |m, r| m.max(r.abs()))
    };
    let coarse = residual(32, 1.0 / 512.0);
    let fine = residual(64, 1.0 / 1024.0);
    // Observed order at least one.
    assert!(fine <= 0.55 * coarse, "{coarse} -> {fine}");
}

/// The heat path sampled from the analytic solution, so its drift is exactly zero.
fn analytic_heat_path(grid: TorusGrid, dt: f64, steps: usize) -> MeasurePath {
    let frames = (0..=steps)
        .map(|k| bump(grid, [0.5, 0.5], (0.1f64 * 0.1 + k as f64 * dt).sqrt()).unwrap())
        .collect();
    MeasurePath::new(0.0, dt, frames).unwrap()
}

#[test]
fn drift_recovery_of_heat_flow() {
    let grid = grid1(64);
    let path = analytic_heat_path(grid, 1.0 / 256.0, 64);
    let rec = drift_recovery(&path, &[1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0], &SinkhornOptions::default()).unwrap();
    let mut sup = 0.0f64;
    for (i, frame) in path.frames().iter().enumerate() {
        for c in 0..grid.cells() {
            if frame.weights()[c] >= 1e-4 {
                sup = sup.max(rec.drift.at_cell(path.time(i), c)[0].abs());
            }
        }
    }
    assert!(sup <= 1e-2, "recovered sup {sup}");
}

#[test]
fn translating_spike_diverges() {
    let grid = grid1(64);
    let dt = 1.0 / 64.0;
    let frames = (0..=16).map(|k| GridMeasure::dirac(grid, k).unwrap()).collect();
    let path = MeasurePath::new(0.0, dt, frames).unwrap();
    let ladder = energy_ladder(&path, &[4.0 * dt, 2.0 * dt, dt], &SinkhornOptions::default()).unwrap();
    assert!(ladder.divergent, "{:?}", ladder.energies());
    assert!(matches!(
        drift_recovery(&path, &[4.0 * dt, 2.0 * dt, dt], &SinkhornOptions::default()),
        Err(Error::Divergent)
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fp_conserves_mass(seed in any::<u64>(), a in -1.0f64..1.0, sine in any::<bool>()) {
        let grid = grid1(32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu0 = random_measure(grid, &mut rng);
        let drift = if sine { DriftField::sine(grid, [a, 0.0]) } else { DriftField::constant(grid, [a, 0.0]) };
        let path = fp_solve(&mu0, &drift, (0.0, 0.25), 1.0 / 128.0).unwrap();
        for f in path.frames() {
            prop_assert!((f.total_mass() - 1.0).abs() <= 1e-12);
            prop_assert!(f.weights().iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn modulus_bound_on_solver_paths(seed in any::<u64>(), a in -1.0f64..1.0) {
        let grid = grid1(32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu0 = random_measure(grid, &mut rng);
        let drift = DriftField::sine(grid, [a, 0.0]);
        let path = fp_solve(&mu0, &drift, (0.0, 0.25), 1.0 / 128.0).unwrap();
        let energy = path_drift_energy(&path, &drift).unwrap();
        let report = modulus_check(&path, energy, 4, 1e-6).unwrap();
        prop_assert_eq!(report.violations, 0);
    }
}
