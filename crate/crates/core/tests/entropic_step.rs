mod common;

use std::collections::HashMap;

use approx::assert_abs_diff_eq;
use fpcost_core::gaussian::gaussian_jump_kernel;
use fpcost_core::harness::config::bump;
use fpcost_core::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn opts() -> SinkhornOptions {
    SinkhornOptions::default()
}

fn random_measure(grid: TorusGrid, rng: &mut ChaCha8Rng) -> GridMeasure {
    let raw: Vec<f64> = (0..grid.cells()).map(|_| rng.random_range(0.05..1.0)).collect();
    GridMeasure::normalized(grid, raw).unwrap()
}

/// Σ_x μ(x)·KL(γ(x,·) ‖ heat(x,·)) over lifted cells, from the kernel rows directly.
fn kl_oracle(mu: &GridMeasure, gamma: &JumpKernel, heat: &JumpKernel) -> f64 {
    let mut total = 0.0;
    for (x, &m) in mu.weights().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let reference: HashMap<(usize, [i32; 2]), f64> =
            heat.row(x).into_iter().map(|j| ((j.target, j.lift), j.mass)).collect();
        let row: f64 = gamma
            .row(x)
            .iter()
            .filter(|j| j.mass > 0.0)
            .map(|j| j.mass * (j.mass / reference[&(j.target, j.lift)]).ln())
            .sum();
        total += m * row;
    }
    total
}

fn row_tv(a: &JumpKernel, b: &JumpKernel, x: usize) -> f64 {
    common::tv(&a.wrapped_row(x), &b.wrapped_row(x))
}

#[test]
fn heat_image_costs_nothing() {
    let h = 0.01;
    let grid = TorusGrid::new(1, 128, h).unwrap();
    let mu1 = bump(grid, [0.3, 0.5], 0.08).unwrap();
    let heat = wrapped_heat_kernel(&grid, h).unwrap();
    let mu2 = push_forward(&mu1, &heat).unwrap();
    let res = solve_step(&mu1, &mu2, h, &opts()).unwrap();
    assert!(res.converged);
    assert!(res.cost.abs() <= 1e-6, "cost {}", res.cost);
    for x in 0..grid.cells() {
        assert!(row_tv(&res.kernel, &heat, x) <= 1e-4);
    }
}

#[test]
fn uniform_to_uniform() {
    for (dim, n, h) in [(1, 64, 0.02), (2, 16, 0.01)] {
        let grid = TorusGrid::new(dim, n, h).unwrap();
        let u = GridMeasure::uniform(grid);
        let res = solve_step(&u, &u, h, &opts()).unwrap();
        assert!(res.cost.abs() <= 1e-6);
        for (v, d) in res.velocity.iter().zip(&res.covariance) {
            assert!(v[0].abs() < 1e-10 && v[1].abs() < 1e-10);
            for a in 0..dim {
                for b in 0..dim {
                    let id = if a == b { 1.0 } else { 0.0 };
                    assert!((d[a][b] - id).abs() < 1e-6, "{d:?}");
                }
            }
        }
    }
}

/// A shifted heat image is reached by the Gaussian N(ha, h), so its cost is at most (h/2)a²;
/// for a wide bump the bound is nearly attained.
#[test]
fn drifted_heat_image_costs_half_a_squared() {
    let (h, a) = (0.02, 0.5);
    let grid = TorusGrid::new(1, 128, h).unwrap();
    let mu1 = bump(grid, [0.5, 0.5], 0.1).unwrap();
    let spec = GaussianSpec::isotropic(1, [h * a, 0.0], h).unwrap();
    let mu2 = push_forward(&mu1, &gaussian_jump_kernel(&grid, h, &spec).unwrap()).unwrap();
    let res = solve_step(&mu1, &mu2, h, &opts()).unwrap();
    let target = 0.5 * h * a * a;
    assert!(res.cost <= target + 1e-6);
    assert!((res.cost - target).abs() <= 0.2 * target, "cost {} vs {target}", res.cost);
}

#[test]
fn formulations_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (dim, n, h) in [(1, 32, 0.05), (1, 64, 0.005), (2, 8, 0.02)] {
        let grid = TorusGrid::new(dim, n, h).unwrap();
        let solver = StepSolver::new(&grid, h).unwrap();
        let heat = solver.table().kernel().unwrap();
        for _ in 0..3 {
            let mu1 = random_measure(grid, &mut rng);
            let mu2 = random_measure(grid, &mut rng);
            let res = solver.solve(&mu1, &mu2, &opts()).unwrap();
            assert!(res.converged);
            let kl = kl_oracle(&mu1, &res.kernel, &heat);
            assert!((res.cost - kl).abs() <= 1e-9, "{} vs {kl}", res.cost);
            let action = res.kernel.action_cost(&mu1).unwrap() + solver.table().log_normalizer();
            assert!((res.cost - action).abs() <= 1e-9, "{} vs {action}", res.cost);
            let pushed = push_forward(&mu1, &res.kernel).unwrap();
            let tv: f64 = pushed.weights().iter().zip(mu2.weights()).map(|(p, q)| (p - q).abs()).sum();
            assert!(tv <= opts().tolerance * 10.0);
        }
    }
}

#[test]
fn minimizer_is_unique() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let grid = TorusGrid::new(1, 48, 0.02).unwrap();
    let solver = StepSolver::new(&grid, 0.02).unwrap();
    for _ in 0..5 {
        let mu1 = random_measure(grid, &mut rng);
        let mu2 = random_measure(grid, &mut rng);
        let start: Vec<f64> = (0..grid.cells()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = solver.solve(&mu1, &mu2, &opts()).unwrap();
        let b = solver.solve_from(&mu1, &mu2, &opts(), Some(&start)).unwrap();
        assert!((a.cost - b.cost).abs() <= 1e-8);
        for x in 0..grid.cells() {
            assert!(row_tv(&a.kernel, &b.kernel, x) <= 1e-6);
        }
    }
}

#[test]
fn cost_dominates_the_trace_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (dim, n, h) in [(1, 64, 0.01), (1, 32, 0.05), (2, 8, 0.02)] {
        let grid = TorusGrid::new(dim, n, h).unwrap();
        let p = dim as f64;
        for _ in 0..4 {
            let mu1 = random_measure(grid, &mut rng);
            let mu2 = random_measure(grid, &mut rng);
            let res = solve_step(&mu1, &mu2, h, &opts()).unwrap();
            let bound: f64 = mu1
                .weights()
                .iter()
                .enumerate()
                .map(|(x, &m)| {
                    let d = &res.covariance[x];
                    let delta = (0..dim).map(|i| d[i][i]).sum::<f64>() / p;
                    let v = &res.velocity[x][..dim];
                    let log_ref = 0.5 * p * (1.0 / (2.0 * std::f64::consts::PI * h)).ln();
                    m * (trace_bound(v, delta, h, dim).unwrap() - log_ref)
                })
                .sum();
            assert!(res.cost >= bound - 1e-6, "cost {} below bound {bound}", res.cost);
        }
    }
}

#[test]
fn velocity_and_covariance_of_model_kernels() {
    let h = 0.01;
    let grid = TorusGrid::new(1, 128, h).unwrap();
    let u = GridMeasure::uniform(grid);
    let heat = wrapped_heat_kernel(&grid, h).unwrap();
    for (v, d) in heat.forward_velocity(&u).unwrap().iter().zip(heat.covariance(&u).unwrap()) {
        assert!(v[0].abs() <= 1e-10);
        assert!((d[0][0] - 1.0).abs() <= 1e-6, "{}", d[0][0]);
    }

    let (a, delta) = (0.7, 1.8);
    let spec = GaussianSpec::isotropic(1, [h * a, 0.0], h * delta).unwrap();
    let g = gaussian_jump_kernel(&grid, h, &spec).unwrap();
    for (v, d) in g.forward_velocity(&u).unwrap().iter().zip(g.covariance(&u).unwrap()) {
        assert!((v[0] - a).abs() <= 1e-3 * a, "{}", v[0]);
        assert!((d[0][0] - delta).abs() <= 1e-3 * delta, "{}", d[0][0]);
    }

    let shift = JumpKernel::shift(grid, h, [1, 0]).unwrap();
    for (v, d) in shift.forward_velocity(&u).unwrap().iter().zip(shift.covariance(&u).unwrap()) {
        assert_abs_diff_eq!(v[0], grid.cell_width() / h, epsilon = 1e-12);
        assert_eq!(d[0][0], 0.0);
    }
}

#[test]
fn zero_mass_cells_are_skipped() {
    let grid = TorusGrid::new(1, 32, 0.02).unwrap();
    let mut raw = vec![1.0; 32];
    raw[3] = 0.0;
    let mu1 = GridMeasure::normalized(grid, raw).unwrap();
    let res = solve_step(&mu1, &GridMeasure::uniform(grid), 0.02, &opts()).unwrap();
    assert_eq!(res.velocity[3], [0.0; 2]);
    assert_eq!(res.covariance[3], [[0.0; 2]; 2]);
    assert!(res.kernel.row(3).is_empty());
}

#[test]
fn non_convergence_is_reported() {
    let grid = TorusGrid::new(1, 32, 0.01).unwrap();
    let mu1 = bump(grid, [0.2, 0.5], 0.05).unwrap();
    let mu2 = bump(grid, [0.6, 0.5], 0.08).unwrap();
    let few = SinkhornOptions {
        max_iterations: 1,
        ..opts()
    };
    let res = solve_step(&mu1, &mu2, 0.01, &few).unwrap();
    assert!(!res.converged);
    assert!(matches!(forward_velocity(&res), Err(Error::NotConverged { .. })));
    assert!(covariance(&res).is_err());
    assert!(tail_moments(&res, 1.0).is_err());
    let bad = SinkhornOptions { tolerance: 0.1, ..opts() };
    assert!(solve_step(&mu1, &mu2, 0.01, &bad).is_err());
    assert!(solve_step(&mu1, &GridMeasure::uniform(TorusGrid::new(1, 16, 0.01).unwrap()), 0.01, &opts()).is_err());
}

#[test]
fn tail_moments_of_the_heat_step() {
    let grid = TorusGrid::new(1, 128, 0.01).unwrap();
    let mu = bump(grid, [0.5, 0.5], 0.1).unwrap();
    let third = |h: f64| {
        let mu2 = push_forward(&mu, &wrapped_heat_kernel(&grid, h).unwrap()).unwrap();
        let res = solve_step(&mu, &mu2, h, &opts()).unwrap();
        let t = tail_moments(&res, 1.0).unwrap();
        if h == 0.01 {
            assert!(t.epsilon_out < 1e-9);
        }
        t.third_moment
    };
    let ratio = third(0.02) / third(0.005);
    assert!((ratio - 2.0).abs() <= 0.3 * 2.0, "ratio {ratio}");
    third(0.01);
    let spike = GridMeasure::dirac(grid, 0).unwrap();
    let far = JumpKernel::shift(grid, 0.01, [40, 0]).unwrap();
    let t = far.tail_moments(&spike, 0.25).unwrap();
    assert_abs_diff_eq!(t.epsilon_out, 1.0 / 0.01, epsilon = 1e-9);
}

#[test]
fn penalized_cost_ladder() {
    let h = 0.05;
    let grid = TorusGrid::new(1, 16, h).unwrap();
    let solver = StepSolver::new(&grid, h).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lambdas = [0.1, 1.0, 10.0, 100.0, 1e4, 1e6];
    for _ in 0..20 {
        let mu1 = random_measure(grid, &mut rng);
        let mu2 = random_measure(grid, &mut rng);
        let exact = solver.solve(&mu1, &mu2, &opts()).unwrap().cost;
        let values: Vec<f64> = lambdas
            .iter()
            .map(|&l| penalized_cost_with(&solver, &mu1, &mu2, l, &opts()).unwrap().value)
            .collect();
        for w in values.windows(2) {
            assert!(w[0] <= w[1] + 1e-9, "{values:?}");
        }
        assert!(values.iter().all(|&v| v <= exact + 1e-9));
        assert!((values[values.len() - 1] - exact).abs() <= 1e-3, "{values:?} vs {exact}");
    }
    let mu1 = random_measure(grid, &mut rng);
    let mu2 = push_forward(&mu1, &wrapped_heat_kernel(&grid, h).unwrap()).unwrap();
    for &l in &lambdas {
        assert!(penalized_cost(&mu1, &mu2, h, l, &opts()).unwrap() <= 1e-6);
    }
    assert!(penalized_cost(&mu1, &mu2, h, 0.0, &opts()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn step_cost_is_nonnegative(seed in any::<u64>(), h in 0.005f64..0.2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = TorusGrid::with_lift_radius(1, 16, 1).unwrap();
        let mu1 = random_measure(grid, &mut rng);
        let mu2 = random_measure(grid, &mut rng);
        let res = solve_step(&mu1, &mu2, h, &opts()).unwrap();
        prop_assert!(res.converged);
        prop_assert!(res.cost >= -10.0 * opts().tolerance);
        for d in &res.covariance {
            prop_assert!(d[0][0] >= -1e-12);
        }
    }
}
