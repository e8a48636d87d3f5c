//! Acceptance suite: one PASS/FAIL line per criterion. Runs every criterion to completion and
//! exits nonzero if any fails.

use std::io::Write;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fpcost_core::harness::config::{bump, ExperimentConfig, Scenario};
use fpcost_core::harness::report::{Check, ScenarioReport};
use fpcost_core::harness::{appendix_oracles, run_scenario, AppendixKind};
use fpcost_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let value = f();
    (value, start.elapsed())
}

fn scenario(name: Scenario, n: usize) -> (ScenarioReport, Duration) {
    let (report, elapsed) = timed(|| run_scenario(&ExperimentConfig::new(name, n)));
    (report.unwrap_or_else(|e| panic!("{name} failed to run: {e}")), elapsed)
}

fn check<'a>(report: &'a ScenarioReport, name: &str) -> &'a Check {
    report
        .checks
        .iter()
        .find(|c| c.name == name)
        .unwrap_or_else(|| panic!("{} has no check {name}", report.scenario))
}

fn summarize<'a>(checks: impl IntoIterator<Item = &'a Check>) -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for c in checks {
        passed &= c.passed;
        parts.push(format!("{}={:.3e}{}", c.name, c.value, if c.passed { "" } else { "(!)" }));
    }
    outcome(passed, parts.join(" "))
}

fn random_measure(grid: TorusGrid, rng: &mut ChaCha8Rng) -> GridMeasure {
    let raw: Vec<f64> = (0..grid.cells()).map(|_| rng.random_range(0.05..1.0)).collect();
    GridMeasure::normalized(grid, raw).unwrap()
}

fn heat_step() -> Outcome {
    let (n, h) = (128, 0.01);
    let ((cost, row_tv), elapsed) = timed(|| {
        let grid = TorusGrid::new(1, n, h).unwrap();
        let mu1 = bump(grid, [0.5, 0.5], 0.07).unwrap();
        let heat = wrapped_heat_kernel(&grid, h).unwrap();
        let mu2 = push_forward(&mu1, &heat).unwrap();
        let step = solve_step(&mu1, &mu2, h, &SinkhornOptions::default()).unwrap();
        let row_tv = (0..n)
            .map(|x| {
                let (a, b) = (step.kernel.wrapped_row(x), heat.wrapped_row(x));
                0.5 * a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>()
            })
            .fold(0.0, f64::max);
        (step.cost, row_tv)
    });
    outcome(
        cost <= 1e-6 && row_tv <= 1e-4 && elapsed < Duration::from_secs(5),
        format!("cost={cost:.3e} (≤1e-6) row_tv={row_tv:.3e} (≤1e-4) time={elapsed:.2?} (<5s)"),
    )
}

fn penalized_ladder() -> Outcome {
    let (n, h) = (32, 0.05);
    let grid = TorusGrid::new(1, n, h).unwrap();
    let solver = StepSolver::new(&grid, h).unwrap();
    let opts = SinkhornOptions::default();
    let lambdas = [1.0, 10.0, 100.0, 1e3, 1e4, 1e5, 1e6];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut monotone, mut bounded, mut worst) = (true, true, 0.0f64);
    for _ in 0..10 {
        let mu1 = random_measure(grid, &mut rng);
        let mu2 = random_measure(grid, &mut rng);
        let exact = solver.solve(&mu1, &mu2, &opts).unwrap().cost;
        let values: Vec<f64> = lambdas
            .iter()
            .map(|&l| penalized_cost_with(&solver, &mu1, &mu2, l, &opts).unwrap().value)
            .collect();
        monotone &= values.windows(2).all(|w| w[0] <= w[1] + 1e-9);
        bounded &= values.iter().all(|&v| v <= exact + 1e-9);
        worst = worst.max((values[values.len() - 1] - exact).abs());
    }
    outcome(
        monotone && bounded && worst <= 1e-3,
        format!("nondecreasing={monotone} bounded={bounded} gap_at_1e6={worst:.3e} (≤1e-3)"),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = Vec::new();

    results.push(("1 zero-cost heat step", heat_step()));

    let (constant, constant_time) = scenario(Scenario::ConstantDrift, 128);
    let identity = check(&constant, "identity_relative_error");
    results.push((
        "2 constant-drift identity",
        outcome(
            identity.passed && constant_time < Duration::from_secs(120),
            format!(
                "liminf={:.4e} target=1.25e-1 rel_err={:.3e} (≤0.15) time={constant_time:.1?} (<2min)",
                constant.values["ladder_liminf_half"], identity.value
            ),
        ),
    ));

    let (sine, _) = scenario(Scenario::SineDrift, 128);
    let (heat, _) = scenario(Scenario::HeatZeroCost, 128);
    let (compact, _) = scenario(Scenario::CompactnessProbe, 64);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut rungs = 0;
    for report in [&constant, &sine, &heat, &compact] {
        for ladder in &report.ladders {
            for r in ladder.ladder.rungs.iter().filter(|r| r.converged()) {
                worst_excess = worst_excess.max(r.drift_energy - r.energy);
                rungs += 1;
            }
        }
    }
    results.push((
        "3 drift-energy lower bound",
        outcome(
            worst_excess <= 1e-6,
            format!("max(drift_energy − energy)={worst_excess:.3e} (≤1e-6) over {rungs} rungs"),
        ),
    ));

    results.push((
        "4 covariance flattening",
        summarize([check(&constant, "constant_covariance_flattening"), check(&sine, "sine_covariance_flattening")]),
    ));

    let kinds = [AppendixKind::Trace, AppendixKind::Diag, AppendixKind::OffDiag];
    let (appendix, appendix_time) = timed(|| appendix_oracles(&kinds, 8, 20, 0).unwrap());
    let mut oracle = summarize(appendix.checks.iter().filter(|c| c.name.contains("_oracle")));
    oracle.passed &= appendix_time < Duration::from_secs(60);
    oracle.detail += &format!(" time={appendix_time:.1?} (<1min)");
    results.push(("5 appendix closed forms", oracle));
    results.push((
        "6 gap inequalities",
        summarize(appendix.checks.iter().filter(|c| c.name.contains("_gap_"))),
    ));

    let (tail, _) = scenario(Scenario::TailLemma, 8);
    results.push(("7 tail lemma", summarize(&tail.checks)));

    results.push(("8 weak residual", summarize([check(&sine, "recovered_weak_residual")])));
    results.push((
        "9 mollified upper bound",
        summarize([check(&sine, "mollified_upper_bound"), check(&sine, "bracket_relative_width")]),
    ));

    let (modulus, _) = scenario(Scenario::ModulusCheck, 128);
    let (lsc, _) = scenario(Scenario::LscProbe, 64);
    results.push((
        "10 modulus and compactness",
        summarize(
            modulus
                .checks
                .iter()
                .chain([check(&compact, "finite_path_modulus"), check(&lsc, "lower_semicontinuity")]),
        ),
    ));

    results.push(("11 penalized ladder", penalized_ladder()));

    let mut out = std::io::stdout().lock();
    let mut all = true;
    for (name, o) in &results {
        all &= o.passed;
        writeln!(out, "{} criterion {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail).unwrap();
    }
    let failed = results.iter().filter(|(_, o)| !o.passed).count();
    writeln!(out, "acceptance: {} passed, {failed} failed", results.len() - failed).unwrap();
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
