//! Entropy-penalized transport costs on the flat torus.

pub mod error;
pub mod fokker_planck;
pub mod gaussian;
pub mod grid;
pub mod kernel;
pub mod harness;
pub mod measure;
pub(crate) mod nullable;
pub mod path;
pub mod penalized;
pub mod quad;
pub mod step;
pub mod transport;

pub use error::{Error, Result};
pub use grid::{Matrix, Point, TorusGrid};
pub use kernel::{push_forward, Jump, JumpKernel, LiftSplit, TailMoments};
pub use measure::{GridMeasure, MeasurePath};
pub use transport::{path_sup_distance, wasserstein, TransportPlan, Wasserstein};
pub use gaussian::{
    bar_delta, delta0, diag_bound, eta_alpha, gap_diag, gap_offdiag, gap_trace, offdiag_bound,
    out_cost, trace_bound, wrapped_heat_kernel, GaussianSpec, HeatTable, TailSolveResult,
};
pub use step::{
    covariance, forward_velocity, solve_step, tail_moments, Potentials, SinkhornOptions, StepCostResult,
    StepSolver,
};
pub use penalized::{penalized_cost, penalized_cost_with, PenalizedResult};
pub use fokker_planck::{
    compose_kernels, drift_recovery, fp_solve, frozen_drift_semigroup, sde_sample, transition_kernels, weak_residual, DriftField,
    DriftRecovery, FrozenSemigroup, SdeRun, StochasticKernel,
};
pub use path::{
    constant_path, default_ladder, energy_ladder, modulus_check, mollified_upper_bound, path_drift_energy,
    relaxed_bracket, step_cost_integral, Bracket, EnergyConvention, LadderReport, ModulusReport, MollifiedBound, Rung,
};
