//! Cycled 4D-Var: the L-BFGS minimiser, strong-constraint state estimation
//! and the joint state/parameter weak-constraint formulation used for
//! online learning.

mod cost;
mod cycle;
mod lbfgs;
mod models;
mod schedule;

pub use cost::{
    control_spread, sc4dvar_analysis, sc4dvar_cost, sc4dvar_cost_graph, sc4dvar_gradient, wc4dvar_analysis, wc4dvar_cost,
    wc4dvar_cost_graph, wc4dvar_gradient, FAST_CONTROL_SPREAD,
};
pub use cycle::{
    default_b_grid, generate_observations, generate_truth, initial_background, moving_average, run_sc4dvar,
    run_wc4dvar, slow_rmse, tune_b, CycleRecord, RunStatus, ScConfig, ScRun, TruthRun, WcConfig, WcRun,
    DIVERGENCE_FACTOR, DIVERGENCE_PATIENCE, FAST_BACKGROUND_SPREAD,
};
pub use lbfgs::{lbfgs_minimize, LbfgsConfig, LbfgsReport, Termination};
pub use models::{ForecastModel, PhysicalModel, TrueModel, WilksModel, WilksTendency};
pub use schedule::{schedule_spread, Schedule, SpreadKind};
