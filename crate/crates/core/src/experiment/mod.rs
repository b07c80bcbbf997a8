//! Config-driven experiments behind the `koopman-ddpc` binary.

mod commands;
mod config;

pub use commands::{
    build_controller, cmd_collect, cmd_sweep, cmd_track, cmd_verify, position_errors, run_table, run_window,
    sweep_series, trajectories, CommandOutput, RunOptions, RunOutcome, SweepSeries, EMBEDDING_SAMPLES, EMBEDDING_TOL,
};
pub use config::{
    ControllerSpec, DataSpec, ExperimentConfig, OuterSweep, ReferenceSpec, WeightSpec, ROBOT_ADMM_TOL,
    ROBOT_STEPS_PER_CYCLE,
};
