//! Run configs, deterministic training runs, one-dimensional sweeps and
//! their on-disk formats.

pub mod config;
pub mod defaults;
pub mod run;
pub mod runlog;
pub mod sweep;

pub use config::{RunConfig, SCHEMA_VERSION};
pub use defaults::{defaults_for, defaults_for_id, lr_grid, optimal_lr, sqrt10_grid, ScaleTag};
pub use run::{run, run_with_store, Trainer};
pub use runlog::{EffLrEntry, EffLrRecord, EvalRecord, Record, RunLog, RunStatus, StepRecord};
pub use sweep::{
    read_summary, sweep, write_summary, Arm, ArmSpec, PlannedRun, SummaryRow, SweepAxis, SweepPoint, SweepResult,
    SweepSpec,
};
