//! Experiment harness for `metarhc`: configuration, seeded meta-runs,
//! sweeps over `T` and `N`, assumption checks and plot data.

pub mod config;
pub mod plotdata;
pub mod run;
pub mod stats;
pub mod sweep;
pub mod validate;

pub use config::{load_file, load_str, preset, Experiment, RunConfig};
pub use run::{run_meta, Aggregates, EpisodeRow, RunOptions, RunResult};
pub use sweep::{sweep, Axis, SweepResult, SweepSpec};
