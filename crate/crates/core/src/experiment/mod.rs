//! Config-driven benchmark harness: presets, replications, CSV/TSV output.

pub mod config;
pub mod presets;
pub mod runner;

pub use config::{Algorithm, ExperimentConfig, ModelKind};
pub use presets::{find_preset, list_presets, presets, Preset};
pub use runner::{
    dump_cdf_comparison, run_experiment, run_to_dir, run_with_problem, strip_runtime, write_atomic,
    Problem, RunArtifacts, RunRequest, Truth,
};
