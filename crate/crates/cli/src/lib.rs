//! Experiment harness around `reflmap`: TOML configuration, the offline and
//! online pipeline, CDF tables and run manifests.

pub mod cdf;
pub mod commands;
pub mod config;
mod error;
pub mod pipeline;

pub use cdf::CdfTable;
pub use commands::{cmd_bounds, cmd_build_map, cmd_experiment_cdf, cmd_localize, cmd_simulate, Manifest};
pub use config::{apply_override, ExperimentConfig, SCHEMA_VERSION};
pub use error::CliError;

/// Environment variable holding the default output root.
pub const OUT_ENV: &str = "REFLMAP_OUT";
