//! Declarative experiment runner: config parsing, presets, end-to-end runs
//! with on-disk artifacts, and run comparison.

pub mod build;
pub mod compare;
pub mod config;
pub mod presets;
pub mod run;
pub mod verify;

pub use compare::{compare, percent_improvement};
pub use config::{ClientConfig, ExperimentConfig, Task};
pub use presets::PRESETS;
pub use run::{execute, run_to_dir, RunOptions, RunOutcome, RunSummary};
pub use verify::{verify, Check};

use crate::error::Result;

/// Loads a config from a preset name or a JSON file path.
pub fn load_config(arg: &str) -> Result<ExperimentConfig> {
    if PRESETS.contains(&arg) {
        return ExperimentConfig::parse(&format!("{{\"preset\":\"{arg}\"}}"));
    }
    ExperimentConfig::parse(&std::fs::read_to_string(arg)?)
}
