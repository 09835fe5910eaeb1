//! Scenario configuration, the closed-loop runner, logging and reporting.

pub mod adversary;
pub mod config;
pub mod logs;
pub mod report;
pub mod runner;

pub use config::{AgentConfig, ConfigError, ScenarioConfig};
pub use report::{rms_pixel_errors, RunReport};
pub use runner::{run, RunError, RunOptions};
