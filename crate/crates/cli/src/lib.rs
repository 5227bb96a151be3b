//! Configuration parsing and scenario execution behind the `twistor`
//! binary.

pub mod config;
pub mod runner;

pub use config::{default_config, parse_config, parse_config_str, ConfigError, RunConfig, Scenario, SuiteKind};
pub use runner::{render_table, ExitStatus, RunOutcome, Runner, SummaryRow, Verdict};
