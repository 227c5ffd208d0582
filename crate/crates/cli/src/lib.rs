//! Configuration-driven batch runner. Every run writes one data file
//! (long-format CSV or JSON) and a `<data>.meta.json` file with the seed,
//! step, ensemble size, configuration hash and guard statistics.

pub mod config;
pub mod output;
pub mod runner;
pub mod scenarios;

pub use config::{Engine, Format, ScenarioConfig};
pub use output::{Cell, RunMetadata, Table};
pub use runner::{run_to_files, Job, Outcome, Overrides, RunError, RunParams};
