//! Command-line harness around the simulated cluster: bulk loading, A1QL
//! queries, scripted chaos and recovery scenarios, and a smoke benchmark.

pub mod app;
pub mod bench;
pub mod chaos;
pub mod film;
pub mod output;

pub use app::{Cli, CliConfig, Command, Loaded};
