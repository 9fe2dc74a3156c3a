//! Command-line harness: training loop, evaluation, scan benchmark,
//! inspection dumps, and dataset synthesis.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod inspect;
pub mod train;

pub use cli::run;
pub use error::{CliError, CliResult};
