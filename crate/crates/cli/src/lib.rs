//! Library side of the `convexopt` binary: problem files, commands and the
//! reproduction suites.

pub mod commands;
pub mod config;
pub mod suites;

pub use commands::{
    cmd_analyze, cmd_export, cmd_solve, cmd_verify, RunFlags, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE,
};
pub use config::ProblemFile;
pub use suites::{format_table, run_suite, Check, SuiteConfig, SUITES};
