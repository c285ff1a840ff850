//! Command-line front end for `enscgp-core`: matrix files, reports and the
//! `enscgp` subcommands.

pub mod config;
pub mod matrix_io;
pub mod report;
pub mod run;

pub use config::RunConfig;
pub use run::{execute, main_with, CliError, Outputs, RANK_TOL_ENV};
