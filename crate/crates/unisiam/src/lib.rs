//! File formats, configuration, parallel runners and the command line for
//! [`unisiam_core`].

mod bytes;
pub mod cli;
pub mod config;
mod error;
pub mod fsds;
pub mod io;
pub mod parallel;
pub mod report;
pub mod usia;

pub use self::error::{CliError, FormatError, Result};
