//! Command-line front end and HTTP service over `acwm`.

pub mod commands;
pub mod config;
pub mod error;
pub mod policies;
pub mod server;

pub use error::CliError;
