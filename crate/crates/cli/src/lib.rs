//! Command-line front end for the text-to-SQL harness.

pub mod commands;
pub mod config;
