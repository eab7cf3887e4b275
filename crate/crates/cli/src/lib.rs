//! Experiment harness and subcommands of the `nsm` binary.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod oracle;
