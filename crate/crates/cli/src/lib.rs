//! Library side of the `sdmprune` binary: run configuration and commands.

pub mod commands;
pub mod config;
