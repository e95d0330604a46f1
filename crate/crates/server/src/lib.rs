//! Command-line runner and HTTP service around `nbagent-core`.

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod runner;
pub mod service;
pub mod spec_file;
