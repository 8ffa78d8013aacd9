//! Experiment front end: config parsing, run orchestration, result export.

pub mod config;
pub mod report;
pub mod runner;
