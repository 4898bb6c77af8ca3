//! Command line, configuration, artifact formats and experiment runners.

pub mod cli;
pub mod config;
pub mod io;
pub mod study;
