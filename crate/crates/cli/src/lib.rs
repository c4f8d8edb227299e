//! Command implementations behind the `memattn` binary.

pub mod commands;
pub mod config;
pub mod report;

/// Environment variable holding the worker-thread count.
pub const THREADS_ENV: &str = "MEMATTN_THREADS";
