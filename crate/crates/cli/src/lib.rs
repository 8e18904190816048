//! Library surface of the `dfbf` command-line tool; the binary in
//! `main.rs` is a thin argument-parsing wrapper over these modules so the
//! pipeline is drivable from integration tests.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod rundir;
