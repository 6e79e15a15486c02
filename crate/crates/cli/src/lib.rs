//! Library surface of the `twta` command-line harness. The binary in
//! `main.rs` is a thin argument parser over [`commands`]; everything it can
//! do — config parsing, dataset generation, checkpointing, pruned exports,
//! metrics CSVs, and SVG plots — lives here so integration tests can drive
//! the same code paths in-process.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod datasets;
pub mod error;
pub mod export;
pub mod idx;
pub mod plots;
