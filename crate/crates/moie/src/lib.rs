//! File formats, run configuration and the batch command line around
//! `moie-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod report;

pub use moie_core as core;
