//! File formats, parallel drivers and command pipelines for `mflq-core`.
//!
//! The `mflq` binary is a thin argument parser over [`pipeline::run_job`];
//! every command writes a [`manifest::RunManifest`] from which
//! [`pipeline::rerun`] repeats the run and checks the outputs byte for byte.

pub mod dump;
pub mod error;
pub mod export;
pub mod manifest;
pub mod model_file;
pub mod output;
pub mod pipeline;
pub mod runner;
pub mod svg;
