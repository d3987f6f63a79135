//! Host-side companion to `spectralx-core`: configuration files, dataset
//! and run manifests, SPXR/SPXC/PPM file IO and the `spectralx` command.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod files;
pub mod manifest;

pub use error::CliError;
