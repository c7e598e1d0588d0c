//! Experiment harness around `rws-core`: TOML configs, parallel sweeps,
//! metrics CSVs, run manifests and posterior dumps.

pub mod config;
pub mod io;
pub mod runner;
pub mod summary;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] rws_core::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}
