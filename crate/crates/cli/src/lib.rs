//! Configuration-driven runner for the resonance-tracking experiments.
//!
//! A run is one TOML document: optional `[plant]` and `[tracker]` sections
//! and exactly one `[protocol.<name>]` table. [`execute`] writes
//! `<output_dir>/<protocol>/<timestamp>/` with the protocol's CSV files,
//! the resolved `config.toml` and a `manifest.toml` that can be re-run.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
mod run;

pub use config::{parse_config, parse_manifest, serialize_config, ConfigError, ProtocolConfig, RunConfig};
pub use run::{execute, RunError, RunSummary};
