//! Experiment runner: layered TOML configs and presets, run directories
//! with metrics and manifests, controlled replays, theory probes and
//! plot-ready CSV emission.

pub mod config;
pub mod error;
pub mod plotdata;
pub mod presets;
pub mod probes;
pub mod replay;
pub mod run;

pub use error::{LabError, Result};
