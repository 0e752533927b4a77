//! Experiment harness: config, world generation, artifact IO, and the
//! pipeline stages behind the CLI.

pub mod artifacts;
pub mod config;
pub mod experiments;
pub mod world;
