//! Command-line pipeline: dataset generation, VQVAE pretraining, agent
//! training and the counting, OOD and codebook-usage studies.

pub mod commands;
pub mod config;
pub mod pipeline;

pub use commands::{run, Cli};
pub use config::RunConfig;
