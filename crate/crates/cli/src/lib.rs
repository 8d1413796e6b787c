//! Configuration-driven experiment runner for risk-averse feedback control
//! of a parametric diffusion-reaction equation.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use experiment::Experiment;
