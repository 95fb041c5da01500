//! Config-driven experiment driver around the `ffcnn` library.

pub mod codec;
pub mod config;
pub mod error;
pub mod model_file;
pub mod run;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
