//! Federated dual-prompt learning over frozen toy vision-language encoders.
//!
//! Each client owns a private prompt and a shared prompt; only the shared
//! prompt travels to the server, which averages it weighted by client data
//! size. Predictions match image patches to prompt-conditioned text features
//! through entropic partial optimal transport.

pub mod config;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod federation;
pub mod gradcheck;
pub mod linalg;
pub mod objective;
pub mod ot;
pub mod prompt;
pub mod rng;
pub mod runner;

pub use config::{load_config, ExperimentConfig};
pub use error::{Error, ErrorCategory, Result};
