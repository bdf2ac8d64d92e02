//! Command-line driver: cohort simulation, in-process federated fitting,
//! figure export and the unstratified-protocol leakage demo.

pub mod commands;
pub mod error;
pub mod figures;
pub mod manifest;
pub mod svg;

pub use error::{CliError, Result};
