//! Centre-stratified Cox regression across data holders that never share
//! patient-level data.
//!
//! - [`message`] / [`transport`]: wire format, relay channels, privacy scanner
//! - [`node`]: the data holder
//! - [`coordinator`]: best-subset selection and final-model summaries
//! - [`harness`]: runs a study with in-process nodes
//! - [`leakage`]: the unstratified protocol and the reconstruction attack on it

pub mod config;
pub mod coordinator;
pub mod error;
pub mod harness;
pub mod hexfloat;
pub mod leakage;
pub mod message;
pub mod node;
pub mod transport;

pub use error::{ErrorCategory, FederationError, Result, TransportError};
