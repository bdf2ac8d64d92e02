use crate::message::MessageKind;
use fedcox_core::CoxError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("timed out waiting for {kind:?} round {round} from {}", missing.join(", "))]
    Timeout { kind: MessageKind, round: u64, missing: Vec<String> },
    #[error("channel closed")]
    Closed,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("payload does not match {kind:?} schema: {reason}")]
    Schema { kind: MessageKind, reason: String },
    #[error("round {got} from {sender} to {recipient} after round {last}")]
    RoundRegression { sender: String, recipient: String, last: u64, got: u64 },
    #[error("invalid endpoint name {0:?}")]
    BadName(String),
    #[error("unsupported schema version {0}")]
    Version(u32),
}

/// Coarse failure class, carried in error reports and mapped to exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
    Protocol,
}

#[derive(Debug, Error)]
pub enum FederationError {
    #[error(transparent)]
    Core(#[from] CoxError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("centre {centre}: {message}")]
    Centre { centre: String, category: ErrorCategory, message: String },
    #[error("every candidate model failed to fit")]
    NoViableModel,
    #[error("outbound message would leak patient-level data: {}", .0.join("; "))]
    PrivacyViolation(Vec<String>),
}

impl FederationError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            FederationError::Core(e) => core_category(e),
            FederationError::Config(_) => ErrorCategory::Config,
            FederationError::Data(_) => ErrorCategory::Data,
            FederationError::Centre { category, .. } => *category,
            FederationError::NoViableModel => ErrorCategory::Numerical,
            FederationError::Transport(_) | FederationError::Protocol(_) | FederationError::PrivacyViolation(_) => {
                ErrorCategory::Protocol
            }
        }
    }
}

pub fn core_category(e: &CoxError) -> ErrorCategory {
    match e {
        CoxError::Config(_) => ErrorCategory::Config,
        CoxError::InvalidData(_)
        | CoxError::DimensionMismatch { .. }
        | CoxError::EmptyColumn(_)
        | CoxError::NoPatientsRemain
        | CoxError::Parse(_)
        | CoxError::NoEvents => ErrorCategory::Data,
        CoxError::NonFinite { .. }
        | CoxError::SingularHessian { .. }
        | CoxError::LineSearchFailed
        | CoxError::NotConverged { .. }
        | CoxError::NoComparablePairs => ErrorCategory::Numerical,
    }
}

pub type Result<T, E = FederationError> = std::result::Result<T, E>;
