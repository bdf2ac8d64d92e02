//! Message envelope and the payload schema of every message kind.
//!
//! Envelopes are JSON objects
//! `{schema_version, kind, sender, recipient, round, payload}`; every float
//! inside a payload is a hex-float string so values survive the trip bit for
//! bit. A payload is checked against its kind's schema before it is queued.

use crate::error::{ErrorCategory, TransportError};
use crate::hexfloat;
use fedcox_core::diagnostics::{AggregatedCurve, CalibrationTable};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageKind {
    PrepareRequest,
    EvaluateRequest,
    EvaluateResponse,
    PerformanceRequest,
    PerformanceResponse,
    ErrorReport,
}

impl MessageKind {
    pub const ALL: [MessageKind; 6] = [
        MessageKind::PrepareRequest,
        MessageKind::EvaluateRequest,
        MessageKind::EvaluateResponse,
        MessageKind::PerformanceRequest,
        MessageKind::PerformanceResponse,
        MessageKind::ErrorReport,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::PrepareRequest => "PrepareRequest",
            MessageKind::EvaluateRequest => "EvaluateRequest",
            MessageKind::EvaluateResponse => "EvaluateResponse",
            MessageKind::PerformanceRequest => "PerformanceRequest",
            MessageKind::PerformanceResponse => "PerformanceResponse",
            MessageKind::ErrorReport => "ErrorReport",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub schema_version: u32,
    pub kind: MessageKind,
    pub sender: String,
    pub recipient: String,
    pub round: u64,
    pub payload: serde_json::Value,
}

impl Message {
    /// Builds an envelope; the payload is checked against `kind` when pushed.
    pub fn new<T: Serialize>(
        kind: MessageKind,
        sender: &str,
        recipient: &str,
        round: u64,
        payload: &T,
    ) -> Result<Self, TransportError> {
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            kind,
            sender: sender.to_string(),
            recipient: recipient.to_string(),
            round,
            payload: serde_json::to_value(payload)?,
        })
    }

    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, TransportError> {
        T::deserialize(&self.payload).map_err(|e| TransportError::Schema { kind: self.kind, reason: e.to_string() })
    }

    /// Checks the version and that the payload parses as its kind's type.
    pub fn validate_schema(&self) -> Result<(), TransportError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(TransportError::Version(self.schema_version));
        }
        match self.kind {
            MessageKind::PrepareRequest => self.decode::<PrepareRequest>().map(drop),
            MessageKind::EvaluateRequest => self.decode::<EvaluateRequest>().map(drop),
            MessageKind::EvaluateResponse => self.decode::<EvaluateResponse>().map(drop),
            MessageKind::PerformanceRequest => self.decode::<PerformanceRequest>().map(drop),
            MessageKind::PerformanceResponse => self.decode::<PerformanceResponse>().map(drop),
            MessageKind::ErrorReport => self.decode::<ErrorReport>().map(drop),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Selection,
    Performance,
}

/// Create `n_boot` imputed bootstrap replicates. Nothing is returned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareRequest {
    pub phase: Phase,
    pub n_boot: usize,
    pub global_seed: u64,
    /// Design columns every later request indexes into.
    pub features: Vec<String>,
    pub n_allowed_missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelColumns {
    pub id: u32,
    /// Indices into the prepared feature list; empty for the null model.
    pub columns: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub model: u32,
    pub bootstrap: u32,
    #[serde(with = "hexfloat::vec")]
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EvaluateRequest {
    Stratified {
        models: Vec<ModelColumns>,
        items: Vec<EvalItem>,
    },
    /// Unstratified protocol used only by the leakage demonstration.
    Naive(NaiveRequest),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub model: u32,
    pub bootstrap: u32,
    #[serde(with = "hexfloat")]
    pub loglik: f64,
    #[serde(with = "hexfloat::vec")]
    pub gradient: Vec<f64>,
    #[serde(with = "hexfloat::matrix")]
    pub hessian: Vec<Vec<f64>>,
    /// Out-of-bag log-likelihood scaled by `n_local / n_oob`; absent when `n_oob = 0`.
    #[serde(with = "hexfloat::option")]
    pub cv_loglik: Option<f64>,
    pub n_oob: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EvaluateResponse {
    Stratified { n_local: usize, results: Vec<EvalResult> },
    Naive(NaiveShare),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Thresholds {
    /// Linear-predictor cutpoints; empty means one group.
    Fixed {
        #[serde(with = "hexfloat::vec")]
        values: Vec<f64>,
    },
    /// Cutpoints at these quantiles of each centre's own linear predictor.
    Quantiles {
        #[serde(with = "hexfloat::vec")]
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapBeta {
    pub bootstrap: u32,
    #[serde(with = "hexfloat::vec")]
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRequest {
    pub columns: Vec<usize>,
    #[serde(with = "hexfloat::vec")]
    pub beta_median: Vec<f64>,
    pub betas: Vec<BootstrapBeta>,
    pub thresholds: Thresholds,
    #[serde(with = "hexfloat::vec")]
    pub time_points: Vec<f64>,
    pub n_groups: usize,
    #[serde(with = "hexfloat")]
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    #[serde(with = "hexfloat::vec")]
    pub knots: Vec<f64>,
    pub n_patients: Vec<usize>,
    #[serde(with = "hexfloat::vec")]
    pub median: Vec<f64>,
    #[serde(with = "hexfloat::vec")]
    pub lower: Vec<f64>,
    #[serde(with = "hexfloat::vec")]
    pub upper: Vec<f64>,
    #[serde(with = "hexfloat")]
    pub initial: f64,
}

impl From<AggregatedCurve> for CurveReport {
    fn from(c: AggregatedCurve) -> Self {
        Self {
            knots: c.knots,
            n_patients: c.n_patients,
            median: c.median,
            lower: c.lower,
            upper: c.upper,
            initial: c.initial,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(with = "hexfloat")]
    pub median: f64,
    #[serde(with = "hexfloat")]
    pub lower: f64,
    #[serde(with = "hexfloat")]
    pub upper: f64,
    /// Bootstraps contributing.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub index: usize,
    #[serde(with = "hexfloat::option")]
    pub lower_threshold: Option<f64>,
    #[serde(with = "hexfloat::option")]
    pub upper_threshold: Option<f64>,
    /// Absent when the subgroup was empty or too small to report.
    pub km: Option<CurveReport>,
    pub cox: Option<CurveReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPointReport {
    #[serde(with = "hexfloat")]
    pub predicted: f64,
    #[serde(with = "hexfloat")]
    pub observed: f64,
    #[serde(with = "hexfloat")]
    pub lower: f64,
    #[serde(with = "hexfloat")]
    pub upper: f64,
    pub n_patients: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    #[serde(with = "hexfloat")]
    pub time: f64,
    pub beyond_follow_up: bool,
    pub degenerate: bool,
    pub points: Vec<CalibrationPointReport>,
}

impl CalibrationReport {
    /// Drops points covering fewer than `min_patients`; returns how many were dropped.
    pub fn from_table(t: CalibrationTable, min_patients: usize) -> (Self, usize) {
        let total = t.points.len();
        let points: Vec<CalibrationPointReport> = t
            .points
            .into_iter()
            .filter(|p| p.n_patients >= min_patients)
            .map(|p| CalibrationPointReport {
                predicted: p.predicted,
                observed: p.observed,
                lower: p.lower,
                upper: p.upper,
                n_patients: p.n_patients,
            })
            .collect();
        let dropped = total - points.len();
        (Self { time: t.time, beyond_follow_up: t.beyond_follow_up, degenerate: t.degenerate, points }, dropped)
    }
}

/// Performance summaries computed with one choice of coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceSet {
    pub baseline: Option<CurveReport>,
    pub lp_cdf: Option<CurveReport>,
    pub c_harrell_in_bag: Option<Summary>,
    pub c_harrell_oob: Option<Summary>,
    pub subgroups: Vec<SubgroupReport>,
    pub calibration: Vec<CalibrationReport>,
    /// Curves or points withheld because they covered too few patients.
    pub suppressed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceResponse {
    pub n_local: usize,
    pub nr_pt_per_bin: usize,
    /// Every bootstrap evaluated at the median coefficients.
    pub median_beta: PerformanceSet,
    /// Every bootstrap evaluated at its own coefficients.
    pub bootstrap_beta: PerformanceSet,
    pub skipped_bootstraps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub category: ErrorCategory,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "request", rename_all = "snake_case")]
pub enum NaiveRequest {
    EventTimes {
        features: Vec<String>,
    },
    Sums {
        features: Vec<String>,
        #[serde(with = "hexfloat::vec")]
        beta: Vec<f64>,
        #[serde(with = "hexfloat::vec")]
        event_times: Vec<f64>,
    },
}

/// What a node discloses under the unstratified protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "share", rename_all = "snake_case")]
pub enum NaiveShare {
    EventTimes {
        #[serde(with = "hexfloat::vec")]
        event_times: Vec<f64>,
        /// Sum of covariate rows over local events.
        #[serde(with = "hexfloat::vec")]
        event_x_sum: Vec<f64>,
    },
    /// Per global event time: sums over the local risk set (`Y >= t`) and over
    /// local events tied at `t`, of `theta`, `theta x` and `theta x x'`.
    Sums {
        #[serde(with = "hexfloat::vec")]
        risk_set_sums: Vec<f64>,
        #[serde(with = "hexfloat::matrix")]
        risk_set_first: Vec<Vec<f64>>,
        #[serde(with = "hexfloat::matrix")]
        risk_set_second: Vec<Vec<f64>>,
        tied_counts: Vec<usize>,
        #[serde(with = "hexfloat::vec")]
        tied_sums: Vec<f64>,
        #[serde(with = "hexfloat::matrix")]
        tied_first: Vec<Vec<f64>>,
        #[serde(with = "hexfloat::matrix")]
        tied_second: Vec<Vec<f64>>,
    },
}
