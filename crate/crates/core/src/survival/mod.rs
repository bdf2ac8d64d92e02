//! Cox proportional-hazards primitives: risk sets, the Efron partial
//! likelihood with analytic derivatives, Newton iteration, the Breslow
//! baseline and the Kaplan-Meier estimator.

mod baseline;
mod efron;
mod newton;
mod risk;

pub use baseline::{breslow_baseline, cox_survival, kaplan_meier, nelson_aalen, StepFunction};
pub use efron::{efron_loglik, efron_loglik_stratified, LikelihoodEval};
pub use newton::{
    fit_cox, fit_stratified, newton_step, reciprocal_condition, CoxFit, NewtonOptions, NewtonState, NewtonStatus,
    SINGULAR_RCOND,
};
pub use risk::{build_risk_index, RiskSetIndex};

use crate::error::{CoxError, Result};
use nalgebra::DVector;

/// Regression coefficients, ordered like the covariate columns.
pub type Beta = DVector<f64>;

/// Right-censored survival outcomes with a fully observed covariate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalData {
    times: Vec<f64>,
    events: Vec<bool>,
    /// Row-major, `n * p`.
    covariates: Vec<f64>,
    n_features: usize,
    feature_names: Vec<String>,
}

impl SurvivalData {
    pub fn new(times: Vec<f64>, events: Vec<bool>, covariates: Vec<f64>, feature_names: Vec<String>) -> Result<Self> {
        let n = times.len();
        let p = feature_names.len();
        if n == 0 {
            return Err(CoxError::InvalidData("at least one patient is required".into()));
        }
        if events.len() != n {
            return Err(CoxError::DimensionMismatch { expected: n, found: events.len() });
        }
        if covariates.len() != n * p {
            return Err(CoxError::DimensionMismatch { expected: n * p, found: covariates.len() });
        }
        if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(CoxError::InvalidData(format!("survival time {t} is not strictly positive")));
        }
        if covariates.iter().any(|x| !x.is_finite()) {
            return Err(CoxError::InvalidData("covariates contain missing or non-finite values".into()));
        }
        Ok(Self { times, events, covariates, n_features: p, feature_names })
    }

    /// Builds a dataset from per-patient covariate rows; feature names default to `x1..xp`.
    pub fn from_rows(times: Vec<f64>, events: Vec<bool>, rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != p) {
            return Err(CoxError::DimensionMismatch { expected: p, found: bad.len() });
        }
        let names = (1..=p).map(|k| format!("x{k}")).collect();
        Self::new(times, events, rows.concat(), names)
    }

    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn p(&self) -> usize {
        self.n_features
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn events(&self) -> &[bool] {
        &self.events
    }

    pub fn n_events(&self) -> usize {
        self.events.iter().filter(|e| **e).count()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Row-major covariate storage.
    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_features;
        &self.covariates[i * p..(i + 1) * p]
    }

    /// Rows picked by index; repeated indices yield repeated rows.
    pub fn subset_rows(&self, rows: &[usize]) -> Result<Self> {
        let p = self.n_features;
        let mut cov = Vec::with_capacity(rows.len() * p);
        for &i in rows {
            cov.extend_from_slice(self.row(i));
        }
        Self::new(
            rows.iter().map(|&i| self.times[i]).collect(),
            rows.iter().map(|&i| self.events[i]).collect(),
            cov,
            self.feature_names.clone(),
        )
    }

    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        if let Some(&c) = cols.iter().find(|&&c| c >= self.n_features) {
            return Err(CoxError::DimensionMismatch { expected: self.n_features, found: c + 1 });
        }
        let mut cov = Vec::with_capacity(self.n() * cols.len());
        for i in 0..self.n() {
            let row = self.row(i);
            cov.extend(cols.iter().map(|&c| row[c]));
        }
        Self::new(
            self.times.clone(),
            self.events.clone(),
            cov,
            cols.iter().map(|&c| self.feature_names[c].clone()).collect(),
        )
    }

    /// Stacks datasets with identical feature lists (pooling centres into one stratum).
    pub fn concat(parts: &[SurvivalData]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| CoxError::InvalidData("nothing to concatenate".into()))?;
        let mut times = Vec::new();
        let mut events = Vec::new();
        let mut cov = Vec::new();
        for part in parts {
            if part.feature_names != first.feature_names {
                return Err(CoxError::InvalidData("feature lists differ between parts".into()));
            }
            times.extend_from_slice(&part.times);
            events.extend_from_slice(&part.events);
            cov.extend_from_slice(&part.covariates);
        }
        Self::new(times, events, cov, first.feature_names.clone())
    }

    pub fn shift_column(&self, col: usize, offset: f64) -> Self {
        let mut out = self.clone();
        let p = self.n_features;
        for i in 0..self.n() {
            out.covariates[i * p + col] += offset;
        }
        out
    }

    pub fn linear_predictor(&self, beta: &Beta) -> Result<Vec<f64>> {
        if self.n_features == 0 && beta.is_empty() {
            return Ok(vec![0.0; self.n()]);
        }
        linear_predictor(&self.covariates, self.n_features, beta)
    }
}

/// Row-wise `x_i . beta` for a row-major matrix with `p` columns.
pub fn linear_predictor(covariates: &[f64], p: usize, beta: &Beta) -> Result<Vec<f64>> {
    if beta.len() != p {
        return Err(CoxError::DimensionMismatch { expected: p, found: beta.len() });
    }
    if p == 0 {
        return Err(CoxError::InvalidData(
            "zero-column design; the linear predictor of the null model is identically 0".into(),
        ));
    }
    if covariates.len() % p != 0 {
        return Err(CoxError::DimensionMismatch { expected: p, found: covariates.len() % p });
    }
    Ok(covariates.chunks_exact(p).map(|row| row.iter().zip(beta.iter()).map(|(x, b)| x * b).sum()).collect())
}
