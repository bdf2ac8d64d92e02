//! The unstratified protocol, in which each centre shares its per-event-time
//! risk-set sums so the coordinator can form global denominators, and the
//! reconstruction of patient covariates from what that protocol reveals.
//!
//! The risk-set sum at the last event time of a tie-free, uncensored tail is
//! `exp(x_z . beta)` for the longest survivor `z`; across Newton iterates this
//! is a linear system in `x_z`. Differencing consecutive sums peels the
//! remaining patients off one by one.

use crate::coordinator::Coordinator;
use crate::error::{FederationError, Result};
use crate::hexfloat;
use crate::message::{EvaluateRequest, EvaluateResponse, Message, MessageKind, NaiveRequest, NaiveShare};
use fedcox_core::survival::{NewtonOptions, NewtonState, NewtonStatus};
use fedcox_core::LikelihoodEval;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Below this ratio of smallest to largest singular value the iterates are
/// treated as spanning fewer than `p` dimensions.
pub const RANK_TOLERANCE: f64 = 1e-10;
/// A peeled remainder smaller than this fraction of its sum is treated as empty.
pub const PEEL_TOLERANCE: f64 = 1e-8;
/// Root-mean-square log residual above which a peeled step is taken to hold
/// more than one patient.
pub const RESIDUAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum AttackError {
    #[error("insufficient independent iterations: {iterations} iterates span rank {rank} < {p}")]
    InsufficientIterations { iterations: usize, rank: usize, p: usize },
    #[error("transcript has no centre {0}")]
    UnknownCentre(String),
    #[error("transcript is empty")]
    EmptyTranscript,
    #[error("risk-set sum {0} is not positive")]
    NonPositive(f64),
    #[error("coefficient dimension changes within the transcript")]
    Ragged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentreShare {
    pub centre: String,
    /// The centre's own distinct event times, ascending.
    #[serde(with = "hexfloat::vec")]
    pub event_times: Vec<f64>,
    /// Risk-set sums of `exp(x . beta)` at those times.
    #[serde(with = "hexfloat::vec")]
    pub risk_set_sums: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakStep {
    #[serde(with = "hexfloat::vec")]
    pub beta: Vec<f64>,
    pub centres: Vec<CentreShare>,
}

/// Everything the coordinator saw: one step per likelihood evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LeakTranscript {
    pub steps: Vec<LeakStep>,
}

/// One centre's sums across iterates, ready for the attack.
#[derive(Debug, Clone, PartialEq)]
pub struct CentreSeries {
    pub betas: Vec<Vec<f64>>,
    pub event_times: Vec<f64>,
    /// `sums[k][j]`: iterate `k`, event time `j`.
    pub sums: Vec<Vec<f64>>,
}

impl LeakTranscript {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn centres(&self) -> Vec<String> {
        let mut names: Vec<String> =
            self.steps.iter().flat_map(|s| s.centres.iter().map(|c| c.centre.clone())).collect();
        names.sort();
        names.dedup();
        names
    }

    /// Rebuilds the transcript from a channel log. Only unstratified
    /// exchanges contribute, so a stratified run yields an empty transcript.
    pub fn from_messages(log: &[Message]) -> Result<Self> {
        let mut own_times: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut requests: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        let mut replies: BTreeMap<u64, Vec<(String, Vec<f64>)>> = BTreeMap::new();
        for msg in log {
            match msg.kind {
                MessageKind::EvaluateRequest => {
                    if let EvaluateRequest::Naive(NaiveRequest::Sums { beta, event_times, .. }) = msg.decode()? {
                        requests.entry(msg.round).or_insert((beta, event_times));
                    }
                }
                MessageKind::EvaluateResponse => match msg.decode()? {
                    EvaluateResponse::Naive(NaiveShare::EventTimes { event_times, .. }) => {
                        own_times.insert(msg.sender.clone(), event_times);
                    }
                    EvaluateResponse::Naive(NaiveShare::Sums { risk_set_sums, .. }) => {
                        replies.entry(msg.round).or_default().push((msg.sender.clone(), risk_set_sums));
                    }
                    EvaluateResponse::Stratified { .. } => {}
                },
                _ => {}
            }
        }
        let mut steps = Vec::new();
        for (round, (beta, global)) in requests {
            let mut centres = Vec::new();
            for (centre, sums) in replies.remove(&round).unwrap_or_default() {
                let own = own_times.get(&centre).cloned().unwrap_or_default();
                let mut picked = Vec::with_capacity(own.len());
                for t in &own {
                    let j = global.iter().position(|g| g == t).ok_or_else(|| {
                        FederationError::Protocol(format!("event time {t} of {centre} not in the global list"))
                    })?;
                    picked.push(*sums.get(j).ok_or_else(|| FederationError::Protocol("short sum vector".into()))?);
                }
                centres.push(CentreShare { centre, event_times: own, risk_set_sums: picked });
            }
            centres.sort_by(|a, b| a.centre.cmp(&b.centre));
            if !centres.is_empty() {
                steps.push(LeakStep { beta, centres });
            }
        }
        Ok(Self { steps })
    }

    pub fn series(&self, centre: &str) -> std::result::Result<CentreSeries, AttackError> {
        let mut out: Option<CentreSeries> = None;
        for step in &self.steps {
            let Some(share) = step.centres.iter().find(|c| c.centre == centre) else { continue };
            let s = out.get_or_insert_with(|| CentreSeries {
                betas: Vec::new(),
                event_times: share.event_times.clone(),
                sums: Vec::new(),
            });
            if s.event_times != share.event_times || s.betas.first().is_some_and(|b| b.len() != step.beta.len()) {
                return Err(AttackError::Ragged);
            }
            s.betas.push(step.beta.clone());
            s.sums.push(share.risk_set_sums.clone());
        }
        out.ok_or_else(|| AttackError::UnknownCentre(centre.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredRow {
    #[serde(with = "hexfloat")]
    pub time: f64,
    #[serde(with = "hexfloat::vec")]
    pub row: Vec<f64>,
    /// Root-mean-square residual of the log-linear fit.
    #[serde(with = "hexfloat")]
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeelReport {
    /// Recovered rows, longest survivor first.
    pub rows: Vec<RecoveredRow>,
    /// Every event time was peeled.
    pub complete: bool,
    /// Why peeling stopped early.
    pub stopped: Option<String>,
    /// Ratio of largest to smallest singular value of the iterate matrix.
    #[serde(with = "hexfloat")]
    pub condition: f64,
}

/// Least squares for `log r_k = beta_k . x`; returns `(x, rms residual, condition)`.
fn solve_log_linear(
    betas: &[Vec<f64>],
    remainders: &[f64],
    p: usize,
) -> std::result::Result<(Vec<f64>, f64, f64), AttackError> {
    let k = betas.len();
    if let Some(r) = remainders.iter().find(|r| !(**r > 0.0)) {
        return Err(AttackError::NonPositive(*r));
    }
    let a = DMatrix::from_fn(k, p, |i, j| betas[i][j]);
    let y = DVector::from_iterator(k, remainders.iter().map(|r| r.ln()));
    let svd = a.clone().svd(true, true);
    let max = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|s| **s > RANK_TOLERANCE * max).count();
    if k < p || rank < p || !(max > 0.0) {
        return Err(AttackError::InsufficientIterations { iterations: k, rank, p });
    }
    let x = svd.solve(&y, RANK_TOLERANCE * max).map_err(|_| AttackError::InsufficientIterations {
        iterations: k,
        rank,
        p,
    })?;
    let residual = (&a * &x - &y).norm() / (k as f64).sqrt();
    let condition = max / svd.singular_values.min();
    Ok((x.iter().copied().collect(), residual, condition))
}

fn check_dims(series: &CentreSeries, p: usize) -> std::result::Result<(), AttackError> {
    if series.betas.is_empty() || series.event_times.is_empty() {
        return Err(AttackError::EmptyTranscript);
    }
    if series.betas.iter().any(|b| b.len() != p) || series.sums.iter().any(|s| s.len() != series.event_times.len()) {
        return Err(AttackError::Ragged);
    }
    Ok(())
}

/// Covariates of the patient with the last event time, assuming nobody else
/// is at risk then.
pub fn reconstruct_longest_survivor(series: &CentreSeries, p: usize) -> std::result::Result<RecoveredRow, AttackError> {
    check_dims(series, p)?;
    let last = series.event_times.len() - 1;
    let r: Vec<f64> = series.sums.iter().map(|s| s[last]).collect();
    let (row, residual, condition) = solve_log_linear(&series.betas, &r, p)?;
    log::info!("longest survivor recovered; iterate condition number {condition:.3e}");
    Ok(RecoveredRow { time: series.event_times[last], row, residual })
}

/// Peels patients off from the longest survivor backwards, subtracting the
/// recovered patients' `exp(x . beta)` from each earlier sum. Stops where a
/// step evidently holds several patients (ties or censoring) or nothing.
pub fn recursive_peel(series: &CentreSeries, p: usize) -> std::result::Result<PeelReport, AttackError> {
    check_dims(series, p)?;
    let mut rows: Vec<RecoveredRow> = Vec::new();
    let mut stopped = None;
    let mut condition = f64::NAN;
    for j in (0..series.event_times.len()).rev() {
        let t = series.event_times[j];
        let remainders: Vec<f64> = series
            .betas
            .iter()
            .zip(&series.sums)
            .map(|(beta, sums)| {
                let known: f64 = rows.iter().map(|r| dot(&r.row, beta).exp()).sum();
                sums[j] - known
            })
            .collect();
        if remainders.iter().zip(&series.sums).any(|(r, s)| *r <= PEEL_TOLERANCE * s[j]) {
            stopped = Some(format!("nothing left to peel at time {t}"));
            break;
        }
        let (row, residual, cond) = solve_log_linear(&series.betas, &remainders, p)?;
        condition = cond;
        if residual > RESIDUAL_TOLERANCE {
            stopped = Some(format!("step at time {t} is not one patient (residual {residual:.2e}); ties or censoring"));
            break;
        }
        rows.push(RecoveredRow { time: t, row, residual });
    }
    let complete = stopped.is_none();
    Ok(PeelReport { rows, complete, stopped, condition })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaiveFit {
    pub beta: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Fits the unstratified Cox model through the unstratified protocol. Every
/// request makes each centre disclose per-event-time risk-set sums.
pub fn naive_federated_fit(coord: &mut Coordinator, features: &[String], options: NewtonOptions) -> Result<NaiveFit> {
    log::warn!(
        "running the unstratified protocol: centres disclose risk-set sums from which patients can be reconstructed"
    );
    let p = features.len();
    let round = coord.broadcast(
        MessageKind::EvaluateRequest,
        &EvaluateRequest::Naive(NaiveRequest::EventTimes { features: features.to_vec() }),
    )?;
    let mut times = Vec::new();
    let mut x_sum = vec![0.0; p];
    for msg in coord.collect(MessageKind::EvaluateResponse, round)? {
        match msg.decode()? {
            EvaluateResponse::Naive(NaiveShare::EventTimes { event_times, event_x_sum }) => {
                if event_x_sum.len() != p {
                    return Err(FederationError::Protocol(format!(
                        "{} sent {} sums for {p} features",
                        msg.sender,
                        event_x_sum.len()
                    )));
                }
                times.extend(event_times);
                for (s, v) in x_sum.iter_mut().zip(event_x_sum) {
                    *s += v;
                }
            }
            _ => return Err(FederationError::Protocol(format!("{} did not share event times", msg.sender))),
        }
    }
    times.sort_by(f64::total_cmp);
    times.dedup();
    if times.is_empty() {
        return Err(fedcox_core::CoxError::NoEvents.into());
    }

    let mut state = NewtonState::new(p, options);
    loop {
        let beta: Vec<f64> = state.trial().iter().copied().collect();
        let req = NaiveRequest::Sums { features: features.to_vec(), beta: beta.clone(), event_times: times.clone() };
        let round = coord.broadcast(MessageKind::EvaluateRequest, &EvaluateRequest::Naive(req))?;
        let mut shares = Vec::new();
        for msg in coord.collect(MessageKind::EvaluateResponse, round)? {
            match msg.decode()? {
                EvaluateResponse::Naive(share @ NaiveShare::Sums { .. }) => shares.push(share),
                _ => return Err(FederationError::Protocol(format!("{} did not share risk-set sums", msg.sender))),
            }
        }
        let eval = efron_from_sums(&beta, &x_sum, &shares, times.len())?;
        if state.update(eval)? == NewtonStatus::Converged {
            let fit = state.into_fit()?;
            return Ok(NaiveFit {
                beta: fit.beta.iter().copied().collect(),
                loglik: fit.eval.loglik,
                iterations: fit.iterations,
                converged: fit.converged,
            });
        }
    }
}

/// Efron log-likelihood, gradient and Hessian from per-centre sums over risk
/// sets and tied events at each global event time.
pub fn efron_from_sums(beta: &[f64], event_x_sum: &[f64], shares: &[NaiveShare], m: usize) -> Result<LikelihoodEval> {
    let p = beta.len();
    let mut r0 = vec![0.0; m];
    let mut r1 = vec![DVector::<f64>::zeros(p); m];
    let mut r2 = vec![DMatrix::<f64>::zeros(p, p); m];
    let mut d = vec![0usize; m];
    let mut t0 = vec![0.0; m];
    let mut t1 = vec![DVector::<f64>::zeros(p); m];
    let mut t2 = vec![DMatrix::<f64>::zeros(p, p); m];
    let bad = || FederationError::Protocol("risk-set sums have the wrong shape".into());
    for share in shares {
        let NaiveShare::Sums {
            risk_set_sums,
            risk_set_first,
            risk_set_second,
            tied_counts,
            tied_sums,
            tied_first,
            tied_second,
        } = share
        else {
            return Err(bad());
        };
        let lens = [
            risk_set_sums.len(),
            risk_set_first.len(),
            risk_set_second.len(),
            tied_counts.len(),
            tied_sums.len(),
            tied_first.len(),
            tied_second.len(),
        ];
        if lens.iter().any(|&l| l != m) {
            return Err(bad());
        }
        for j in 0..m {
            if risk_set_first[j].len() != p
                || tied_first[j].len() != p
                || risk_set_second[j].len() != p * p
                || tied_second[j].len() != p * p
            {
                return Err(bad());
            }
            r0[j] += risk_set_sums[j];
            r1[j] += DVector::from_column_slice(&risk_set_first[j]);
            r2[j] += DMatrix::from_row_slice(p, p, &risk_set_second[j]);
            d[j] += tied_counts[j];
            t0[j] += tied_sums[j];
            t1[j] += DVector::from_column_slice(&tied_first[j]);
            t2[j] += DMatrix::from_row_slice(p, p, &tied_second[j]);
        }
    }
    let b = DVector::from_column_slice(beta);
    let xs = DVector::from_column_slice(event_x_sum);
    let mut loglik = xs.dot(&b);
    let mut gradient = xs.clone();
    let mut hessian = DMatrix::zeros(p, p);
    for j in 0..m {
        for l in 0..d[j] {
            let f = l as f64 / d[j] as f64;
            let den = r0[j] - f * t0[j];
            let num1 = &r1[j] - &t1[j] * f;
            let num2 = &r2[j] - &t2[j] * f;
            loglik -= den.ln();
            gradient -= &num1 / den;
            hessian -= num2 / den - (&num1 * num1.transpose()) / (den * den);
        }
    }
    Ok(LikelihoodEval { loglik, gradient, hessian })
}
