//! A data holder: keeps its patients, answers likelihood and performance
//! requests, and only ever sends p-dimensional or aggregated quantities.

use crate::config::LocalConfig;
use crate::error::{FederationError, Result, TransportError};
use crate::message::{
    CalibrationReport, CurveReport, ErrorReport, EvalResult, EvaluateRequest, EvaluateResponse, Message, MessageKind,
    NaiveRequest, NaiveShare, PerformanceRequest, PerformanceResponse, PerformanceSet, Phase, PrepareRequest,
    SubgroupReport, Summary, Thresholds, SCHEMA_VERSION,
};
use crate::transport::{validate_privacy, Mailbox};
use fedcox_core::dataset::{RawColumn, RawDataset};
use fedcox_core::diagnostics::{
    aggregate_curve, c_harrell, calibration, empirical_cdf, median_and_band, percentile, subgroup_km_vs_cox,
    CalibrationReplicate, KnotGrid,
};
use fedcox_core::imputation::{chained_impute, initial_impute, ImputationConfig};
use fedcox_core::simulation::filter_missing;
use fedcox_core::survival::{breslow_baseline, build_risk_index, efron_loglik};
use fedcox_core::{Beta, CoxError, LikelihoodEval, RiskSetIndex, StepFunction, SurvivalData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Duration;

/// Cohorts smaller than this after filtering are refused.
pub const MIN_COHORT: usize = 10;

const PERFORMANCE_STREAM: u64 = 1 << 32;

/// A sample of the completed cohort with its cached risk sets (`None` when it
/// holds no events).
#[derive(Debug, Clone)]
struct Sample {
    data: SurvivalData,
    index: Option<RiskSetIndex>,
}

impl Sample {
    fn new(data: SurvivalData) -> Result<Self> {
        let index = match build_risk_index(&data) {
            Ok(i) => Some(i),
            Err(CoxError::NoEvents) => None,
            Err(e) => return Err(e.into()),
        };
        Ok(Self { data, index })
    }

    fn loglik(&self, cols: &[usize], beta: &Beta) -> std::result::Result<LikelihoodEval, CoxError> {
        match &self.index {
            Some(idx) => efron_loglik(&self.data.select_columns(cols)?, idx, beta),
            None => Ok(LikelihoodEval::zero(cols.len())),
        }
    }
}

/// One imputed copy of the cohort with its bootstrap draw.
#[derive(Debug, Clone)]
pub struct Replicate {
    completed: SurvivalData,
    in_bag_rows: Vec<usize>,
    oob_rows: Vec<usize>,
    in_bag: Sample,
    oob: Option<Sample>,
}

impl Replicate {
    pub fn completed(&self) -> &SurvivalData {
        &self.completed
    }

    /// Row indices drawn with replacement, as many as patients.
    pub fn in_bag(&self) -> &[usize] {
        &self.in_bag_rows
    }

    /// Patients never drawn.
    pub fn out_of_bag(&self) -> &[usize] {
        &self.oob_rows
    }
}

#[derive(Debug)]
struct Prepared {
    phase: Phase,
    n_local: usize,
    replicates: Vec<Replicate>,
}

pub struct LocalNode {
    name: String,
    raw: RawDataset,
    local_seed: u64,
    nr_pt_per_bin: usize,
    n_allowed_missing: Option<usize>,
    imputation: ImputationConfig,
    enforce_privacy: bool,
    prepared: Option<Prepared>,
}

impl LocalNode {
    /// `config.data_paths` is ignored; the cohort is given directly.
    pub fn new(name: &str, raw: RawDataset, config: &LocalConfig) -> Result<Self> {
        crate::transport::check_name(name)?;
        if config.nr_pt_per_bin == 0 {
            return Err(FederationError::Config("NrPtPerBin must be at least 1".into()));
        }
        Ok(Self {
            name: name.to_string(),
            raw,
            local_seed: config.local_seed,
            nr_pt_per_bin: config.nr_pt_per_bin,
            n_allowed_missing: config.n_allowed_missing,
            imputation: ImputationConfig::default(),
            enforce_privacy: true,
            prepared: None,
        })
    }

    /// Reads and stacks every CSV listed in `DataPaths`.
    pub fn from_config(name: &str, config: &LocalConfig) -> Result<Self> {
        let mut parts = Vec::new();
        for path in &config.data_paths {
            let file =
                std::fs::File::open(path).map_err(|e| FederationError::Data(format!("{}: {e}", path.display())))?;
            parts.push(RawDataset::read_csv(file)?);
        }
        Self::new(name, stack(parts)?, config)
    }

    /// With privacy enforcement off the node also answers the unstratified
    /// protocol, which discloses per-event risk-set sums.
    pub fn with_privacy(mut self, enforce: bool) -> Self {
        self.enforce_privacy = enforce;
        self
    }

    pub fn with_imputation(mut self, cfg: ImputationConfig) -> Self {
        self.imputation = cfg;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn nr_pt_per_bin(&self) -> usize {
        self.nr_pt_per_bin
    }

    pub fn replicates(&self) -> &[Replicate] {
        self.prepared.as_ref().map_or(&[], |p| &p.replicates)
    }

    /// Patients left after the missing-value filter of the last preparation.
    pub fn n_local(&self) -> Option<usize> {
        self.prepared.as_ref().map(|p| p.n_local)
    }

    fn filtered(&self, coordinator_allowed: usize) -> Result<RawDataset> {
        let allowed = self.n_allowed_missing.unwrap_or(coordinator_allowed);
        let raw = filter_missing(&self.raw, allowed)?;
        if raw.n() < MIN_COHORT {
            return Err(FederationError::Data(format!(
                "{} patients remain after filtering, at least {MIN_COHORT} needed",
                raw.n()
            )));
        }
        Ok(raw)
    }

    /// Builds `n_boot` imputed bootstrap replicates. Replicate `k` draws from
    /// a generator seeded by `global_seed + LocalSeed` on stream `k`
    /// (offset for the performance phase).
    pub fn prepare(&mut self, req: &PrepareRequest) -> Result<()> {
        self.prepared = None;
        let raw = self.filtered(req.n_allowed_missing)?;
        let n = raw.n();
        let offset = match req.phase {
            Phase::Selection => 0,
            Phase::Performance => PERFORMANCE_STREAM,
        };
        let seed = req.global_seed.wrapping_add(self.local_seed);
        let replicates = (0..req.n_boot)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(offset + k as u64);
                let (table, _) = chained_impute(&raw, &self.imputation, &mut rng)?;
                let completed = table.survival_data(&req.features)?;
                let in_bag_rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let mut drawn = vec![false; n];
                for &i in &in_bag_rows {
                    drawn[i] = true;
                }
                let oob_rows: Vec<usize> = (0..n).filter(|&i| !drawn[i]).collect();
                let in_bag = Sample::new(completed.subset_rows(&in_bag_rows)?)?;
                let oob =
                    if oob_rows.is_empty() { None } else { Some(Sample::new(completed.subset_rows(&oob_rows)?)?) };
                Ok(Replicate { completed, in_bag_rows, oob_rows, in_bag, oob })
            })
            .collect::<Result<Vec<_>>>()?;
        log::debug!("{}: {} replicates over {n} patients", self.name, replicates.len());
        self.prepared = Some(Prepared { phase: req.phase, n_local: n, replicates });
        Ok(())
    }

    fn prepared(&self) -> Result<&Prepared> {
        self.prepared.as_ref().ok_or_else(|| FederationError::Protocol("request received before preparation".into()))
    }

    pub fn evaluate(&self, req: &EvaluateRequest) -> Result<EvaluateResponse> {
        match req {
            EvaluateRequest::Stratified { models, items } => {
                let prep = self.prepared()?;
                let n_local = prep.n_local;
                let results = items
                    .par_iter()
                    .map(|item| {
                        let mut out = EvalResult {
                            model: item.model,
                            bootstrap: item.bootstrap,
                            loglik: 0.0,
                            gradient: vec![0.0; item.beta.len()],
                            hessian: vec![vec![0.0; item.beta.len()]; item.beta.len()],
                            cv_loglik: None,
                            n_oob: 0,
                            error: None,
                        };
                        let Some(model) = models.iter().find(|m| m.id == item.model) else {
                            out.error = Some(format!("unknown model {}", item.model));
                            return out;
                        };
                        let Some(rep) = prep.replicates.get(item.bootstrap as usize) else {
                            out.error = Some(format!("unknown bootstrap {}", item.bootstrap));
                            return out;
                        };
                        if model.columns.len() != item.beta.len() {
                            out.error = Some(format!(
                                "model {} has {} columns but beta has {}",
                                model.id,
                                model.columns.len(),
                                item.beta.len()
                            ));
                            return out;
                        }
                        let beta = Beta::from_vec(item.beta.clone());
                        out.n_oob = rep.oob_rows.len();
                        let evaluated = rep.in_bag.loglik(&model.columns, &beta).and_then(|e| {
                            let cv = match &rep.oob {
                                Some(s) => {
                                    Some(s.loglik(&model.columns, &beta)?.loglik * n_local as f64 / out.n_oob as f64)
                                }
                                None => None,
                            };
                            Ok((e, cv))
                        });
                        match evaluated {
                            Ok((e, cv)) => {
                                out.loglik = e.loglik;
                                out.gradient = e.gradient.iter().copied().collect();
                                out.hessian = e.hessian.row_iter().map(|r| r.iter().copied().collect()).collect();
                                out.cv_loglik = cv;
                            }
                            Err(e) => out.error = Some(e.to_string()),
                        }
                        out
                    })
                    .collect();
                Ok(EvaluateResponse::Stratified { n_local, results })
            }
            EvaluateRequest::Naive(naive) => {
                if self.enforce_privacy {
                    return Err(FederationError::Protocol(
                        "unstratified requests disclose per-event risk-set sums and are refused".into(),
                    ));
                }
                log::warn!("{}: answering an unstratified request; risk-set sums leave the centre", self.name);
                Ok(EvaluateResponse::Naive(self.naive_share(naive)?))
            }
        }
    }

    fn naive_data(&self, features: &[String]) -> Result<SurvivalData> {
        let raw = self.filtered(usize::MAX)?;
        Ok(initial_impute(&raw)?.survival_data(features)?)
    }

    fn naive_share(&self, req: &NaiveRequest) -> Result<NaiveShare> {
        match req {
            NaiveRequest::EventTimes { features } => {
                let data = self.naive_data(features)?;
                let mut times: Vec<f64> =
                    (0..data.n()).filter(|&i| data.events()[i]).map(|i| data.times()[i]).collect();
                times.sort_by(f64::total_cmp);
                times.dedup();
                let mut sum = vec![0.0; data.p()];
                for i in (0..data.n()).filter(|&i| data.events()[i]) {
                    for (s, x) in sum.iter_mut().zip(data.row(i)) {
                        *s += x;
                    }
                }
                Ok(NaiveShare::EventTimes { event_times: times, event_x_sum: sum })
            }
            NaiveRequest::Sums { features, beta, event_times } => {
                let data = self.naive_data(features)?;
                let p = data.p();
                if beta.len() != p {
                    return Err(FederationError::Protocol(format!("beta has {} entries for {p} features", beta.len())));
                }
                let lp = data.linear_predictor(&Beta::from_vec(beta.clone()))?;
                let m = event_times.len();
                let mut share = NaiveSums::new(m, p);
                for i in 0..data.n() {
                    let theta = lp[i].exp();
                    let x = data.row(i);
                    let t = data.times()[i];
                    // risk sets of every event time not after t
                    let upto = event_times.partition_point(|&e| e <= t);
                    for j in 0..upto {
                        share.add_risk(j, theta, x);
                    }
                    if data.events()[i] {
                        if let Some(j) = event_times.iter().position(|&e| e == t) {
                            share.add_tied(j, theta, x);
                        }
                    }
                }
                Ok(share.into_share())
            }
        }
    }

    /// Performance summaries of the final model, once with the median
    /// coefficients and once with each bootstrap's own coefficients.
    pub fn performance(&self, req: &PerformanceRequest) -> Result<PerformanceResponse> {
        let prep = self.prepared()?;
        if prep.phase != Phase::Performance {
            log::warn!("{}: performance requested on selection-phase replicates", self.name);
        }
        let p = req.columns.len();
        if req.beta_median.len() != p || req.betas.iter().any(|b| b.beta.len() != p) {
            return Err(FederationError::Protocol("coefficient length does not match the model".into()));
        }
        if let Some(b) = req.betas.iter().find(|b| b.bootstrap as usize >= prep.replicates.len()) {
            return Err(FederationError::Protocol(format!("unknown bootstrap {}", b.bootstrap)));
        }
        let median = Beta::from_vec(req.beta_median.clone());
        let used: Vec<(usize, Beta)> =
            req.betas.iter().map(|b| (b.bootstrap as usize, Beta::from_vec(b.beta.clone()))).collect();

        // Per-patient reference predictor: median over imputations at the median beta.
        let mut per_rep = Vec::with_capacity(used.len());
        for (k, _) in &used {
            per_rep.push(prep.replicates[*k].completed.select_columns(&req.columns)?.linear_predictor(&median)?);
        }
        if per_rep.is_empty() {
            return Err(FederationError::Protocol("no bootstrap coefficients supplied".into()));
        }
        let reference: Vec<f64> = (0..prep.n_local)
            .map(|i| {
                let mut v: Vec<f64> = per_rep.iter().map(|lp| lp[i]).collect();
                v.sort_by(f64::total_cmp);
                percentile(&v, 0.5)
            })
            .collect();
        let mut sorted = reference.clone();
        sorted.sort_by(f64::total_cmp);
        let mut thresholds: Vec<f64> = match &req.thresholds {
            Thresholds::Fixed { values } => values.clone(),
            Thresholds::Quantiles { probs } => probs.iter().map(|q| percentile(&sorted, *q)).collect(),
        };
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();

        let ctx = PerfContext { prep, req, reference: &reference, thresholds: &thresholds, min: self.nr_pt_per_bin };
        let median_set = ctx.set(&used.iter().map(|(k, _)| (*k, median.clone())).collect::<Vec<_>>())?;
        let boot_set = ctx.set(&used)?;
        Ok(PerformanceResponse {
            n_local: prep.n_local,
            nr_pt_per_bin: self.nr_pt_per_bin,
            median_beta: median_set.0,
            bootstrap_beta: boot_set.0,
            skipped_bootstraps: prep.replicates.len() - used.len() + median_set.1.max(boot_set.1),
        })
    }

    /// Answers one request; `None` for requests that need no reply.
    pub fn handle(&mut self, msg: &Message) -> Result<Option<Message>> {
        let (kind, payload) = match msg.kind {
            MessageKind::PrepareRequest => {
                self.prepare(&msg.decode()?)?;
                return Ok(None);
            }
            MessageKind::EvaluateRequest => (
                MessageKind::EvaluateResponse,
                serde_json::to_value(self.evaluate(&msg.decode()?)?).map_err(TransportError::from)?,
            ),
            MessageKind::PerformanceRequest => (
                MessageKind::PerformanceResponse,
                serde_json::to_value(self.performance(&msg.decode()?)?).map_err(TransportError::from)?,
            ),
            other => return Err(FederationError::Protocol(format!("a data holder does not accept {other:?}"))),
        };
        Ok(Some(Message {
            schema_version: SCHEMA_VERSION,
            kind,
            sender: self.name.clone(),
            recipient: msg.sender.clone(),
            round: msg.round,
            payload,
        }))
    }

    fn n_for_privacy(&self) -> usize {
        self.prepared.as_ref().map_or_else(
            || filter_missing(&self.raw, self.n_allowed_missing.unwrap_or(usize::MAX)).map_or(self.raw.n(), |r| r.n()),
            |p| p.n_local,
        )
    }

    /// Handles messages until the channel closes. Failures are reported to
    /// the requester as error reports and do not stop the loop.
    pub fn serve(&mut self, mailbox: &mut Mailbox) -> Result<()> {
        let wait = Duration::from_secs(3600);
        loop {
            let msg = match mailbox.next_message(wait) {
                Ok(Some(m)) => m,
                Ok(None) => continue,
                Err(TransportError::Closed) => return Ok(()),
                Err(e) => return Err(e.into()),
            };
            let outcome = self.handle(&msg).and_then(|reply| match reply {
                Some(r) if self.enforce_privacy => {
                    let v = validate_privacy(&r, self.n_for_privacy(), self.nr_pt_per_bin);
                    if v.is_empty() {
                        Ok(Some(r))
                    } else {
                        Err(FederationError::PrivacyViolation(v))
                    }
                }
                other => Ok(other),
            });
            let reply = match outcome {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("{}: {e}", self.name);
                    let report = ErrorReport { category: e.category(), message: e.to_string() };
                    Some(Message::new(MessageKind::ErrorReport, &self.name, &msg.sender, msg.round, &report)?)
                }
            };
            if let Some(r) = reply {
                match mailbox.send(&r) {
                    Ok(()) => {}
                    Err(TransportError::Closed) => return Ok(()),
                    Err(e) => return Err(e.into()),
                }
            }
        }
    }
}

struct NaiveSums {
    p: usize,
    risk: Vec<f64>,
    risk1: Vec<Vec<f64>>,
    risk2: Vec<Vec<f64>>,
    tied: Vec<usize>,
    tied0: Vec<f64>,
    tied1: Vec<Vec<f64>>,
    tied2: Vec<Vec<f64>>,
}

impl NaiveSums {
    fn new(m: usize, p: usize) -> Self {
        Self {
            p,
            risk: vec![0.0; m],
            risk1: vec![vec![0.0; p]; m],
            risk2: vec![vec![0.0; p * p]; m],
            tied: vec![0; m],
            tied0: vec![0.0; m],
            tied1: vec![vec![0.0; p]; m],
            tied2: vec![vec![0.0; p * p]; m],
        }
    }

    fn accumulate(p: usize, s0: &mut f64, s1: &mut [f64], s2: &mut [f64], theta: f64, x: &[f64]) {
        *s0 += theta;
        for a in 0..p {
            s1[a] += theta * x[a];
            for b in 0..p {
                s2[a * p + b] += theta * x[a] * x[b];
            }
        }
    }

    fn add_risk(&mut self, j: usize, theta: f64, x: &[f64]) {
        Self::accumulate(self.p, &mut self.risk[j], &mut self.risk1[j], &mut self.risk2[j], theta, x);
    }

    fn add_tied(&mut self, j: usize, theta: f64, x: &[f64]) {
        self.tied[j] += 1;
        Self::accumulate(self.p, &mut self.tied0[j], &mut self.tied1[j], &mut self.tied2[j], theta, x);
    }

    fn into_share(self) -> NaiveShare {
        NaiveShare::Sums {
            risk_set_sums: self.risk,
            risk_set_first: self.risk1,
            risk_set_second: self.risk2,
            tied_counts: self.tied,
            tied_sums: self.tied0,
            tied_first: self.tied1,
            tied_second: self.tied2,
        }
    }
}

struct PerfContext<'a> {
    prep: &'a Prepared,
    req: &'a PerformanceRequest,
    reference: &'a [f64],
    thresholds: &'a [f64],
    min: usize,
}

struct Collected {
    baselines: Vec<StepFunction>,
    lp_cdfs: Vec<StepFunction>,
    c_in: Vec<f64>,
    c_oob: Vec<f64>,
    km: Vec<Vec<StepFunction>>,
    cox: Vec<Vec<StepFunction>>,
    calibration: Vec<CalibrationReplicate>,
    skipped: usize,
}

impl PerfContext<'_> {
    fn collect(&self, betas: &[(usize, Beta)]) -> Result<Collected> {
        let groups = self.thresholds.len() + 1;
        let cols = &self.req.columns;
        let per_boot: Vec<Option<BootPerf>> = betas
            .par_iter()
            .map(|(k, beta)| -> Result<Option<BootPerf>> {
                let rep = &self.prep.replicates[*k];
                let in_bag = rep.in_bag.data.select_columns(cols)?;
                let baseline = match breslow_baseline(&in_bag, beta) {
                    Ok(b) => b,
                    Err(CoxError::NoEvents | CoxError::NonFinite { .. }) => return Ok(None),
                    Err(e) => return Err(e.into()),
                };
                let lp = in_bag.linear_predictor(beta)?;
                let c_in = c_harrell(in_bag.times(), in_bag.events(), &lp).ok();
                let c_oob = match &rep.oob {
                    Some(s) => {
                        let d = s.data.select_columns(cols)?;
                        c_harrell(d.times(), d.events(), &d.linear_predictor(beta)?).ok()
                    }
                    None => None,
                };
                let full_lp = rep.completed.select_columns(cols)?.linear_predictor(beta)?;
                let lp_cdf = empirical_cdf(&full_lp)?;
                let subgroups = subgroup_km_vs_cox(in_bag.times(), in_bag.events(), &lp, &baseline, self.thresholds)?;
                let cal = CalibrationReplicate {
                    times: in_bag.times().to_vec(),
                    events: in_bag.events().to_vec(),
                    lp,
                    baseline: baseline.clone(),
                };
                Ok(Some(BootPerf { baseline, lp_cdf, c_in, c_oob, subgroups, cal }))
            })
            .collect::<Result<_>>()?;

        let mut out = Collected {
            baselines: Vec::new(),
            lp_cdfs: Vec::new(),
            c_in: Vec::new(),
            c_oob: Vec::new(),
            km: vec![Vec::new(); groups],
            cox: vec![Vec::new(); groups],
            calibration: Vec::new(),
            skipped: 0,
        };
        for b in per_boot {
            let Some(b) = b else {
                out.skipped += 1;
                continue;
            };
            out.baselines.push(b.baseline);
            out.lp_cdfs.push(b.lp_cdf);
            out.c_in.extend(b.c_in);
            out.c_oob.extend(b.c_oob);
            for (g, s) in b.subgroups.into_iter().enumerate() {
                if let Some(s) = s {
                    out.km[g].push(s.km);
                    out.cox[g].push(s.cox);
                }
            }
            out.calibration.push(b.cal);
        }
        Ok(out)
    }

    fn curve(&self, curves: &[StepFunction], grid: &KnotGrid, suppressed: &mut usize) -> Result<Option<CurveReport>> {
        if curves.is_empty() || grid.knots.is_empty() || grid.total() < self.min {
            *suppressed += 1;
            return Ok(None);
        }
        Ok(Some(aggregate_curve(curves, grid, self.min, self.req.alpha)?.into()))
    }

    fn summary(&self, values: &[f64]) -> Option<Summary> {
        (!values.is_empty()).then(|| {
            let (median, lower, upper) = median_and_band(values, self.req.alpha);
            Summary { median, lower, upper, n: values.len() }
        })
    }

    fn set(&self, betas: &[(usize, Beta)]) -> Result<(PerformanceSet, usize)> {
        let c = self.collect(betas)?;
        let mut suppressed = 0;
        // Outcomes do not depend on the imputation, so any replicate gives the cohort's.
        let cohort = &self.prep.replicates[0].completed;
        let baseline =
            self.curve(&c.baselines, &KnotGrid::event_times(cohort.times(), cohort.events()), &mut suppressed)?;
        let lp_grid = KnotGrid::from_step(&empirical_cdf(self.reference)?);
        let lp_cdf = self.curve(&c.lp_cdfs, &lp_grid, &mut suppressed)?;

        let mut members = vec![Vec::new(); self.thresholds.len() + 1];
        for (i, lp) in self.reference.iter().enumerate() {
            members[fedcox_core::diagnostics::subgroup_of(*lp, self.thresholds)].push(i);
        }
        let mut subgroups = Vec::with_capacity(members.len());
        for (g, idx) in members.iter().enumerate() {
            let t: Vec<f64> = idx.iter().map(|&i| cohort.times()[i]).collect();
            let e: Vec<bool> = idx.iter().map(|&i| cohort.events()[i]).collect();
            let grid = KnotGrid::event_times(&t, &e);
            let km = self.curve(&c.km[g], &grid, &mut suppressed)?;
            let cox = self.curve(&c.cox[g], &grid, &mut suppressed)?;
            subgroups.push(SubgroupReport {
                index: g,
                lower_threshold: g.checked_sub(1).map(|k| self.thresholds[k]),
                upper_threshold: self.thresholds.get(g).copied(),
                km,
                cox,
            });
        }

        let mut cal = Vec::new();
        if !self.req.time_points.is_empty() && !c.calibration.is_empty() {
            for table in calibration(&c.calibration, &self.req.time_points, self.req.n_groups, self.req.alpha)? {
                let (report, dropped) = CalibrationReport::from_table(table, self.min);
                suppressed += dropped;
                cal.push(report);
            }
        }
        Ok((
            PerformanceSet {
                baseline,
                lp_cdf,
                c_harrell_in_bag: self.summary(&c.c_in),
                c_harrell_oob: self.summary(&c.c_oob),
                subgroups,
                calibration: cal,
                suppressed,
            },
            c.skipped,
        ))
    }
}

struct BootPerf {
    baseline: StepFunction,
    lp_cdf: StepFunction,
    c_in: Option<f64>,
    c_oob: Option<f64>,
    subgroups: Vec<Option<fedcox_core::diagnostics::SubgroupCurves>>,
    cal: CalibrationReplicate,
}

/// Concatenates cohorts read from several files; columns must agree.
fn stack(parts: Vec<RawDataset>) -> Result<RawDataset> {
    let mut it = parts.into_iter();
    let mut out = it.next().ok_or_else(|| FederationError::Config("DataPaths is empty".into()))?;
    for part in it {
        let same = part.columns.len() == out.columns.len()
            && part.columns.iter().zip(&out.columns).all(|(a, b)| a.name == b.name);
        if !same {
            return Err(FederationError::Data("data files have different columns".into()));
        }
        out.ids.extend(part.ids);
        out.times.extend(part.times);
        out.events.extend(part.events);
        let columns: Vec<RawColumn> = out
            .columns
            .into_iter()
            .zip(part.columns)
            .map(|(mut a, b)| {
                if a.kind != b.kind {
                    return Err(FederationError::Data(format!("column {} has different kinds across files", a.name)));
                }
                a.values.extend(b.values);
                Ok(a)
            })
            .collect::<Result<_>>()?;
        out = RawDataset::new(out.ids, out.times, out.events, columns)?;
    }
    Ok(out)
}
