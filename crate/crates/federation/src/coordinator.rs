//! The optimisation side: best-subset enumeration, batched Newton fits over
//! centre reports, the one-standard-error rule and final-model summaries.

use crate::config::{OptimizerConfig, Weighting};
use crate::error::{FederationError, Result};
use crate::message::{
    BootstrapBeta, EvalItem, EvaluateRequest, EvaluateResponse, Message, MessageKind, ModelColumns, PerformanceRequest,
    PerformanceResponse, Phase, PrepareRequest, Thresholds,
};
use crate::transport::Mailbox;
use fedcox_core::diagnostics::percentile;
use fedcox_core::survival::{NewtonOptions, NewtonState, NewtonStatus};
use fedcox_core::LikelihoodEval;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};

/// Best-subset enumeration is refused above this many feature groups.
pub const MAX_GROUPS: usize = 20;
/// A candidate with more failed bootstraps than this fraction is dropped.
pub const FAILURE_LIMIT: f64 = 0.2;
/// Model id used for the null model in evaluate requests.
pub const NULL_MODEL: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Bit `g` set when feature group `g` is included.
    pub mask: u64,
    pub groups: Vec<usize>,
    /// Indices into `FeaturesToOptimizeFrom`, ascending.
    pub columns: Vec<usize>,
}

impl ModelSpec {
    /// Parameter count for the one-standard-error rule: grouped dummy levels count once.
    pub fn n_params(&self) -> usize {
        self.groups.len()
    }

    pub fn names(&self, features: &[String]) -> Vec<String> {
        self.columns.iter().map(|&c| features[c].clone()).collect()
    }

    /// The model made of exactly these feature names.
    pub fn from_names(cfg: &OptimizerConfig, names: &[String]) -> Result<Self> {
        let groups = feature_groups(cfg);
        let mut mask = 0u64;
        for name in names {
            let col = cfg
                .features
                .iter()
                .position(|f| f == name)
                .ok_or_else(|| FederationError::Config(format!("unknown feature {name}")))?;
            let g = groups.iter().position(|g| g.contains(&col)).expect("every feature is grouped");
            mask |= 1 << g;
        }
        let spec = spec_for_mask(&groups, mask);
        if spec.columns.len() != names.len() {
            return Err(FederationError::Config("a model must include whole level sets".into()));
        }
        Ok(spec)
    }
}

/// Feature groups in order of first appearance: each level set is one group,
/// every other feature its own.
pub fn feature_groups(cfg: &OptimizerConfig) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut set_group: Vec<Option<usize>> = vec![None; cfg.level_sets.len()];
    for (c, f) in cfg.features.iter().enumerate() {
        match cfg.level_sets.iter().position(|s| s.contains(f)) {
            Some(s) => match set_group[s] {
                Some(g) => groups[g].push(c),
                None => {
                    set_group[s] = Some(groups.len());
                    groups.push(vec![c]);
                }
            },
            None => groups.push(vec![c]),
        }
    }
    groups
}

fn spec_for_mask(groups: &[Vec<usize>], mask: u64) -> ModelSpec {
    let chosen: Vec<usize> = (0..groups.len()).filter(|g| mask >> g & 1 == 1).collect();
    let mut columns: Vec<usize> = chosen.iter().flat_map(|&g| groups[g].iter().copied()).collect();
    columns.sort_unstable();
    ModelSpec { mask, groups: chosen, columns }
}

/// Every nonempty subset of feature groups, in ascending mask order.
pub fn enumerate_subsets(cfg: &OptimizerConfig) -> Result<Vec<ModelSpec>> {
    let groups = feature_groups(cfg);
    if groups.is_empty() {
        return Err(FederationError::Config("no candidate features".into()));
    }
    if groups.len() > MAX_GROUPS {
        return Err(FederationError::Config(format!(
            "{} feature groups give {} candidate models; best-subset selection needs at most {MAX_GROUPS} groups, so pre-select fewer candidates",
            groups.len(),
            (1u64 << groups.len()) - 1
        )));
    }
    Ok((1..(1u64 << groups.len())).map(|m| spec_for_mask(&groups, m)).collect())
}

/// One candidate's bootstrap fits. Log-likelihoods are relative to the null
/// model of the same bootstrap and summed over centres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    /// Converged coefficients per bootstrap; `None` for failed bootstraps.
    pub betas: Vec<Option<Vec<f64>>>,
    /// Likelihood evaluations per bootstrap, including step halvings.
    pub iterations: Vec<usize>,
    pub loglik: Vec<Option<f64>>,
    /// Out-of-bag log-likelihood, adjusted to the cohort size.
    pub cv_loglik: Vec<Option<f64>>,
    pub failures: usize,
    /// Converged bootstraps without a cross-validation value.
    pub cv_exclusions: usize,
    pub failed: bool,
    pub failure_reasons: Vec<String>,
    pub median: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl FitResult {
    pub fn n_boot(&self) -> usize {
        self.betas.len()
    }

    pub fn converged_betas(&self) -> Vec<(u32, Vec<f64>)> {
        self.betas.iter().enumerate().filter_map(|(b, beta)| beta.clone().map(|v| (b as u32, v))).collect()
    }

    pub fn summary(&self) -> CandidateSummary {
        let cv: Vec<f64> = self.cv_loglik.iter().flatten().copied().collect();
        let n = cv.len();
        let mean = if n > 0 { cv.iter().sum::<f64>() / n as f64 } else { f64::NAN };
        let sd = if n > 1 { (cv.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        CandidateSummary {
            n_params: self.spec.n_params(),
            mean_cv: mean,
            sd_cv: sd,
            n_cv: n,
            failed: self.failed || n == 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub n_params: usize,
    /// Mean over bootstraps of the cross-validated log-likelihood (higher is better).
    #[serde(with = "crate::hexfloat")]
    pub mean_cv: f64,
    /// Sample standard deviation of the same values.
    #[serde(with = "crate::hexfloat")]
    pub sd_cv: f64,
    pub n_cv: usize,
    pub failed: bool,
}

/// One-standard-error rule. The best candidate has the highest mean
/// cross-validated log-likelihood; among candidates within one of its
/// standard deviations the one with fewest parameters wins, then the higher
/// mean, then the earlier candidate. Returns `(best, chosen)` indices.
pub fn select_model(candidates: &[CandidateSummary]) -> Result<(usize, usize)> {
    let viable: Vec<usize> = (0..candidates.len()).filter(|&i| !candidates[i].failed).collect();
    let mut best = *viable.first().ok_or(FederationError::NoViableModel)?;
    for &i in &viable {
        if candidates[i].mean_cv > candidates[best].mean_cv {
            best = i;
        }
    }
    let floor = candidates[best].mean_cv - candidates[best].sd_cv;
    let mut chosen = best;
    for &i in &viable {
        let (c, k) = (&candidates[i], &candidates[chosen]);
        if c.mean_cv < floor {
            continue;
        }
        if c.n_params < k.n_params || (c.n_params == k.n_params && c.mean_cv > k.mean_cv) {
            chosen = i;
        }
    }
    Ok((best, chosen))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub features: Vec<String>,
    pub fits: Vec<FitResult>,
    pub summaries: Vec<CandidateSummary>,
    pub best: usize,
    pub chosen: usize,
}

impl SelectionReport {
    pub fn chosen_names(&self) -> Vec<String> {
        self.fits[self.chosen].spec.names(&self.features)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub names: Vec<String>,
    pub fit: FitResult,
    pub performance: Vec<(String, PerformanceResponse)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub centres: Vec<String>,
    pub n_local: Vec<usize>,
    pub selection: SelectionReport,
    pub final_model: FinalReport,
    pub rounds: u64,
    pub duplicates: usize,
    pub timings: Vec<(String, f64)>,
}

enum Outcome {
    Converged { beta: Vec<f64>, loglik: f64, cv: Option<f64>, iterations: usize },
    Failed { reason: String, iterations: usize },
}

struct Track {
    model: usize,
    bootstrap: u32,
    state: NewtonState,
    outcome: Option<Outcome>,
}

pub struct Coordinator {
    mailbox: Mailbox,
    centres: Vec<String>,
    cfg: OptimizerConfig,
    round: u64,
    timeout: Duration,
    n_local: Vec<usize>,
}

impl Coordinator {
    pub fn new(mailbox: Mailbox, centres: Vec<String>, cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        if centres.is_empty() {
            return Err(FederationError::Config("no centres".into()));
        }
        let n = centres.len();
        Ok(Self { mailbox, centres, cfg, round: 0, timeout: Duration::from_secs(3600), n_local: vec![0; n] })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn mailbox(&self) -> &Mailbox {
        &self.mailbox
    }

    pub fn mailbox_mut(&mut self) -> &mut Mailbox {
        &mut self.mailbox
    }

    pub fn centres(&self) -> &[String] {
        &self.centres
    }

    /// Cohort sizes reported in the latest responses.
    pub fn n_local(&self) -> &[usize] {
        &self.n_local
    }

    pub fn next_round(&mut self) -> u64 {
        self.round += 1;
        self.round
    }

    pub fn broadcast<T: Serialize>(&mut self, kind: MessageKind, payload: &T) -> Result<u64> {
        let round = self.next_round();
        let me = self.mailbox.name().to_string();
        for c in &self.centres {
            self.mailbox.send(&Message::new(kind, &me, c, round, payload)?)?;
        }
        Ok(round)
    }

    pub fn collect(&mut self, kind: MessageKind, round: u64) -> Result<Vec<Message>> {
        let centres = self.centres.clone();
        self.mailbox.await_all(&centres, kind, round, self.timeout)
    }

    pub fn prepare(&mut self, phase: Phase, n_boot: usize) -> Result<()> {
        let req = PrepareRequest {
            phase,
            n_boot,
            global_seed: self.cfg.global_seed,
            features: self.cfg.features.clone(),
            n_allowed_missing: self.cfg.n_allowed_missing,
        };
        self.broadcast(MessageKind::PrepareRequest, &req)?;
        Ok(())
    }

    fn newton_options(&self) -> NewtonOptions {
        NewtonOptions {
            tolerance: self.cfg.tolerance,
            max_iterations: self.cfg.max_iterations,
            ..NewtonOptions::default()
        }
    }

    /// Fits every model on `n_boot` prepared bootstraps from `beta = 0`. All
    /// unfinished (model, bootstrap) fits share one request per round.
    pub fn fit_models(&mut self, specs: &[ModelSpec], n_boot: usize) -> Result<Vec<FitResult>> {
        let null = ModelSpec { mask: 0, groups: vec![], columns: vec![] };
        let models: Vec<&ModelSpec> = std::iter::once(&null).chain(specs).collect();
        let opts = self.newton_options();
        let mut tracks: Vec<Track> = models
            .iter()
            .enumerate()
            .flat_map(|(m, spec)| {
                (0..n_boot as u32).map(move |b| Track {
                    model: m,
                    bootstrap: b,
                    state: NewtonState::new(spec.columns.len(), opts),
                    outcome: None,
                })
            })
            .collect();
        let wire_id = |m: usize| if m == 0 { NULL_MODEL } else { (m - 1) as u32 };

        loop {
            let running: Vec<usize> = (0..tracks.len()).filter(|&t| tracks[t].outcome.is_none()).collect();
            if running.is_empty() {
                break;
            }
            let mut used = vec![false; models.len()];
            let items: Vec<EvalItem> = running
                .iter()
                .map(|&t| {
                    let tr = &tracks[t];
                    used[tr.model] = true;
                    EvalItem {
                        model: wire_id(tr.model),
                        bootstrap: tr.bootstrap,
                        beta: tr.state.trial().iter().copied().collect(),
                    }
                })
                .collect();
            let model_columns: Vec<ModelColumns> = (0..models.len())
                .filter(|&m| used[m])
                .map(|m| ModelColumns { id: wire_id(m), columns: models[m].columns.clone() })
                .collect();
            let req = EvaluateRequest::Stratified { models: model_columns, items };
            let round = self.broadcast(MessageKind::EvaluateRequest, &req)?;
            let replies = self.collect(MessageKind::EvaluateResponse, round)?;

            let mut per_centre = Vec::with_capacity(replies.len());
            for (c, msg) in replies.iter().enumerate() {
                match msg.decode::<EvaluateResponse>()? {
                    EvaluateResponse::Stratified { n_local, results } => {
                        if results.len() != running.len() {
                            return Err(FederationError::Protocol(format!(
                                "{} answered {} of {} items",
                                self.centres[c],
                                results.len(),
                                running.len()
                            )));
                        }
                        self.n_local[c] = n_local;
                        per_centre.push(results);
                    }
                    EvaluateResponse::Naive(_) => {
                        return Err(FederationError::Protocol(format!(
                            "{} answered in unstratified mode",
                            self.centres[c]
                        )))
                    }
                }
            }
            let n_ref = self.n_local.iter().copied().max().unwrap_or(1) as f64;
            let weights: Vec<f64> = match self.cfg.weighting {
                Weighting::Pooled => vec![1.0; self.centres.len()],
                Weighting::EqualCentre => self.n_local.iter().map(|&n| n_ref / n.max(1) as f64).collect(),
            };

            for (i, &t) in running.iter().enumerate() {
                let track = &mut tracks[t];
                let p = models[track.model].columns.len();
                let mut total = LikelihoodEval::zero(p);
                let mut cv = Some(0.0);
                let mut error = None;
                for (c, results) in per_centre.iter().enumerate() {
                    let r = &results[i];
                    if r.model != wire_id(track.model) || r.bootstrap != track.bootstrap {
                        return Err(FederationError::Protocol(format!(
                            "{} answered items out of order",
                            self.centres[c]
                        )));
                    }
                    if let Some(e) = &r.error {
                        error = Some(format!("{}: {e}", self.centres[c]));
                        break;
                    }
                    match to_eval(r.loglik, &r.gradient, &r.hessian, p) {
                        Some(e) => total.accumulate(&e.scaled(weights[c]))?,
                        None => {
                            error = Some(format!("{}: malformed gradient or Hessian", self.centres[c]));
                            break;
                        }
                    }
                    cv = cv.zip(r.cv_loglik).map(|(a, b)| a + weights[c] * b);
                }
                if let Some(reason) = error {
                    track.outcome = Some(Outcome::Failed { reason, iterations: track.state.evaluations() });
                    continue;
                }
                let loglik = total.loglik;
                match track.state.update(total) {
                    Ok(NewtonStatus::Continue) => {}
                    Ok(NewtonStatus::Converged) => {
                        track.outcome = Some(Outcome::Converged {
                            beta: track.state.current().expect("accepted").0.iter().copied().collect(),
                            loglik,
                            cv,
                            iterations: track.state.evaluations(),
                        });
                    }
                    Err(e) => {
                        track.outcome =
                            Some(Outcome::Failed { reason: e.to_string(), iterations: track.state.evaluations() })
                    }
                }
            }
        }

        let n = n_boot;
        let outcomes: Vec<Outcome> = tracks.into_iter().map(|t| t.outcome.expect("finished")).collect();
        let (null_out, rest) = outcomes.split_at(n);
        let null_ll: Vec<Option<(f64, Option<f64>)>> = null_out
            .iter()
            .map(|o| match o {
                Outcome::Converged { loglik, cv, .. } => Some((*loglik, *cv)),
                Outcome::Failed { .. } => None,
            })
            .collect();

        Ok(specs.iter().zip(rest.chunks(n.max(1))).map(|(spec, outs)| self.summarise(spec, outs, &null_ll)).collect())
    }

    fn summarise(&self, spec: &ModelSpec, outs: &[Outcome], null: &[Option<(f64, Option<f64>)>]) -> FitResult {
        let n = outs.len();
        let mut r = FitResult {
            spec: spec.clone(),
            betas: vec![None; n],
            iterations: vec![0; n],
            loglik: vec![None; n],
            cv_loglik: vec![None; n],
            failures: 0,
            cv_exclusions: 0,
            failed: false,
            failure_reasons: Vec::new(),
            median: Vec::new(),
            lower: Vec::new(),
            upper: Vec::new(),
        };
        for (b, o) in outs.iter().enumerate() {
            match o {
                Outcome::Converged { beta, loglik, cv, iterations } => {
                    r.iterations[b] = *iterations;
                    let Some((null_ll, null_cv)) = null[b] else {
                        r.failures += 1;
                        r.failure_reasons.push(format!("bootstrap {b}: null model failed"));
                        continue;
                    };
                    r.betas[b] = Some(beta.clone());
                    r.loglik[b] = Some(loglik - null_ll);
                    r.cv_loglik[b] = cv.zip(null_cv).map(|(a, z)| a - z);
                    if r.cv_loglik[b].is_none() {
                        r.cv_exclusions += 1;
                    }
                }
                Outcome::Failed { reason, iterations } => {
                    r.iterations[b] = *iterations;
                    r.failures += 1;
                    r.failure_reasons.push(format!("bootstrap {b}: {reason}"));
                }
            }
        }
        r.failed = r.failures as f64 > FAILURE_LIMIT * n as f64 || r.failures == n;
        let alpha = self.cfg.alpha;
        for k in 0..spec.columns.len() {
            let mut v: Vec<f64> = r.betas.iter().flatten().map(|b| b[k]).collect();
            if v.is_empty() {
                break;
            }
            v.sort_by(f64::total_cmp);
            r.median.push(percentile(&v, 0.5));
            r.lower.push(percentile(&v, alpha / 2.0));
            r.upper.push(percentile(&v, 1.0 - alpha / 2.0));
        }
        r
    }

    /// Cross-validated best-subset selection over all candidate models.
    pub fn select(&mut self) -> Result<SelectionReport> {
        let specs = enumerate_subsets(&self.cfg)?;
        self.select_among(specs)
    }

    pub fn select_among(&mut self, specs: Vec<ModelSpec>) -> Result<SelectionReport> {
        self.prepare(Phase::Selection, self.cfg.n_boot_cv)?;
        let fits = self.fit_models(&specs, self.cfg.n_boot_cv)?;
        let summaries: Vec<CandidateSummary> = fits.iter().map(FitResult::summary).collect();
        let (best, chosen) = select_model(&summaries)?;
        log::info!(
            "selected {:?} (best {:?})",
            fits[chosen].spec.names(&self.cfg.features),
            fits[best].spec.names(&self.cfg.features)
        );
        Ok(SelectionReport { features: self.cfg.features.clone(), fits, summaries, best, chosen })
    }

    /// Refits `spec` on the model-information bootstraps and collects each
    /// centre's performance summaries.
    pub fn finalize(&mut self, spec: &ModelSpec) -> Result<FinalReport> {
        self.prepare(Phase::Performance, self.cfg.n_boot_model_info)?;
        let fit = self.fit_models(std::slice::from_ref(spec), self.cfg.n_boot_model_info)?.pop().expect("one model");
        if fit.median.len() != spec.columns.len() {
            return Err(FederationError::NoViableModel);
        }
        if fit.failed {
            log::warn!("final model failed on {} of {} bootstraps", fit.failures, fit.n_boot());
        }
        let thresholds = match &self.cfg.pi_thresholds {
            Some(values) => Thresholds::Fixed { values: values.clone() },
            None => Thresholds::Quantiles { probs: vec![0.25, 0.75] },
        };
        let req = PerformanceRequest {
            columns: spec.columns.clone(),
            beta_median: fit.median.clone(),
            betas: fit
                .converged_betas()
                .into_iter()
                .map(|(bootstrap, beta)| BootstrapBeta { bootstrap, beta })
                .collect(),
            thresholds,
            time_points: self.cfg.cal_time_points.clone(),
            n_groups: self.cfg.cal_groups,
            alpha: self.cfg.alpha,
        };
        let round = self.broadcast(MessageKind::PerformanceRequest, &req)?;
        let replies = self.collect(MessageKind::PerformanceResponse, round)?;
        let performance = replies
            .iter()
            .map(|m| Ok((m.sender.clone(), m.decode::<PerformanceResponse>()?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(FinalReport { names: spec.names(&self.cfg.features), fit, performance })
    }

    /// Selection followed by finalisation of the chosen model.
    pub fn run(&mut self) -> Result<StudyReport> {
        let t0 = Instant::now();
        let selection = self.select()?;
        let t1 = Instant::now();
        let spec = selection.fits[selection.chosen].spec.clone();
        let final_model = self.finalize(&spec)?;
        let t2 = Instant::now();
        Ok(StudyReport {
            centres: self.centres.clone(),
            n_local: self.n_local.clone(),
            selection,
            final_model,
            rounds: self.round,
            duplicates: self.mailbox.duplicates(),
            timings: vec![
                ("selection".into(), (t1 - t0).as_secs_f64()),
                ("finalization".into(), (t2 - t1).as_secs_f64()),
            ],
        })
    }
}

fn to_eval(loglik: f64, gradient: &[f64], hessian: &[Vec<f64>], p: usize) -> Option<LikelihoodEval> {
    if gradient.len() != p || hessian.len() != p || hessian.iter().any(|r| r.len() != p) {
        return None;
    }
    Some(LikelihoodEval {
        loglik,
        gradient: DVector::from_column_slice(gradient),
        hessian: DMatrix::from_fn(p, p, |r, c| hessian[r][c]),
    })
}
