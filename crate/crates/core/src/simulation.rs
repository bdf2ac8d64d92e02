//! Synthetic multi-centre head-and-neck cohort.
//!
//! Clinical covariates are drawn from the bundled marginals in
//! `data/marginals.toml`; survival follows a constant-baseline Cox model with
//! the coefficients in [`TRUE_COEFFICIENTS`], competing lost-to-follow-up
//! censoring and administrative censoring. Four noise covariates unrelated
//! to survival are appended.

use crate::dataset::{ColumnKind, RawColumn, RawDataset};
use crate::error::{CoxError, Result};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Open01, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Generating log-hazard ratios, keyed by design-column name.
pub const TRUE_COEFFICIENTS: [(&str, f64); 9] = [
    ("Age", 0.04136),
    ("hemoglobin", -0.400),
    ("eqd2t", -0.03506),
    ("T2", 0.1943),
    ("T3", 0.7965),
    ("T4", 1.4546),
    ("Nplus", 0.3764),
    ("genderMale", 0.8353),
    ("NonGlottis", 0.2695),
];

/// Covariates that enter the generating model; only these receive missing cells.
pub const CLINICAL_COLUMNS: [&str; 7] = ["Age", "hemoglobin", "eqd2t", "Tstage", "Nplus", "genderMale", "NonGlottis"];

pub const NOISE_NUMERIC: [&str; 2] = ["Cont1", "Cont2"];
pub const NOISE_BINARY: [&str; 2] = ["Factor1", "Factor2"];

const BUNDLED_MARGINALS: &str = include_str!("../data/marginals.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Marginal {
    Numeric { edges: Vec<f64>, weights: Vec<f64> },
    Binary { p: f64 },
    Categorical { levels: Vec<String>, weights: Vec<f64> },
}

impl Marginal {
    fn validate(&self, name: &str) -> Result<()> {
        let bad = |msg: &str| Err(CoxError::Config(format!("marginal {name}: {msg}")));
        match self {
            Marginal::Numeric { edges, weights } => {
                if edges.len() != weights.len() + 1 || weights.is_empty() {
                    return bad("needs one more edge than weights");
                }
                if edges.windows(2).any(|w| !(w[0] < w[1])) {
                    return bad("edges must be ascending");
                }
                if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
                    return bad("weights must be nonnegative with positive sum");
                }
            }
            Marginal::Binary { p } => {
                if !(0.0..=1.0).contains(p) {
                    return bad("probability outside [0, 1]");
                }
            }
            Marginal::Categorical { levels, weights } => {
                if levels.len() != weights.len() || levels.len() < 2 {
                    return bad("needs at least two levels, one weight each");
                }
                if weights.iter().any(|w| !(*w > 0.0)) {
                    return bad("level weights must be positive");
                }
            }
        }
        Ok(())
    }

    fn column_kind(&self) -> ColumnKind {
        match self {
            Marginal::Numeric { .. } => ColumnKind::Numeric,
            Marginal::Binary { .. } => ColumnKind::Binary,
            Marginal::Categorical { levels, .. } => ColumnKind::Categorical(levels.clone()),
        }
    }
}

/// Marginal distributions of the clinical covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    columns: Vec<(String, Marginal)>,
}

impl Marginals {
    pub fn bundled() -> Self {
        Self::from_toml_str(BUNDLED_MARGINALS).expect("bundled marginals are valid")
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut table: BTreeMap<String, Marginal> =
            toml::from_str(s).map_err(|e| CoxError::Parse(format!("marginals: {e}")))?;
        let mut columns = Vec::with_capacity(CLINICAL_COLUMNS.len());
        for name in CLINICAL_COLUMNS {
            let m = table.remove(name).ok_or_else(|| CoxError::Config(format!("marginals lack column {name}")))?;
            m.validate(name)?;
            columns.push((name.to_string(), m));
        }
        if let Some(extra) = table.keys().next() {
            return Err(CoxError::Config(format!("unknown marginal column {extra}")));
        }
        Ok(Self { columns })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_per_centre: usize,
    /// Constant baseline hazard per month, one per centre.
    pub baseline_hazards: Vec<f64>,
    /// Constant lost-to-follow-up hazard per month, one per centre.
    pub ltfu_hazards: Vec<f64>,
    pub admin_censor: f64,
    pub missing_fraction: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let baseline_hazards = vec![0.010, 0.014, 0.018];
        let ltfu_hazards = baseline_hazards.iter().map(|h| 0.6 * h).collect();
        Self { n_per_centre: 1000, baseline_hazards, ltfu_hazards, admin_censor: 60.0, missing_fraction: 0.2, seed: 1 }
    }
}

impl SimConfig {
    pub fn n_centres(&self) -> usize {
        self.baseline_hazards.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_centre == 0 || self.baseline_hazards.is_empty() {
            return Err(CoxError::Config("need at least one centre and one patient".into()));
        }
        if self.ltfu_hazards.len() != self.baseline_hazards.len() {
            return Err(CoxError::Config("one lost-to-follow-up hazard per centre required".into()));
        }
        if self.baseline_hazards.iter().chain(&self.ltfu_hazards).any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(CoxError::Config("hazards must be positive".into()));
        }
        if !(self.admin_censor.is_finite() && self.admin_censor > 0.0) {
            return Err(CoxError::Config("administrative censoring time must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return Err(CoxError::Config("missing fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Generating linear predictor for one patient's clinical values, in
/// [`CLINICAL_COLUMNS`] order (categoricals as level indices).
pub fn true_linear_predictor(marginals: &Marginals, values: &[f64]) -> f64 {
    let coef = |name: &str| TRUE_COEFFICIENTS.iter().find(|(n, _)| *n == name).map_or(0.0, |(_, b)| *b);
    marginals
        .columns
        .iter()
        .zip(values)
        .map(|((name, m), v)| match m {
            Marginal::Categorical { levels, .. } => coef(&levels[*v as usize]),
            _ => coef(name) * v,
        })
        .sum()
}

/// One cohort per centre, drawn from the bundled marginals.
pub fn simulate_cohort(cfg: &SimConfig) -> Result<Vec<RawDataset>> {
    simulate_cohort_with(cfg, &Marginals::bundled())
}

/// Like [`simulate_cohort`] with explicit marginals. Each centre uses its own
/// stream of a generator seeded by `cfg.seed`, and every patient consumes a
/// fixed number of draws, so outcome draws do not depend on the hazards.
pub fn simulate_cohort_with(cfg: &SimConfig, marginals: &Marginals) -> Result<Vec<RawDataset>> {
    cfg.validate()?;
    (0..cfg.n_centres()).map(|c| simulate_centre(cfg, marginals, c)).collect()
}

fn simulate_centre(cfg: &SimConfig, marginals: &Marginals, centre: usize) -> Result<RawDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(centre as u64);
    let n = cfg.n_per_centre;
    let samplers: Vec<Option<WeightedIndex<f64>>> = marginals
        .columns
        .iter()
        .map(|(_, m)| match m {
            Marginal::Numeric { weights, .. } | Marginal::Categorical { weights, .. } => {
                Some(WeightedIndex::new(weights).map_err(|e| CoxError::Config(e.to_string())))
            }
            Marginal::Binary { .. } => None,
        })
        .map(Option::transpose)
        .collect::<Result<_>>()?;

    let n_clin = marginals.columns.len();
    let mut clinical = vec![vec![0.0; n]; n_clin];
    let mut noise = vec![vec![0.0; n]; NOISE_NUMERIC.len() + NOISE_BINARY.len()];
    let mut times = Vec::with_capacity(n);
    let mut events = Vec::with_capacity(n);
    let mut missing = vec![vec![false; n]; n_clin];
    let mut row = vec![0.0; n_clin];
    for i in 0..n {
        for (k, ((_, m), sampler)) in marginals.columns.iter().zip(&samplers).enumerate() {
            row[k] = match m {
                Marginal::Numeric { edges, .. } => {
                    let b = sampler.as_ref().unwrap().sample(&mut rng);
                    let u: f64 = rng.random();
                    edges[b] + u * (edges[b + 1] - edges[b])
                }
                Marginal::Binary { p } => f64::from(u8::from(rng.random_bool(*p))),
                Marginal::Categorical { .. } => sampler.as_ref().unwrap().sample(&mut rng) as f64,
            };
            clinical[k][i] = row[k];
        }
        for col in noise.iter_mut().take(NOISE_NUMERIC.len()) {
            col[i] = rng.sample(StandardNormal);
        }
        for col in noise.iter_mut().skip(NOISE_NUMERIC.len()) {
            col[i] = f64::from(u8::from(rng.random_bool(0.5)));
        }
        let risk = true_linear_predictor(marginals, &row).exp();
        let u_event: f64 = rng.sample(Open01);
        let u_ltfu: f64 = rng.sample(Open01);
        let t_event = -u_event.ln() / (cfg.baseline_hazards[centre] * risk);
        let t_ltfu = -u_ltfu.ln() / (cfg.ltfu_hazards[centre] * risk);
        let observed = t_event.min(t_ltfu).min(cfg.admin_censor);
        times.push(observed);
        events.push(t_event < t_ltfu && t_event < cfg.admin_censor);
        for flags in missing.iter_mut() {
            flags[i] = rng.random_bool(cfg.missing_fraction);
        }
    }

    let mut columns: Vec<RawColumn> = marginals
        .columns
        .iter()
        .zip(clinical)
        .zip(&missing)
        .map(|(((name, m), values), flags)| RawColumn {
            name: name.clone(),
            kind: m.column_kind(),
            values: values.into_iter().zip(flags).map(|(v, miss)| (!miss).then_some(v)).collect(),
        })
        .collect();
    for (name, values) in NOISE_NUMERIC.iter().chain(&NOISE_BINARY).zip(noise) {
        let kind = if NOISE_NUMERIC.contains(name) { ColumnKind::Numeric } else { ColumnKind::Binary };
        columns.push(RawColumn { name: name.to_string(), kind, values: values.into_iter().map(Some).collect() });
    }
    let ids = (0..n).map(|i| format!("c{}_{:04}", centre + 1, i + 1)).collect();
    RawDataset::new(ids, times, events, columns)
}

/// Keeps patients with at most `n_allowed` missing covariates.
pub fn filter_missing(raw: &RawDataset, n_allowed: usize) -> Result<RawDataset> {
    let keep: Vec<usize> =
        raw.missing_per_patient().iter().enumerate().filter(|(_, m)| **m <= n_allowed).map(|(i, _)| i).collect();
    if keep.is_empty() {
        return Err(CoxError::NoPatientsRemain);
    }
    raw.select_rows(&keep)
}
