//! Multiple imputation by chained equations.
//!
//! Each incomplete column gets a conditional model on every other column (and
//! on the outcome, through the event indicator and the Nelson-Aalen cumulative
//! hazard at the patient's own time). Model parameters are drawn from their
//! approximate posterior before imputing, so repeated runs with independent
//! random streams give proper multiple imputations. Observed cells are never
//! written.

pub use crate::dataset::{ColumnKind, CompletedTable, RawColumn, RawDataset};

use crate::error::{CoxError, Result};
use crate::survival::nelson_aalen;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

const RIDGE: f64 = 1e-5;
const LOGISTIC_RIDGE: f64 = 1e-4;
const LOGISTIC_MAX_ITER: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImputationConfig {
    /// Chained-equation sweeps over all incomplete columns.
    pub sweeps: usize,
    /// Use event indicator and cumulative hazard as extra predictors.
    pub use_outcome: bool,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        Self { sweeps: 10, use_outcome: true }
    }
}

/// Counts of cells that fell back to the mean/mode value because a
/// conditional model could not be fitted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ImputationDiagnostics {
    pub fallback_cells: usize,
    pub failed_fits: usize,
}

fn column_fill(col: &RawColumn) -> Result<f64> {
    let observed: Vec<f64> = col.observed().collect();
    if observed.is_empty() {
        return Err(CoxError::EmptyColumn(col.name.clone()));
    }
    Ok(match &col.kind {
        ColumnKind::Numeric => observed.iter().sum::<f64>() / observed.len() as f64,
        ColumnKind::Binary => mode(&observed, 2),
        ColumnKind::Categorical(levels) => mode(&observed, levels.len()),
    })
}

/// Most frequent level index; ties resolve to the lowest index.
fn mode(values: &[f64], n_levels: usize) -> f64 {
    let mut counts = vec![0usize; n_levels];
    for v in values {
        counts[*v as usize] += 1;
    }
    let mut best = 0;
    for (k, c) in counts.iter().enumerate() {
        if *c > counts[best] {
            best = k;
        }
    }
    best as f64
}

/// Mean/mode value for every missing cell, in `raw.missing_cells()` order.
pub fn initial_values(raw: &RawDataset) -> Result<Vec<f64>> {
    let fills = raw.columns.iter().map(column_fill).collect::<Result<Vec<_>>>()?;
    Ok(raw.missing_cells().iter().map(|&(c, _)| fills[c]).collect())
}

pub fn initial_impute(raw: &RawDataset) -> Result<CompletedTable> {
    raw.complete_with(&initial_values(raw)?)
}

pub fn chained_impute<R: Rng + ?Sized>(
    raw: &RawDataset,
    cfg: &ImputationConfig,
    rng: &mut R,
) -> Result<(CompletedTable, ImputationDiagnostics)> {
    let (cells, diag) = chained_impute_cells(raw, cfg, rng)?;
    Ok((raw.complete_with(&cells)?, diag))
}

/// As [`chained_impute`], returning only the imputed cell values in
/// `raw.missing_cells()` order.
pub fn chained_impute_cells<R: Rng + ?Sized>(
    raw: &RawDataset,
    cfg: &ImputationConfig,
    rng: &mut R,
) -> Result<(Vec<f64>, ImputationDiagnostics)> {
    if cfg.sweeps == 0 {
        return Err(CoxError::Config("imputation needs at least one sweep".into()));
    }
    let initial = initial_values(raw)?;
    let mut diag = ImputationDiagnostics::default();
    if initial.is_empty() {
        return Ok((initial, diag));
    }
    let n = raw.n();
    let fills = raw.columns.iter().map(column_fill).collect::<Result<Vec<_>>>()?;
    let mut current: Vec<Vec<f64>> =
        raw.columns.iter().zip(&fills).map(|(col, f)| col.values.iter().map(|v| v.unwrap_or(*f)).collect()).collect();

    let outcome = if cfg.use_outcome {
        let hazard = nelson_aalen(&raw.times, &raw.events)?;
        let cumhaz: Vec<f64> = raw.times.iter().map(|t| hazard.eval(*t)).collect();
        let event: Vec<f64> = raw.events.iter().map(|e| f64::from(u8::from(*e))).collect();
        vec![event, cumhaz]
    } else {
        Vec::new()
    };

    let targets: Vec<usize> = (0..raw.columns.len()).filter(|&c| raw.columns[c].n_missing() > 0).collect();
    let mut warm: Vec<Vec<Option<DVector<f64>>>> = raw
        .columns
        .iter()
        .map(|c| match &c.kind {
            ColumnKind::Categorical(levels) => vec![None; levels.len()],
            _ => vec![None],
        })
        .collect();

    for sweep in 0..cfg.sweeps {
        let last = sweep + 1 == cfg.sweeps;
        for &c in &targets {
            let col = &raw.columns[c];
            let z = predictors(raw, &current, &outcome, c);
            let obs: Vec<usize> = (0..n).filter(|&i| col.values[i].is_some()).collect();
            let mis: Vec<usize> = (0..n).filter(|&i| col.values[i].is_none()).collect();
            let drawn = match &col.kind {
                ColumnKind::Numeric => draw_linear(&z, &current[c], &obs, &mis, rng).map(|vals| {
                    let (lo, hi) = plausible_range(col);
                    vals.into_iter().map(|v| v.clamp(lo, hi)).collect::<Vec<f64>>()
                }),
                ColumnKind::Binary => {
                    let y: Vec<f64> = obs.iter().map(|&i| current[c][i]).collect();
                    draw_logistic_scores(&z, &y, &obs, &mis, &mut warm[c][0], rng).map(|scores| {
                        scores.into_iter().map(|s| f64::from(u8::from(rng.random::<f64>() < sigmoid(s)))).collect()
                    })
                }
                ColumnKind::Categorical(levels) => {
                    let mut all_scores = Vec::with_capacity(levels.len());
                    for k in 0..levels.len() {
                        let y: Vec<f64> =
                            obs.iter().map(|&i| f64::from(u8::from(current[c][i] as usize == k))).collect();
                        match draw_logistic_scores(&z, &y, &obs, &mis, &mut warm[c][k], rng) {
                            Some(s) => all_scores.push(s),
                            None => break,
                        }
                    }
                    (all_scores.len() == levels.len()).then(|| {
                        (0..mis.len()).map(|r| sample_softmax(all_scores.iter().map(|s| s[r]), rng) as f64).collect()
                    })
                }
            };
            match drawn {
                Some(values) => {
                    for (&i, v) in mis.iter().zip(values) {
                        current[c][i] = v;
                    }
                }
                None => {
                    diag.failed_fits += 1;
                    if last {
                        diag.fallback_cells += mis.len();
                    }
                    for &i in &mis {
                        current[c][i] = fills[c];
                    }
                }
            }
        }
    }

    Ok((raw.missing_cells().iter().map(|&(c, i)| current[c][i]).collect(), diag))
}

fn plausible_range(col: &RawColumn) -> (f64, f64) {
    let obs: Vec<f64> = col.observed().collect();
    let mean = obs.iter().sum::<f64>() / obs.len() as f64;
    let var = obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (obs.len().max(2) - 1) as f64;
    let sd = var.sqrt();
    let lo = obs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = obs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo - 3.0 * sd, hi + 3.0 * sd)
}

/// Intercept plus standardised values of every other column (dummy-coded)
/// and the outcome summaries; `n x q`.
fn predictors(raw: &RawDataset, current: &[Vec<f64>], outcome: &[Vec<f64>], target: usize) -> DMatrix<f64> {
    let n = raw.n();
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
    for (c, col) in raw.columns.iter().enumerate() {
        if c == target {
            continue;
        }
        match &col.kind {
            ColumnKind::Categorical(levels) => {
                for k in 1..levels.len() {
                    cols.push(current[c].iter().map(|v| f64::from(u8::from(*v as usize == k))).collect());
                }
            }
            _ => cols.push(current[c].clone()),
        }
    }
    cols.extend(outcome.iter().cloned());
    for col in cols.iter_mut().skip(1) {
        let mean = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let scale = if sd > 1e-12 { 1.0 / sd } else { 0.0 };
        col.iter_mut().for_each(|v| *v = (*v - mean) * scale);
    }
    DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i])
}

fn rows(z: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    z.select_rows(idx.iter())
}

fn standard_normal_vec<R: Rng + ?Sized>(len: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(len, |_, _| StandardNormal.sample(rng))
}

/// Draw from `N(mean, A^{-1})` given the Cholesky factor of `A`.
fn draw_with_precision<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    scale: f64,
    rng: &mut R,
) -> Option<DVector<f64>> {
    let z = standard_normal_vec(mean.len(), rng);
    let w = chol.l().transpose().solve_upper_triangular(&z)?;
    Some(mean + w * scale)
}

/// Bayesian linear regression draw: sigma^2 from its scaled inverse
/// chi-square posterior, coefficients given sigma, then a noisy prediction.
fn draw_linear<R: Rng + ?Sized>(
    z: &DMatrix<f64>,
    y: &[f64],
    obs: &[usize],
    mis: &[usize],
    rng: &mut R,
) -> Option<Vec<f64>> {
    let zo = rows(z, obs);
    let yo = DVector::from_iterator(obs.len(), obs.iter().map(|&i| y[i]));
    let q = zo.ncols();
    let mut a = zo.transpose() * &zo;
    for k in 0..q {
        a[(k, k)] += RIDGE * (1.0 + a[(k, k)]);
    }
    let chol = a.cholesky()?;
    let coef = chol.solve(&(zo.transpose() * &yo));
    let resid = &yo - &zo * &coef;
    let rss = resid.norm_squared();
    let df = (obs.len() as f64 - q as f64).max(1.0);
    let g: f64 = ChiSquared::new(df).ok()?.sample(rng);
    let sigma = (rss / g.max(1e-12)).sqrt();
    let beta = draw_with_precision(&coef, &chol, sigma, rng)?;
    let zm = rows(z, mis);
    let pred = zm * beta;
    let out: Vec<f64> = pred.iter().map(|p| p + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
    out.iter().all(|v| v.is_finite()).then_some(out)
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Ridge-stabilised IRLS logistic fit on the observed rows, then linear
/// scores for the missing rows under a posterior coefficient draw.
fn draw_logistic_scores<R: Rng + ?Sized>(
    z: &DMatrix<f64>,
    y: &[f64],
    obs: &[usize],
    mis: &[usize],
    warm: &mut Option<DVector<f64>>,
    rng: &mut R,
) -> Option<Vec<f64>> {
    let zo = rows(z, obs);
    let q = zo.ncols();
    let mut beta = warm.clone().filter(|b| b.len() == q).unwrap_or_else(|| DVector::zeros(q));
    let mut converged = None;
    for _ in 0..LOGISTIC_MAX_ITER {
        let eta = &zo * &beta;
        let mut grad = DVector::zeros(q);
        let mut info = DMatrix::zeros(q, q);
        let mut weighted = zo.clone();
        for i in 0..obs.len() {
            let p = sigmoid(eta[i]);
            let w = (p * (1.0 - p)).max(1e-10);
            for k in 0..q {
                grad[k] += (y[i] - p) * zo[(i, k)];
                weighted[(i, k)] *= w;
            }
        }
        info.gemm_tr(1.0, &zo, &weighted, 0.0);
        for k in 1..q {
            grad[k] -= LOGISTIC_RIDGE * beta[k];
            info[(k, k)] += LOGISTIC_RIDGE;
        }
        info[(0, 0)] += 1e-10;
        let chol = info.cholesky()?;
        let step = chol.solve(&grad);
        beta += &step;
        if !beta.iter().all(|b| b.is_finite()) {
            return None;
        }
        if step.amax() < 1e-8 {
            converged = Some(chol);
            break;
        }
    }
    let chol = converged?;
    *warm = Some(beta.clone());
    let draw = draw_with_precision(&beta, &chol, 1.0, rng)?;
    let zm = rows(z, mis);
    Some((zm * draw).iter().copied().collect())
}

fn sample_softmax<R: Rng + ?Sized>(scores: impl Iterator<Item = f64>, rng: &mut R) -> usize {
    let scores: Vec<f64> = scores.collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn numeric(name: &str, values: Vec<Option<f64>>) -> RawColumn {
        RawColumn { name: name.into(), kind: ColumnKind::Numeric, values }
    }

    fn raw(columns: Vec<RawColumn>) -> RawDataset {
        let n = columns[0].values.len();
        RawDataset::new(
            (0..n).map(|i| i.to_string()).collect(),
            (0..n).map(|i| 1.0 + i as f64).collect(),
            (0..n).map(|i| i % 2 == 0).collect(),
            columns,
        )
        .unwrap()
    }

    #[test]
    fn mean_fill() {
        let r = raw(vec![numeric("a", vec![Some(1.0), Some(2.0), None])]);
        let t = initial_impute(&r).unwrap();
        assert_eq!(t.columns[0].values, vec![1.0, 2.0, 1.5]);
    }

    #[test]
    fn mode_fill_prefers_lowest_level_on_ties() {
        let col = RawColumn {
            name: "b".into(),
            kind: ColumnKind::Binary,
            values: vec![Some(0.0), Some(0.0), Some(1.0), None],
        };
        assert_eq!(initial_values(&raw(vec![col])).unwrap(), vec![0.0]);
        let tie = RawColumn { name: "b".into(), kind: ColumnKind::Binary, values: vec![Some(1.0), Some(0.0), None] };
        assert_eq!(initial_values(&raw(vec![tie])).unwrap(), vec![0.0]);
    }

    #[test]
    fn all_missing_column_is_an_error() {
        let r = raw(vec![numeric("a", vec![Some(1.0), Some(2.0)]), numeric("z", vec![None, None])]);
        assert_eq!(initial_impute(&r).unwrap_err().to_string(), "column z has no observed values");
    }

    #[test]
    fn nothing_to_impute_is_identity() {
        let r = raw(vec![numeric("a", vec![Some(1.0), Some(2.5), Some(-1.0)])]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, diag) = chained_impute(&r, &ImputationConfig::default(), &mut rng).unwrap();
        assert_eq!(t.columns[0].values, vec![1.0, 2.5, -1.0]);
        assert_eq!(diag, ImputationDiagnostics::default());
    }

    #[test]
    fn zero_sweeps_rejected() {
        let r = raw(vec![numeric("a", vec![Some(1.0), None])]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ImputationConfig { sweeps: 0, ..Default::default() };
        assert!(chained_impute(&r, &cfg, &mut rng).is_err());
    }

    #[test]
    fn softmax_sampling_follows_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hits = [0usize; 2];
        for _ in 0..4000 {
            hits[sample_softmax([0.0, 3f64.ln()].into_iter(), &mut rng)] += 1;
        }
        let frac = hits[1] as f64 / 4000.0;
        assert!((frac - 0.75).abs() < 0.03, "{frac}");
    }
}
