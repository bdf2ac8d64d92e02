//! Model-performance statistics and their privacy-preserving aggregation.
//!
//! Per-bootstrap curves never leave a data holder individually: they are
//! evaluated on a knot grid thinned so that every reported knot covers at
//! least a configured number of patients, and only the per-knot median and
//! percentile band across bootstraps are kept.

use crate::error::{CoxError, Result};
use crate::survival::{cox_survival, kaplan_meier, StepFunction};
use serde::{Deserialize, Serialize};

/// Harrell's concordance index.
///
/// Comparable pairs: the shorter time is an event and the times differ. A
/// pair is concordant when the shorter-lived patient has the higher linear
/// predictor; equal predictors count one half.
pub fn c_harrell(times: &[f64], events: &[bool], lp: &[f64]) -> Result<f64> {
    let n = times.len();
    if events.len() != n || lp.len() != n {
        return Err(CoxError::DimensionMismatch { expected: n, found: events.len().min(lp.len()) });
    }
    let mut ranks_sorted: Vec<f64> = lp.to_vec();
    ranks_sorted.sort_by(f64::total_cmp);
    ranks_sorted.dedup();
    let rank = |v: f64| ranks_sorted.partition_point(|&x| x < v);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));

    let mut tree = Fenwick::new(ranks_sorted.len());
    let (mut comparable, mut concordant, mut tied) = (0u64, 0u64, 0u64);
    let mut inserted = 0u64;
    let mut k = 0;
    while k < n {
        let t = times[order[k]];
        let mut end = k;
        while end < n && times[order[end]] == t {
            end += 1;
        }
        for &i in &order[k..end] {
            if events[i] {
                let r = rank(lp[i]);
                let below = tree.prefix(r);
                let equal = tree.prefix(r + 1) - below;
                comparable += inserted;
                concordant += below;
                tied += equal;
            }
        }
        for &i in &order[k..end] {
            tree.add(rank(lp[i]));
            inserted += 1;
        }
        k = end;
    }
    if comparable == 0 {
        return Err(CoxError::NoComparablePairs);
    }
    Ok((concordant as f64 + 0.5 * tied as f64) / comparable as f64)
}

struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self { tree: vec![0; n + 1] }
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< i`.
    fn prefix(&self, i: usize) -> u64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Linear-interpolation percentile of an ascending slice, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Median with linear interpolation, plus the `[alpha/2, 1 - alpha/2]` band.
pub fn median_and_band(values: &[f64], alpha: f64) -> (f64, f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    (percentile(&v, 0.5), percentile(&v, alpha / 2.0), percentile(&v, 1.0 - alpha / 2.0))
}

/// Lower median: element `(len - 1) / 2` of the sorted sample.
pub fn lower_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

/// Candidate knots with the number of patients each one represents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotGrid {
    pub knots: Vec<f64>,
    pub counts: Vec<usize>,
}

impl KnotGrid {
    pub fn new(knots: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if knots.len() != counts.len() {
            return Err(CoxError::DimensionMismatch { expected: knots.len(), found: counts.len() });
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(CoxError::InvalidData("grid knots must be strictly ascending".into()));
        }
        Ok(Self { knots, counts })
    }

    pub fn from_step(f: &StepFunction) -> Self {
        Self { knots: f.knots.clone(), counts: f.counts.clone() }
    }

    /// Distinct event times with their event counts.
    pub fn event_times(times: &[f64], events: &[bool]) -> Self {
        let mut ev: Vec<f64> = times.iter().zip(events).filter(|(_, e)| **e).map(|(t, _)| *t).collect();
        ev.sort_by(f64::total_cmp);
        let mut knots: Vec<f64> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for t in ev {
            if knots.last() == Some(&t) {
                *counts.last_mut().unwrap() += 1;
            } else {
                knots.push(t);
                counts.push(1);
            }
        }
        Self { knots, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Groups consecutive knots until each group holds at least `min_patients`;
    /// a short remainder is merged into the last group. Each group is reported
    /// at its last knot. Returns `(knot, patients)` per reported point.
    pub fn thin(&self, min_patients: usize) -> Vec<(f64, usize)> {
        let min = min_patients.max(1);
        let mut out: Vec<(f64, usize)> = Vec::new();
        let mut acc = 0;
        for (k, c) in self.knots.iter().zip(&self.counts) {
            acc += c;
            if acc >= min {
                out.push((*k, acc));
                acc = 0;
            }
        }
        if acc > 0 {
            match out.last_mut() {
                Some(last) => {
                    last.0 = *self.knots.last().unwrap();
                    last.1 += acc;
                }
                None => out.push((*self.knots.last().unwrap(), acc)),
            }
        }
        out
    }
}

/// Per-knot bootstrap median and percentile band of a stepwise function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedCurve {
    pub knots: Vec<f64>,
    /// Patients represented by each reported knot.
    pub n_patients: Vec<usize>,
    pub median: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Value before the first knot.
    pub initial: f64,
}

impl AggregatedCurve {
    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn min_patients(&self) -> Option<usize> {
        self.n_patients.iter().copied().min()
    }

    pub fn eval_median(&self, x: f64) -> f64 {
        let k = self.knots.partition_point(|&v| v <= x);
        if k == 0 {
            self.initial
        } else {
            self.median[k - 1]
        }
    }
}

/// Thins `grid` to knots covering at least `min_patients` each and summarises
/// the curves there. If the grid holds fewer than `min_patients` in total the
/// result is a single terminal knot.
pub fn aggregate_curve(
    curves: &[StepFunction],
    grid: &KnotGrid,
    min_patients: usize,
    alpha: f64,
) -> Result<AggregatedCurve> {
    let first = curves.first().ok_or_else(|| CoxError::InvalidData("no curves to aggregate".into()))?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CoxError::Config(format!("alpha {alpha} outside (0, 1)")));
    }
    let mut out = AggregatedCurve {
        knots: Vec::new(),
        n_patients: Vec::new(),
        median: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
        initial: first.initial,
    };
    let mut values = vec![0.0; curves.len()];
    for (knot, count) in grid.thin(min_patients) {
        for (v, c) in values.iter_mut().zip(curves) {
            *v = c.eval(knot);
        }
        let (m, lo, hi) = median_and_band(&values, alpha);
        out.knots.push(knot);
        out.n_patients.push(count);
        out.median.push(m);
        out.lower.push(lo.min(m));
        out.upper.push(hi.max(m));
    }
    Ok(out)
}

/// Empirical CDF of a sample: knots at distinct values, value = fraction `<= x`.
pub fn empirical_cdf(values: &[f64]) -> Result<StepFunction> {
    if values.is_empty() {
        return Err(CoxError::InvalidData("empty sample".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let (mut knots, mut vals, mut counts) = (Vec::new(), Vec::new(), Vec::<usize>::new());
    for (i, x) in v.iter().enumerate() {
        if knots.last() == Some(x) {
            *counts.last_mut().unwrap() += 1;
            *vals.last_mut().unwrap() = (i + 1) as f64 / n;
        } else {
            knots.push(*x);
            counts.push(1);
            vals.push((i + 1) as f64 / n);
        }
    }
    StepFunction::new(knots, vals, 0.0, counts)
}

/// Assigns each linear predictor to a subgroup: index = number of thresholds
/// strictly below it.
pub fn subgroup_of(lp: f64, thresholds: &[f64]) -> usize {
    thresholds.iter().filter(|t| lp > **t).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgroupCurves {
    pub size: usize,
    /// Observed Kaplan-Meier curve of the members.
    pub km: StepFunction,
    /// Mean Cox-predicted survival of the members, on the baseline's knots.
    pub cox: StepFunction,
}

/// Kaplan-Meier versus mean Cox prediction per linear-predictor subgroup.
/// Empty subgroups yield `None`.
pub fn subgroup_km_vs_cox(
    times: &[f64],
    events: &[bool],
    lp: &[f64],
    baseline: &StepFunction,
    thresholds: &[f64],
) -> Result<Vec<Option<SubgroupCurves>>> {
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(CoxError::InvalidData("subgroup thresholds must be ascending".into()));
    }
    let n = times.len();
    if events.len() != n || lp.len() != n {
        return Err(CoxError::DimensionMismatch { expected: n, found: lp.len() });
    }
    let mut members = vec![Vec::new(); thresholds.len() + 1];
    for i in 0..n {
        members[subgroup_of(lp[i], thresholds)].push(i);
    }
    members
        .into_iter()
        .map(|idx| {
            if idx.is_empty() {
                return Ok(None);
            }
            let t: Vec<f64> = idx.iter().map(|&i| times[i]).collect();
            let e: Vec<bool> = idx.iter().map(|&i| events[i]).collect();
            let km = kaplan_meier(&t, &e)?;
            let values = baseline
                .knots
                .iter()
                .map(|&k| idx.iter().map(|&i| cox_survival(baseline, lp[i], k)).sum::<f64>() / idx.len() as f64)
                .collect();
            let cox = StepFunction::new(baseline.knots.clone(), values, 1.0, baseline.counts.clone())?;
            Ok(Some(SubgroupCurves { size: idx.len(), km, cox }))
        })
        .collect()
}

/// One bootstrap's inputs to the calibration summary.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReplicate {
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub lp: Vec<f64>,
    pub baseline: StepFunction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    /// Lower median of the pooled predicted survival in the group.
    pub predicted: f64,
    /// Bootstrap median of the group's Kaplan-Meier survival at the time point.
    pub observed: f64,
    pub lower: f64,
    pub upper: f64,
    /// Smallest group size over bootstraps.
    pub n_patients: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub time: f64,
    pub points: Vec<CalibrationPoint>,
    /// The time point lies after the last baseline knot of some bootstrap.
    pub beyond_follow_up: bool,
    /// Fewer distinct groups than requested (tied cutpoints).
    pub degenerate: bool,
}

/// Calibration of predicted against observed survival at fixed time points.
///
/// Predictions from all bootstraps are pooled to place equal-count cutpoints;
/// within each bootstrap the cutpoints define the groups whose Kaplan-Meier
/// survival is compared with the prediction.
pub fn calibration(
    replicates: &[CalibrationReplicate],
    time_points: &[f64],
    n_groups: usize,
    alpha: f64,
) -> Result<Vec<CalibrationTable>> {
    if replicates.is_empty() {
        return Err(CoxError::InvalidData("no bootstrap replicates".into()));
    }
    if n_groups == 0 {
        return Err(CoxError::Config("calibration needs at least one group".into()));
    }
    let mut tables = Vec::with_capacity(time_points.len());
    for &t in time_points {
        if !(t >= 0.0) {
            return Err(CoxError::Config(format!("calibration time {t} must be nonnegative")));
        }
        let beyond = replicates.iter().any(|r| r.baseline.last_knot().is_none_or(|k| t > k));
        let preds: Vec<Vec<f64>> =
            replicates.iter().map(|r| r.lp.iter().map(|lp| cox_survival(&r.baseline, *lp, t)).collect()).collect();
        let mut pooled: Vec<f64> = preds.iter().flatten().copied().collect();
        pooled.sort_by(f64::total_cmp);
        let (lo, hi) = (pooled[0], *pooled.last().unwrap());
        let mut cuts: Vec<f64> = (1..n_groups)
            .map(|k| percentile(&pooled, k as f64 / n_groups as f64))
            .filter(|c| *c >= lo && *c < hi)
            .collect();
        cuts.dedup();
        let degenerate = cuts.len() + 1 < n_groups;
        let groups = cuts.len() + 1;

        let mut group_preds = vec![Vec::new(); groups];
        for p in &pooled {
            group_preds[subgroup_of(*p, &cuts)].push(*p);
        }
        let mut observed = vec![Vec::new(); groups];
        let mut sizes = vec![usize::MAX; groups];
        for (r, pr) in replicates.iter().zip(&preds) {
            let mut members = vec![Vec::new(); groups];
            for (i, p) in pr.iter().enumerate() {
                members[subgroup_of(*p, &cuts)].push(i);
            }
            for (g, idx) in members.iter().enumerate() {
                sizes[g] = sizes[g].min(idx.len());
                if idx.is_empty() {
                    continue;
                }
                let tt: Vec<f64> = idx.iter().map(|&i| r.times[i]).collect();
                let ee: Vec<bool> = idx.iter().map(|&i| r.events[i]).collect();
                observed[g].push(kaplan_meier(&tt, &ee)?.eval(t));
            }
        }
        let points = (0..groups)
            .filter(|&g| !group_preds[g].is_empty() && !observed[g].is_empty())
            .map(|g| {
                let (m, l, u) = median_and_band(&observed[g], alpha);
                CalibrationPoint {
                    predicted: lower_median(&group_preds[g]),
                    observed: m,
                    lower: l,
                    upper: u,
                    n_patients: sizes[g],
                }
            })
            .collect();
        tables.push(CalibrationTable { time: t, points, beyond_follow_up: beyond, degenerate });
    }
    Ok(tables)
}
