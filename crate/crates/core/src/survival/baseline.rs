use super::{build_risk_index, Beta, SurvivalData};
use crate::error::{CoxError, Result};
use serde::{Deserialize, Serialize};

/// Right-continuous step function: `initial` before the first knot, then
/// `values[k]` on `[knots[k], knots[k + 1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
    pub initial: f64,
    /// Number of patients whose events (or observations) create each step.
    pub counts: Vec<usize>,
}

impl StepFunction {
    pub fn new(knots: Vec<f64>, values: Vec<f64>, initial: f64, counts: Vec<usize>) -> Result<Self> {
        if knots.len() != values.len() || knots.len() != counts.len() {
            return Err(CoxError::DimensionMismatch { expected: knots.len(), found: values.len() });
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(CoxError::InvalidData("step-function knots must be strictly ascending".into()));
        }
        Ok(Self { knots, values, initial, counts })
    }

    pub fn constant(initial: f64) -> Self {
        Self { knots: Vec::new(), values: Vec::new(), initial, counts: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = self.knots.partition_point(|&x| x <= t);
        if k == 0 {
            self.initial
        } else {
            self.values[k - 1]
        }
    }

    pub fn last_knot(&self) -> Option<f64> {
        self.knots.last().copied()
    }
}

/// Breslow cumulative baseline hazard at `beta`; knots at distinct event times.
pub fn breslow_baseline(data: &SurvivalData, beta: &Beta) -> Result<StepFunction> {
    let index = build_risk_index(data)?;
    let eta = data.linear_predictor(beta)?;
    let shift = eta.iter().sum::<f64>() / eta.len() as f64;
    let theta: Vec<f64> = eta.iter().map(|e| (e - shift).exp()).collect();
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(CoxError::NonFinite { beta: beta.iter().copied().collect() });
    }
    let scale = (-shift).exp();

    let order = index.descending_order();
    let mut risk_sums = vec![0.0; index.n_event_times()];
    let mut added = 0;
    let mut s0 = 0.0;
    for j in (0..index.n_event_times()).rev() {
        while added < index.risk_set_sizes()[j] {
            s0 += theta[order[added]];
            added += 1;
        }
        risk_sums[j] = s0;
    }

    let mut cumulative = 0.0;
    let mut values = Vec::with_capacity(risk_sums.len());
    for (j, s) in risk_sums.iter().enumerate() {
        cumulative += index.ties(j).len() as f64 / s * scale;
        values.push(cumulative);
    }
    StepFunction::new(index.event_times().to_vec(), values, 0.0, index.tie_counts())
}

/// Nelson-Aalen cumulative hazard (Breslow with `beta = 0`).
pub fn nelson_aalen(times: &[f64], events: &[bool]) -> Result<StepFunction> {
    let data = SurvivalData::new(times.to_vec(), events.to_vec(), vec![], vec![])?;
    breslow_baseline(&data, &Beta::zeros(0))
}

/// `S(t | lp) = exp(-Lambda0(t) * exp(lp))`.
pub fn cox_survival(baseline: &StepFunction, lp: f64, t: f64) -> f64 {
    let cum = baseline.eval(t);
    if cum <= 0.0 {
        return 1.0;
    }
    (-cum * lp.exp()).exp().clamp(0.0, 1.0)
}

/// Product-limit survival estimate; knots at distinct event times.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<StepFunction> {
    if times.is_empty() || times.len() != events.len() {
        return Err(CoxError::DimensionMismatch { expected: times.len().max(1), found: events.len() });
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk = times.len();
    let mut surv = 1.0;
    let (mut knots, mut values, mut counts) = (Vec::new(), Vec::new(), Vec::new());
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut end = k;
        let mut deaths = 0;
        while end < order.len() && times[order[end]] == t {
            deaths += usize::from(events[order[end]]);
            end += 1;
        }
        if deaths > 0 {
            surv *= 1.0 - deaths as f64 / at_risk as f64;
            knots.push(t);
            values.push(surv);
            counts.push(deaths);
        }
        at_risk -= end - k;
        k = end;
    }
    StepFunction::new(knots, values, 1.0, counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn breslow_at_zero_is_nelson_aalen() {
        let d = SurvivalData::from_rows(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![true; 4],
            &[vec![0.3], vec![1.0], vec![-2.0], vec![0.0]],
        )
        .unwrap();
        let b = breslow_baseline(&d, &Beta::zeros(1)).unwrap();
        close(&b.values, &[0.25, 0.25 + 1.0 / 3.0, 0.25 + 1.0 / 3.0 + 0.5, 0.25 + 1.0 / 3.0 + 0.5 + 1.0]);
    }

    #[test]
    fn breslow_with_censoring() {
        let d = SurvivalData::from_rows(vec![1.0, 2.0, 3.0, 4.0], vec![true, false, true, false], &vec![vec![0.0]; 4])
            .unwrap();
        let b = breslow_baseline(&d, &Beta::zeros(1)).unwrap();
        assert_eq!(b.knots, vec![1.0, 3.0]);
        close(&b.values, &[0.25, 0.75]);
        assert_eq!(b.eval(0.5), 0.0);
        assert_eq!(b.eval(2.0), 0.25);
    }

    #[test]
    fn constant_lp_scales_nelson_aalen() {
        let times = vec![1.0, 2.0, 2.0, 5.0, 7.0];
        let events = vec![true, true, true, false, true];
        // x = 2 for everyone, beta = 0.7 -> lp = 1.4
        let d = SurvivalData::from_rows(times.clone(), events.clone(), &vec![vec![2.0]; 5]).unwrap();
        let b = breslow_baseline(&d, &Beta::from_vec(vec![0.7])).unwrap();
        let na = nelson_aalen(&times, &events).unwrap();
        let scaled: Vec<f64> = na.values.iter().map(|v| v * (-1.4f64).exp()).collect();
        close(&b.values, &scaled);
        assert_eq!(b.counts, vec![1, 2, 1]);
    }

    #[test]
    fn cox_survival_values() {
        let zero = StepFunction::constant(0.0);
        assert_eq!(cox_survival(&zero, 3.0, 10.0), 1.0);
        let one = StepFunction::new(vec![1.0], vec![1.0], 0.0, vec![1]).unwrap();
        assert!((cox_survival(&one, 0.0, 1.0) - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(cox_survival(&one, 0.0, 0.5), 1.0);
        let half = StepFunction::new(vec![1.0], vec![0.5], 0.0, vec![1]).unwrap();
        assert!((cox_survival(&half, 2f64.ln(), 2.0) - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(cox_survival(&one, 1e6, 1.0), 0.0);
    }

    #[test]
    fn km_uncensored() {
        let km = kaplan_meier(&[1.0, 2.0, 3.0, 4.0], &[true; 4]).unwrap();
        close(&km.values, &[0.75, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn km_with_censoring() {
        let km = kaplan_meier(&[1.0, 2.0, 3.0, 4.0], &[true, false, true, true]).unwrap();
        assert_eq!(km.knots, vec![1.0, 3.0, 4.0]);
        close(&km.values, &[0.75, 0.375, 0.0]);
    }

    #[test]
    fn km_all_censored_is_flat() {
        let km = kaplan_meier(&[1.0, 2.0], &[false, false]).unwrap();
        assert!(km.is_empty());
        assert_eq!(km.eval(100.0), 1.0);
    }

    #[test]
    fn step_function_rejects_unsorted_knots() {
        assert!(StepFunction::new(vec![2.0, 1.0], vec![0.0, 0.0], 0.0, vec![1, 1]).is_err());
    }
}
