use super::SurvivalData;
use crate::error::{CoxError, Result};

/// Distinct event times with their tied-event sets and nested risk sets.
///
/// Risk sets are stored implicitly: `order` lists patients by descending time,
/// and the risk set at event time `j` is `order[..at_risk[j]]`. Censorings at
/// an event time are part of that time's risk set.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskSetIndex {
    order: Vec<usize>,
    event_times: Vec<f64>,
    ties: Vec<Vec<usize>>,
    at_risk: Vec<usize>,
}

impl RiskSetIndex {
    pub fn event_times(&self) -> &[f64] {
        &self.event_times
    }

    /// Tied-event index set `H_j` for event time `j` (ascending time order).
    pub fn ties(&self, j: usize) -> &[usize] {
        &self.ties[j]
    }

    pub fn tie_counts(&self) -> Vec<usize> {
        self.ties.iter().map(Vec::len).collect()
    }

    pub fn risk_set_sizes(&self) -> &[usize] {
        &self.at_risk
    }

    pub fn risk_set(&self, j: usize) -> &[usize] {
        &self.order[..self.at_risk[j]]
    }

    /// Patients sorted by descending time.
    pub fn descending_order(&self) -> &[usize] {
        &self.order
    }

    pub fn n_event_times(&self) -> usize {
        self.event_times.len()
    }

    pub fn n_patients(&self) -> usize {
        self.order.len()
    }
}

pub fn build_risk_index(data: &SurvivalData) -> Result<RiskSetIndex> {
    let times = data.times();
    let events = data.events();
    let mut order: Vec<usize> = (0..data.n()).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]).then(a.cmp(&b)));

    let mut event_times = Vec::new();
    let mut ties = Vec::new();
    let mut at_risk = Vec::new();
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut end = k;
        let mut tied = Vec::new();
        while end < order.len() && times[order[end]] == t {
            if events[order[end]] {
                tied.push(order[end]);
            }
            end += 1;
        }
        if !tied.is_empty() {
            tied.sort_unstable();
            event_times.push(t);
            ties.push(tied);
            at_risk.push(end);
        }
        k = end;
    }
    if event_times.is_empty() {
        return Err(CoxError::NoEvents);
    }
    event_times.reverse();
    ties.reverse();
    at_risk.reverse();
    Ok(RiskSetIndex { order, event_times, ties, at_risk })
}
