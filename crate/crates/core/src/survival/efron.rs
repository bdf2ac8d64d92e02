use super::{Beta, RiskSetIndex, SurvivalData};
use crate::error::{CoxError, Result};
use nalgebra::{DMatrix, DVector};

/// Log partial likelihood with its gradient and Hessian at one `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodEval {
    pub loglik: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

impl LikelihoodEval {
    pub fn zero(p: usize) -> Self {
        Self { loglik: 0.0, gradient: DVector::zeros(p), hessian: DMatrix::zeros(p, p) }
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    /// Componentwise sum, as used when strata (centres) are combined.
    pub fn accumulate(&mut self, other: &LikelihoodEval) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(CoxError::DimensionMismatch { expected: self.dim(), found: other.dim() });
        }
        self.loglik += other.loglik;
        self.gradient += &other.gradient;
        self.hessian += &other.hessian;
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { loglik: self.loglik * factor, gradient: &self.gradient * factor, hessian: &self.hessian * factor }
    }
}

fn packed_len(p: usize) -> usize {
    p * (p + 1) / 2
}

/// `acc += w * x x^T` on the packed upper triangle.
fn add_outer(acc: &mut [f64], x: &[f64], w: f64) {
    let mut k = 0;
    for a in 0..x.len() {
        let wa = w * x[a];
        for b in a..x.len() {
            acc[k] += wa * x[b];
            k += 1;
        }
    }
}

/// Efron-tie log partial likelihood, gradient and Hessian.
///
/// Linear predictors are centred by their mean before exponentiation; the
/// shift cancels in every ratio and is added back to the log terms, so the
/// returned values are those of the uncentred likelihood.
pub fn efron_loglik(data: &SurvivalData, index: &RiskSetIndex, beta: &Beta) -> Result<LikelihoodEval> {
    let p = data.p();
    if beta.len() != p {
        return Err(CoxError::DimensionMismatch { expected: p, found: beta.len() });
    }
    if index.n_patients() != data.n() {
        return Err(CoxError::DimensionMismatch { expected: data.n(), found: index.n_patients() });
    }
    let n = data.n();
    let eta = data.linear_predictor(beta)?;
    let shift = eta.iter().sum::<f64>() / n as f64;
    let theta: Vec<f64> = eta.iter().map(|e| (e - shift).exp()).collect();
    if theta.iter().any(|t| !t.is_finite()) || !shift.is_finite() {
        return Err(CoxError::NonFinite { beta: beta.iter().copied().collect() });
    }

    let pk = packed_len(p);
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; p];
    let mut s2 = vec![0.0; pk];
    let mut d1 = vec![0.0; p];
    let mut d2 = vec![0.0; pk];
    let mut a = vec![0.0; p];

    let mut loglik = 0.0;
    let mut grad = vec![0.0; p];
    let mut hess = vec![0.0; pk];

    let order = index.descending_order();
    let mut added = 0;
    for j in (0..index.n_event_times()).rev() {
        while added < index.risk_set_sizes()[j] {
            let i = order[added];
            let x = data.row(i);
            s0 += theta[i];
            for (acc, xv) in s1.iter_mut().zip(x) {
                *acc += theta[i] * xv;
            }
            add_outer(&mut s2, x, theta[i]);
            added += 1;
        }

        let tied = index.ties(j);
        let m = tied.len() as f64;
        let mut d0 = 0.0;
        d1.iter_mut().for_each(|v| *v = 0.0);
        d2.iter_mut().for_each(|v| *v = 0.0);
        for &i in tied {
            let x = data.row(i);
            loglik += eta[i];
            d0 += theta[i];
            for k in 0..p {
                d1[k] += theta[i] * x[k];
                grad[k] += x[k];
            }
            add_outer(&mut d2, x, theta[i]);
        }

        for l in 0..tied.len() {
            let frac = l as f64 / m;
            let phi = s0 - frac * d0;
            if !(phi > 0.0 && phi.is_finite()) {
                return Err(CoxError::NonFinite { beta: beta.iter().copied().collect() });
            }
            loglik -= phi.ln() + shift;
            for k in 0..p {
                a[k] = s1[k] - frac * d1[k];
                grad[k] -= a[k] / phi;
            }
            let phi2 = phi * phi;
            let mut q = 0;
            for r in 0..p {
                for c in r..p {
                    let curvature = s2[q] - frac * d2[q];
                    hess[q] -= curvature / phi - a[r] * a[c] / phi2;
                    q += 1;
                }
            }
        }
    }

    if !loglik.is_finite() {
        return Err(CoxError::NonFinite { beta: beta.iter().copied().collect() });
    }
    let mut hessian = DMatrix::zeros(p, p);
    let mut q = 0;
    for r in 0..p {
        for c in r..p {
            hessian[(r, c)] = hess[q];
            hessian[(c, r)] = hess[q];
            q += 1;
        }
    }
    Ok(LikelihoodEval { loglik, gradient: DVector::from_vec(grad), hessian })
}

/// Sum of per-stratum likelihoods; each stratum keeps its own risk sets.
pub fn efron_loglik_stratified(strata: &[(SurvivalData, RiskSetIndex)], beta: &Beta) -> Result<LikelihoodEval> {
    let mut total = LikelihoodEval::zero(beta.len());
    for (data, index) in strata {
        total.accumulate(&efron_loglik(data, index, beta)?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::super::build_risk_index;
    use super::*;

    fn eval(times: &[f64], events: &[bool], rows: &[Vec<f64>], beta: &[f64]) -> LikelihoodEval {
        let d = SurvivalData::from_rows(times.to_vec(), events.to_vec(), rows).unwrap();
        let idx = build_risk_index(&d).unwrap();
        efron_loglik(&d, &idx, &Beta::from_vec(beta.to_vec())).unwrap()
    }

    #[test]
    fn three_patients_at_zero() {
        let e = eval(&[1.0, 2.0, 3.0], &[true; 3], &[vec![1.0], vec![2.0], vec![3.0]], &[0.0]);
        assert!((e.loglik + 6f64.ln()).abs() < 1e-12);
        // per-event terms: 1 - 2, 2 - 2.5, 3 - 3
        assert!((e.gradient[0] + 1.5).abs() < 1e-12);
    }

    #[test]
    fn two_tied_events_at_zero() {
        let e = eval(&[2.0, 2.0], &[true, true], &[vec![0.3], vec![-1.7]], &[0.0]);
        // Efron denominators 2 and 2 - 1/2 * 2 = 1
        assert!((e.loglik + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn censored_only_stratum_tail_contributes_to_risk_set() {
        let e = eval(&[1.0, 5.0], &[true, false], &[vec![0.0], vec![0.0]], &[0.0]);
        assert!((e.loglik + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_linear_predictors_do_not_overflow() {
        let e = eval(&[1.0, 2.0, 3.0], &[true, true, false], &[vec![800.0], vec![801.0], vec![799.0]], &[1.0]);
        assert!(e.loglik.is_finite());
        assert!(e.hessian[(0, 0)] <= 0.0);
    }

    #[test]
    fn overflow_reports_beta() {
        let d = SurvivalData::from_rows(vec![1.0, 2.0], vec![true, true], &[vec![1.0], vec![-1.0]]).unwrap();
        let idx = build_risk_index(&d).unwrap();
        let err = efron_loglik(&d, &idx, &Beta::from_vec(vec![1e308])).unwrap_err();
        assert!(matches!(err, CoxError::NonFinite { .. }));
    }

    #[test]
    fn dimension_checked() {
        let d = SurvivalData::from_rows(vec![1.0], vec![true], &[vec![1.0]]).unwrap();
        let idx = build_risk_index(&d).unwrap();
        assert!(efron_loglik(&d, &idx, &Beta::zeros(2)).is_err());
    }
}
