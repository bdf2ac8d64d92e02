use super::{build_risk_index, efron_loglik, Beta, LikelihoodEval, SurvivalData};
use crate::error::{CoxError, Result};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Hessians whose reciprocal condition number falls below this are treated as singular.
pub const SINGULAR_RCOND: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    /// Convergence when every component of the Newton step is below this.
    pub tolerance: f64,
    /// Cap on likelihood evaluations per fit.
    pub max_iterations: usize,
    /// Step halvings allowed when a step lowers the log-likelihood.
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tolerance: 1e-6, max_iterations: 50, max_halvings: 10 }
    }
}

/// Ratio of the smallest to the largest absolute eigenvalue of a symmetric matrix.
pub fn reciprocal_condition(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let eig = SymmetricEigen::new(m.clone());
    let abs = eig.eigenvalues.map(f64::abs);
    let max = abs.max();
    if !(max > 0.0) || !max.is_finite() {
        return 0.0;
    }
    abs.min() / max
}

/// Newton-Raphson increment `-H^{-1} g` for maximising the log-likelihood.
pub fn newton_step(eval: &LikelihoodEval) -> Result<DVector<f64>> {
    let p = eval.dim();
    if eval.hessian.nrows() != p || eval.hessian.ncols() != p {
        return Err(CoxError::DimensionMismatch { expected: p, found: eval.hessian.nrows() });
    }
    if p == 0 {
        return Ok(DVector::zeros(0));
    }
    let rcond = reciprocal_condition(&eval.hessian);
    if rcond < SINGULAR_RCOND {
        return Err(CoxError::SingularHessian { rcond });
    }
    let neg_h = -&eval.hessian;
    let step = match neg_h.clone().cholesky() {
        Some(chol) => chol.solve(&eval.gradient),
        None => neg_h.lu().solve(&eval.gradient).ok_or(CoxError::SingularHessian { rcond })?,
    };
    if step.iter().any(|v| !v.is_finite()) {
        return Err(CoxError::SingularHessian { rcond });
    }
    Ok(step)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NewtonStatus {
    /// Evaluate the likelihood at [`NewtonState::trial`] and call `update` again.
    Continue,
    Converged,
}

/// Damped Newton iteration driven by externally supplied evaluations.
///
/// The caller evaluates the likelihood at `trial()` (locally, or by summing
/// contributions from several centres) and feeds it back through `update`.
#[derive(Debug, Clone)]
pub struct NewtonState {
    options: NewtonOptions,
    trial: Beta,
    accepted: Option<(Beta, LikelihoodEval)>,
    step: DVector<f64>,
    halvings: usize,
    evaluations: usize,
    converged: bool,
}

impl NewtonState {
    pub fn new(p: usize, options: NewtonOptions) -> Self {
        Self::starting_at(Beta::zeros(p), options)
    }

    pub fn starting_at(beta: Beta, options: NewtonOptions) -> Self {
        let p = beta.len();
        Self {
            options,
            trial: beta,
            accepted: None,
            step: DVector::zeros(p),
            halvings: 0,
            evaluations: 0,
            converged: false,
        }
    }

    pub fn trial(&self) -> &Beta {
        &self.trial
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn is_converged(&self) -> bool {
        self.converged
    }

    /// Last accepted point and its evaluation.
    pub fn current(&self) -> Option<&(Beta, LikelihoodEval)> {
        self.accepted.as_ref()
    }

    pub fn update(&mut self, eval: LikelihoodEval) -> Result<NewtonStatus> {
        if self.converged {
            return Ok(NewtonStatus::Converged);
        }
        if eval.dim() != self.trial.len() {
            return Err(CoxError::DimensionMismatch { expected: self.trial.len(), found: eval.dim() });
        }
        if !eval.loglik.is_finite() {
            return Err(CoxError::NonFinite { beta: self.trial.iter().copied().collect() });
        }
        self.evaluations += 1;

        if let Some((beta, current)) = &self.accepted {
            let slack = 1e-10 * (1.0 + current.loglik.abs());
            if eval.loglik < current.loglik - slack {
                if self.halvings >= self.options.max_halvings {
                    return Err(CoxError::LineSearchFailed);
                }
                self.halvings += 1;
                self.step *= 0.5;
                self.trial = beta + &self.step;
                return self.budget_check();
            }
        }

        self.halvings = 0;
        self.step = newton_step(&eval)?;
        self.accepted = Some((self.trial.clone(), eval));
        if self.step.iter().all(|d| d.abs() < self.options.tolerance) {
            self.converged = true;
            return Ok(NewtonStatus::Converged);
        }
        self.trial = &self.trial + &self.step;
        self.budget_check()
    }

    fn budget_check(&self) -> Result<NewtonStatus> {
        if self.evaluations >= self.options.max_iterations {
            Err(CoxError::NotConverged { iterations: self.evaluations })
        } else {
            Ok(NewtonStatus::Continue)
        }
    }

    pub fn into_fit(self) -> Result<CoxFit> {
        let converged = self.converged;
        let iterations = self.evaluations;
        let (beta, eval) = self.accepted.ok_or(CoxError::NotConverged { iterations })?;
        Ok(CoxFit { beta, eval, iterations, converged })
    }
}

/// Result of a Newton fit; `eval` is the likelihood at `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoxFit {
    pub beta: Beta,
    pub eval: LikelihoodEval,
    pub iterations: usize,
    pub converged: bool,
}

fn drive<F>(p: usize, options: NewtonOptions, mut evaluate: F) -> Result<CoxFit>
where
    F: FnMut(&Beta) -> Result<LikelihoodEval>,
{
    let mut state = NewtonState::new(p, options);
    loop {
        let eval = evaluate(state.trial())?;
        if state.update(eval)? == NewtonStatus::Converged {
            return state.into_fit();
        }
    }
}

/// Single-stratum Newton fit from `beta = 0`.
pub fn fit_cox(data: &SurvivalData, options: NewtonOptions) -> Result<CoxFit> {
    let index = build_risk_index(data)?;
    drive(data.p(), options, |beta| efron_loglik(data, &index, beta))
}

/// Stratified fit: shared coefficients, one risk-set structure per stratum.
/// Strata without events contribute nothing.
pub fn fit_stratified(strata: &[SurvivalData], options: NewtonOptions) -> Result<CoxFit> {
    let p = strata.first().map(SurvivalData::p).ok_or_else(|| CoxError::InvalidData("no strata".into()))?;
    let mut indexed = Vec::with_capacity(strata.len());
    for s in strata {
        match build_risk_index(s) {
            Ok(idx) => indexed.push((s, idx)),
            Err(CoxError::NoEvents) => {}
            Err(e) => return Err(e),
        }
    }
    if indexed.is_empty() {
        return Err(CoxError::NoEvents);
    }
    drive(p, options, |beta| {
        let mut total = LikelihoodEval::zero(p);
        for (data, idx) in &indexed {
            total.accumulate(&efron_loglik(data, idx, beta)?)?;
        }
        Ok(total)
    })
}
