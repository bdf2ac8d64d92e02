//! Numerical core for centre-stratified Cox modelling across data holders.
//!
//! - [`survival`]: Efron partial likelihood, Newton iteration, Breslow and Kaplan-Meier
//! - [`imputation`]: chained-equation multiple imputation
//! - [`diagnostics`]: concordance, privacy-aggregated curves, subgroup and calibration summaries
//! - [`simulation`]: synthetic multi-centre head-and-neck cohort

pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod imputation;
pub mod simulation;
pub mod survival;

pub use error::{CoxError, Result};
pub use survival::{Beta, LikelihoodEval, RiskSetIndex, StepFunction, SurvivalData};
