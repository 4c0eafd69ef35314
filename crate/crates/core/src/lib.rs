//! Semiparametric linear transformation models for right-censored survival
//! data with error-prone covariates, corrected with instrumental variables.
//!
//! The model is `l(T) = −Xβ + e` with `l` an unknown increasing function and
//! `e` drawn from a known member of the family `λ(t) = eᵗ/(1 + r eᵗ)`. The
//! covariates `X` are observed only through `Z = X + v`; instruments `W`
//! satisfy `X = WQ + ε`. Estimation regresses `Z` on `W`, substitutes the
//! fitted `WQ̂` for `X`, and solves the counting-process estimating equations
//! for `β` and the step-function transform `l̂`.
//!
//! ```no_run
//! use transmodel_iv::{fit, FitOptions, HazardFamily, SurvivalDataset};
//! # fn demo(data: SurvivalDataset) -> transmodel_iv::Result<()> {
//! let result = fit(&data, HazardFamily::PROPORTIONAL_HAZARDS, &FitOptions::default())?;
//! println!("beta = {:?}, se = {:?}", result.beta_hat, result.std_errors);
//! # Ok(())
//! # }
//! ```

pub mod data;
pub mod error;
pub mod family;
pub mod io;
pub mod iv;
mod linalg;
pub mod score;
pub mod sim;
pub mod transform;
pub mod variance;

pub use data::{Outcomes, SurvivalDataset};
pub use error::{LtmError, Result};
pub use family::HazardFamily;
pub use iv::{estimate_q, IvRegressionFit};
pub use score::{estimate, estimate_iv, estimate_naive, fit, fit_naive, score_u1, FitOptions, FitResult, FittedModel};
pub use sim::{calibrate_censoring, coverage_study, generate_case, run_study, CaseId, CaseSpec, MetricsReport, StudyOptions};
pub use transform::{cumhaz_increments, solve_transform, EventStructure, StepTransform};
pub use variance::{
    bootstrap_covariance, confidence_intervals, estimate_b, martingale_residuals, sandwich_covariance, Estimator,
    MartingaleResiduals, VarianceComponents,
};
