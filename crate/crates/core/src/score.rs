//! Estimating equation for `β` and the alternating profile fit.
//!
//! The fit follows the two-stage scheme: regress `Z` on `W` for `Q̂`, then
//! alternate between solving the transform at the current `β` and a
//! quasi-Newton update of `β` on the profiled score
//! `U₁(β) = Σᵢ Σₖ xᵢ [ΔNᵢ(t_k) − Yᵢ(t_k) ΔΛᵢₖ(β, l̂(β))]`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Outcomes, SurvivalDataset};
use crate::error::{LtmError, Result};
use crate::family::HazardFamily;
use crate::iv::{estimate_q, IvRegressionFit};
use crate::linalg::{solve, symmetric_eigenvalues};
use crate::transform::{check_transform, linear_predictor, solve_profile, EventStructure, RootMethod, StepTransform};
use crate::variance::{confidence_intervals, information, sandwich_covariance, VarianceComponents};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Starting value; `None` means all zeros.
    pub beta_init: Option<Vec<f64>>,
    pub max_outer_iters: usize,
    /// Sup-norm on the `β` change.
    pub beta_tol: f64,
    /// Bound on `‖U₁‖ / n`.
    pub score_tol: f64,
    /// Relative forward-difference step for the Jacobian.
    pub jacobian_step: f64,
    pub step_halving_max: usize,
    pub ci_level: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            beta_init: None,
            max_outer_iters: 100,
            beta_tol: 1e-6,
            score_tol: 1e-8,
            jacobian_step: 1e-6,
            step_halving_max: 30,
            ci_level: 0.95,
        }
    }
}

impl FitOptions {
    pub fn validate(&self, p: usize) -> Result<()> {
        let positive = [
            ("beta_tol", self.beta_tol),
            ("score_tol", self.score_tol),
            ("jacobian_step", self.jacobian_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LtmError::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_outer_iters == 0 || self.step_halving_max == 0 {
            return Err(LtmError::Validation("iteration limits must be positive".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(LtmError::Domain(format!("ci_level must lie in (0, 1), got {}", self.ci_level)));
        }
        if let Some(init) = &self.beta_init {
            if init.len() != p {
                return Err(LtmError::Shape(format!("beta_init has {} entries, expected {p}", init.len())));
            }
        }
        Ok(())
    }
}

/// Point estimate with everything the variance code needs. Records are held
/// in canonical order.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub dataset: SurvivalDataset,
    pub design: Array2<f64>,
    pub family: HazardFamily,
    pub beta: Array1<f64>,
    pub transform: StepTransform,
    pub iterations: usize,
    pub converged: bool,
    /// `‖U₁(β̂, l̂)‖ / n`
    pub score_norm: f64,
    /// Why the iteration stopped without converging.
    pub failure: Option<String>,
    pub iv: Option<IvRegressionFit>,
    pub(crate) events: EventStructure,
}

impl FittedModel {
    pub fn events(&self) -> &EventStructure {
        &self.events
    }

    pub fn n(&self) -> usize {
        self.dataset.n()
    }

    /// `ΔΛᵢₖ` at the fitted coefficients, `n × K`.
    pub fn compensator_increments(&self) -> Array2<f64> {
        let eta = self.design.dot(&self.beta);
        crate::transform::increments(&self.events, eta.as_slice().unwrap(), &self.transform.values, self.family)
    }

    /// Forward-difference `∂U₁/∂β` of the profiled score at the fitted `β`.
    pub fn profiled_jacobian(&self, rel_step: f64) -> Result<Array2<f64>> {
        let score = ProfiledScore {
            events: &self.events,
            design: self.design.view(),
            status: self.dataset.status(),
            family: self.family,
        };
        let (_, u) = score.evaluate(&self.beta)?;
        score.jacobian(&self.beta, &u, rel_step)
    }

    pub fn into_error(self) -> LtmError {
        match self.failure {
            Some(reason) if !reason.starts_with("iteration limit") => LtmError::SolverStall {
                iteration: self.iterations,
                reason,
            },
            _ => LtmError::NonConvergence {
                beta: self.beta.to_vec(),
                score_norm: self.score_norm,
                iterations: self.iterations,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub beta_hat: Array1<f64>,
    pub transform: StepTransform,
    pub covariance: Array2<f64>,
    pub std_errors: Array1<f64>,
    pub conf_intervals: Vec<(f64, f64)>,
    pub ci_level: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_score_norm: f64,
    pub family: HazardFamily,
    pub iv: Option<IvRegressionFit>,
    pub components: Option<VarianceComponents>,
}

impl FitResult {
    pub fn assemble(
        model: &FittedModel,
        covariance: Array2<f64>,
        components: Option<VarianceComponents>,
        ci_level: f64,
    ) -> Result<Self> {
        let std_errors = covariance.diag().mapv(f64::sqrt);
        let conf_intervals = confidence_intervals(model.beta.view(), covariance.view(), ci_level)?;
        Ok(Self {
            beta_hat: model.beta.clone(),
            transform: model.transform.clone(),
            covariance,
            std_errors,
            conf_intervals,
            ci_level,
            iterations: model.iterations,
            converged: model.converged,
            final_score_norm: model.score_norm,
            family: model.family,
            iv: model.iv.clone(),
            components,
        })
    }
}

/// `U₁` at the given `β` and transform.
pub fn score_u1(
    beta: ArrayView1<'_, f64>,
    transform: &StepTransform,
    design: ArrayView2<'_, f64>,
    outcomes: &Outcomes,
    family: HazardFamily,
) -> Result<Array1<f64>> {
    let eta = linear_predictor(beta, design, outcomes.len())?;
    let events = EventStructure::new(outcomes);
    check_transform(transform, &events)?;
    Ok(score_from_values(&events, &eta, &transform.values, design, outcomes.status(), family))
}

pub(crate) fn score_from_values(
    events: &EventStructure,
    eta: &[f64],
    values: &[f64],
    design: ArrayView2<'_, f64>,
    status: &[bool],
    family: HazardFamily,
) -> Array1<f64> {
    let n = events.n();
    let mut compensator = vec![0.0; n];
    for (k, &l) in values.iter().enumerate() {
        for &i in events.risk_set(k) {
            compensator[i] += if k == 0 {
                family.cumhaz(eta[i] + l)
            } else {
                family.cumhaz_increment(eta[i] + values[k - 1], eta[i] + l)
            };
        }
    }
    let mut u = Array1::zeros(design.ncols());
    for i in 0..n {
        let resid = f64::from(u8::from(status[i])) - compensator[i];
        u.scaled_add(resid, &design.row(i));
    }
    u
}

/// Score with the transform re-solved at `β`.
pub(crate) struct ProfiledScore<'a> {
    pub events: &'a EventStructure,
    pub design: ArrayView2<'a, f64>,
    pub status: &'a [bool],
    pub family: HazardFamily,
}

impl ProfiledScore<'_> {
    pub fn evaluate(&self, beta: &Array1<f64>) -> Result<(StepTransform, Array1<f64>)> {
        let eta = self.design.dot(beta).to_vec();
        let transform = solve_profile(self.events, &eta, self.family, RootMethod::SafeguardedNewton)?;
        let u = score_from_values(self.events, &eta, &transform.values, self.design, self.status, self.family);
        Ok((transform, u))
    }

    /// Forward-difference Jacobian `∂U₁/∂β` of the profiled score.
    pub fn jacobian(&self, beta: &Array1<f64>, u: &Array1<f64>, rel_step: f64) -> Result<Array2<f64>> {
        let p = beta.len();
        let mut jac = Array2::zeros((p, p));
        for j in 0..p {
            let h = rel_step * beta[j].abs().max(1.0);
            let mut probe = beta.clone();
            probe[j] += h;
            let (step, u_probe) = match self.evaluate(&probe) {
                Ok((_, up)) => (h, up),
                Err(_) => {
                    probe[j] = beta[j] - h;
                    let (_, up) = self.evaluate(&probe)?;
                    (-h, up)
                }
            };
            let col = (&u_probe - u) / step;
            jac.column_mut(j).assign(&col);
        }
        Ok(jac)
    }
}

/// Relative size below which the profiled information is treated as zero.
const INFORMATION_FLOOR: f64 = 1e-6;

/// True when `Σ̂_β` is numerically singular although the design varies,
/// which happens when the estimating equation has no finite root and the
/// iteration runs off to infinity along a separating direction.
fn vanishing_information(profile: &ProfiledScore<'_>, beta: &Array1<f64>, transform: &StepTransform) -> bool {
    let design = profile.design;
    let n = design.nrows() as f64;
    let mean = design.sum_axis(Axis(0)) / n;
    let spread: f64 = design
        .rows()
        .into_iter()
        .map(|row| (&row - &mean).mapv(|v| v * v).sum())
        .sum::<f64>()
        / n;
    if !(spread > 0.0) {
        return false;
    }
    let eta = design.dot(beta);
    match information(profile.events, &transform.values, profile.family, eta.as_slice().unwrap(), design) {
        Ok(info) => {
            let smallest = symmetric_eigenvalues(info.view()).into_iter().fold(f64::INFINITY, f64::min);
            smallest <= INFORMATION_FLOOR * spread
        }
        Err(_) => true,
    }
}

fn norm(v: &Array1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs the alternating iteration on an explicit design, without variance
/// estimation. Records are put in canonical order first (the design rows are
/// permuted alongside). Non-convergence is reported through the returned
/// model rather than as an error.
pub fn estimate(
    dataset: &SurvivalDataset,
    design: ArrayView2<'_, f64>,
    family: HazardFamily,
    options: &FitOptions,
) -> Result<FittedModel> {
    if design.nrows() != dataset.n() {
        return Err(LtmError::Shape(format!(
            "design has {} rows for {} records",
            design.nrows(),
            dataset.n()
        )));
    }
    let order = dataset.canonical_order();
    let canonical = dataset.canonicalized();
    let design = design.select(Axis(0), &order);
    estimate_canonical(canonical, design, family, options, None)
}

pub(crate) fn estimate_canonical(
    dataset: SurvivalDataset,
    design: Array2<f64>,
    family: HazardFamily,
    options: &FitOptions,
    iv: Option<IvRegressionFit>,
) -> Result<FittedModel> {
    let p = design.ncols();
    options.validate(p)?;
    let n = dataset.n();
    let events = EventStructure::new(dataset.outcomes());

    let (beta, transform, iterations, converged, score_norm, failure) = {
        let profile = ProfiledScore {
            events: &events,
            design: design.view(),
            status: dataset.status(),
            family,
        };
        let mut beta = Array1::from(options.beta_init.clone().unwrap_or_else(|| vec![0.0; p]));
        let (mut transform, mut u) = profile.evaluate(&beta)?;
        let mut score = norm(&u);
        let mut last_change = f64::INFINITY;
        let mut iterations = 0;
        let mut failure = None;
        let nf = n as f64;

        let converged = loop {
            if score / nf <= options.score_tol && (last_change < options.beta_tol || iterations == 0) {
                break true;
            }
            if iterations == options.max_outer_iters {
                failure = Some(format!("iteration limit {} reached", options.max_outer_iters));
                break false;
            }
            iterations += 1;

            let jac = match profile.jacobian(&beta, &u, options.jacobian_step) {
                Ok(j) => j,
                Err(e) => {
                    failure = Some(format!("Jacobian probe failed: {e}"));
                    break false;
                }
            };
            let direction = match solve(jac.view(), &(-&u)) {
                Some(d) => d,
                None => {
                    if score / nf <= options.score_tol {
                        break true;
                    }
                    failure = Some("singular finite-difference Jacobian".into());
                    break false;
                }
            };

            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=options.step_halving_max {
                let candidate = &beta + &(&direction * t);
                if let Ok((tr, uc)) = profile.evaluate(&candidate) {
                    let sc = norm(&uc);
                    if sc < score {
                        accepted = Some((candidate, tr, uc, sc));
                        break;
                    }
                }
                t *= 0.5;
            }
            match accepted {
                Some((candidate, tr, uc, sc)) => {
                    last_change = (&candidate - &beta).iter().fold(0.0f64, |m, d| m.max(d.abs()));
                    beta = candidate;
                    transform = tr;
                    u = uc;
                    score = sc;
                }
                None => {
                    if score / nf <= options.score_tol {
                        break true;
                    }
                    failure = Some("step halving exhausted without reducing the score".into());
                    break false;
                }
            }
        };
        let mut converged = converged;
        if converged && vanishing_information(&profile, &beta, &transform) {
            converged = false;
            failure = Some("information vanishes at the solution; the estimate is diverging".into());
        }
        (beta, transform, iterations, converged, score / nf, failure)
    };

    Ok(FittedModel {
        dataset,
        design,
        family,
        beta,
        transform,
        iterations,
        converged,
        score_norm,
        failure,
        iv,
        events,
    })
}

/// First stage plus profile iteration on the imputed design `WQ̂`.
pub fn estimate_iv(dataset: &SurvivalDataset, family: HazardFamily, options: &FitOptions) -> Result<FittedModel> {
    let canonical = dataset.canonicalized();
    let iv = estimate_q(&canonical)?;
    let design = iv.imputed_design.clone();
    estimate_canonical(canonical, design, family, options, Some(iv))
}

/// Same pipeline with the surrogates `Z` used directly as the design.
pub fn estimate_naive(dataset: &SurvivalDataset, family: HazardFamily, options: &FitOptions) -> Result<FittedModel> {
    let canonical = dataset.canonicalized();
    let design = canonical.z().to_owned();
    estimate_canonical(canonical, design, family, options, None)
}

/// IV-corrected fit with plug-in sandwich covariance.
pub fn fit(dataset: &SurvivalDataset, family: HazardFamily, options: &FitOptions) -> Result<FitResult> {
    let model = estimate_iv(dataset, family, options)?;
    finish(model, options.ci_level)
}

/// Naive fit on `Z`, variance from the same plug-in chain without the IV terms.
pub fn fit_naive(dataset: &SurvivalDataset, family: HazardFamily, options: &FitOptions) -> Result<FitResult> {
    let model = estimate_naive(dataset, family, options)?;
    finish(model, options.ci_level)
}

pub fn finish(model: FittedModel, ci_level: f64) -> Result<FitResult> {
    if !model.converged {
        return Err(model.into_error());
    }
    let components = sandwich_covariance(&model)?;
    let covariance = components.covariance.clone();
    FitResult::assemble(&model, covariance, Some(components), ci_level)
}
