//! Plug-in sandwich covariance for `β̂`, with a bootstrap alternative.
//!
//! All integrals against `dl₀` become Stieltjes sums over the jumps of the
//! step transform. Along a jump the integrands `λ dl` and `λ' dl` are
//! integrated exactly, i.e. replaced by the increments `ΔΛ` and `Δλ`, which
//! also covers the first jump where `l̂` starts from `−∞`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::SurvivalDataset;
use crate::error::{LtmError, Result};
use crate::family::HazardFamily;
use crate::linalg::{inverse, symmetrize};
use crate::score::{estimate_iv, estimate_naive, FitOptions, FittedModel};
use crate::transform::EventStructure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleResiduals {
    /// `ΔM̂ᵢ(t_k) = ΔNᵢ(t_k) − Yᵢ(t_k) ΔΛ̂ᵢₖ`, `n × K`.
    pub increments: Array2<f64>,
}

impl MartingaleResiduals {
    pub fn column_sums(&self) -> Array1<f64> {
        self.increments.sum_axis(ndarray::Axis(0))
    }

    pub fn row_sums(&self) -> Array1<f64> {
        self.increments.sum_axis(ndarray::Axis(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    /// `B̂(t_k, t_s)` for `s ≤ k`; zero above the diagonal.
    pub b_matrix: Array2<f64>,
    /// `μ̂(t_k)`, `K × p`.
    pub mu: Array2<f64>,
    /// `μ̂_W(t_k)`, `K × q`; absent for the naive fit.
    pub mu_w: Option<Array2<f64>>,
    pub sigma_beta: Array2<f64>,
    /// `p × q`; absent for the naive fit.
    pub sigma_q: Option<Array2<f64>>,
    pub sigma_1: Array2<f64>,
    pub sigma_2: Array2<f64>,
    pub sigma_12: Array2<f64>,
    pub sigma_total: Array2<f64>,
    /// `β̂ᵀ diag(σ̂²_η) β̂`, the variance of `η β̂` entering `Σ₁`.
    pub eta_variance: f64,
    /// Asymptotic covariance of `√n (β̂ − β)`.
    pub sandwich: Array2<f64>,
    /// `sandwich / n`
    pub covariance: Array2<f64>,
}

fn require_converged(model: &FittedModel) -> Result<()> {
    if model.converged {
        Ok(())
    } else {
        Err(LtmError::Precondition("variance estimation needs a converged fit".into()))
    }
}

pub fn martingale_residuals(model: &FittedModel) -> Result<MartingaleResiduals> {
    require_converged(model)?;
    let events = model.events();
    let eta = model.design.dot(&model.beta);
    let mut increments = -crate::transform::increments(events, eta.as_slice().unwrap(), &model.transform.values, model.family);
    for i in 0..events.n() {
        if let Some(k) = events.event_index(i) {
            increments[[i, k]] += 1.0;
        }
    }
    Ok(MartingaleResiduals { increments })
}

fn log_lambda(f: HazardFamily, a: f64) -> f64 {
    let r = f.r();
    if r == 0.0 {
        a
    } else if a > 0.0 {
        -r.ln() - ((-a).exp() / r).ln_1p()
    } else {
        a - (r * a.exp()).ln_1p()
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Profile quantities at a fixed `(β, l̂)` shared by the information matrix
/// and the sandwich pieces.
pub(crate) struct ProfileWeights<'a> {
    events: &'a EventStructure,
    values: &'a [f64],
    family: HazardFamily,
    eta: &'a [f64],
    /// Cumulative exponent `G_k = Σ_{2 ≤ j ≤ k} log(S_j / S⁻_j)` with
    /// `S_j = Σᵢ Yᵢ(t_j) λ(ηᵢ + l̂_j)` and `S⁻_j` the same sum at `l̂_{j−1}`, so
    /// `B̂(t_k, t_s) = exp(G_k − G_s)`. This is the exact discrete counterpart
    /// of `exp(∫ λ'/λ dl̂)` and makes the information matrix the derivative
    /// of the profiled score.
    g: Vec<f64>,
}

impl<'a> ProfileWeights<'a> {
    pub(crate) fn new(events: &'a EventStructure, values: &'a [f64], family: HazardFamily, eta: &'a [f64]) -> Result<Self> {
        let mut g = vec![0.0; values.len()];
        for k in 1..values.len() {
            let set = events.risk_set(k);
            let log_s = log_sum_exp(set.iter().map(|&i| log_lambda(family, eta[i] + values[k])));
            let log_s_prev = log_sum_exp(set.iter().map(|&i| log_lambda(family, eta[i] + values[k - 1])));
            if !(log_s.is_finite() && log_s_prev.is_finite()) {
                return Err(LtmError::DegenerateRiskSet { time: events.event_times()[k] });
            }
            g[k] = g[k - 1] + (log_s - log_s_prev);
        }
        Ok(Self {
            events,
            values,
            family,
            eta,
            g,
        })
    }

    fn b_matrix(&self) -> Array2<f64> {
        let g = &self.g;
        let k = g.len();
        Array2::from_shape_fn((k, k), |(r, c)| if c <= r { (g[r] - g[c]).exp() } else { 0.0 })
    }

    /// Weighted risk-set means `μ̂(t_k)` of the rows of `x`. Record `i` is
    /// weighted by `λ(ηᵢ + l̂(T̃ᵢ)) / B̂(T̃ᵢ, t_k)`.
    fn risk_means(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let (events, values, g) = (self.events, self.values, &self.g);
        let mut out = Array2::zeros((values.len(), x.ncols()));
        let mut log_w = Vec::new();
        for k in 0..values.len() {
            let set = events.risk_set(k);
            log_w.clear();
            log_w.extend(set.iter().map(|&i| {
                let last = events.last_event(i) - 1;
                log_lambda(self.family, self.eta[i] + values[last]) + g[k] - g[last]
            }));
            let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !top.is_finite() {
                return Err(LtmError::DegenerateRiskSet { time: events.event_times()[k] });
            }
            let mut total = 0.0;
            let mut acc = Array1::<f64>::zeros(x.ncols());
            for (&i, lw) in set.iter().zip(&log_w) {
                let weight = (lw - top).exp();
                total += weight;
                acc.scaled_add(weight, &x.row(i));
            }
            out.row_mut(k).assign(&(acc / total));
        }
        Ok(out)
    }

    /// Exact jumps `(Δλ, ΔΛ)` of record `i` at step `k`; `λ` and `Λ` are zero
    /// before the first event time.
    fn jumps(&self, i: usize, k: usize) -> (f64, f64) {
        let f = self.family;
        let a = self.eta[i] + self.values[k];
        if k == 0 {
            (f.lambda(a), f.cumhaz(a))
        } else {
            let before = self.eta[i] + self.values[k - 1];
            (f.lambda(a) - f.lambda(before), f.cumhaz_increment(before, a))
        }
    }

    /// `(1/n) Σₖ Σᵢ Yᵢ Δλᵢₖ (xᵢ − μ̂ₖ) yᵢᵀ` for multiplier rows `x` and
    /// direction rows `y`.
    fn weighted_cross(&self, x: ArrayView2<'_, f64>, mu: &Array2<f64>, y: ArrayView2<'_, f64>) -> Array2<f64> {
        let (p, m) = (x.ncols(), y.ncols());
        let mut out = Array2::<f64>::zeros((p, m));
        for k in 0..self.values.len() {
            let mu_k = mu.row(k);
            for &i in self.events.risk_set(k) {
                let (d_lambda, _) = self.jumps(i, k);
                let centered = &x.row(i) - &mu_k;
                let yi = y.row(i);
                for r in 0..p {
                    for c in 0..m {
                        out[[r, c]] += d_lambda * centered[r] * yi[c];
                    }
                }
            }
        }
        out / x.nrows() as f64
    }
}

/// `Σ̂_β = −(1/n) ∂U₁/∂β` of the profiled score, in closed form.
pub(crate) fn information(
    events: &EventStructure,
    values: &[f64],
    family: HazardFamily,
    eta: &[f64],
    design: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let weights = ProfileWeights::new(events, values, family, eta)?;
    let mu = weights.risk_means(design)?;
    Ok(weights.weighted_cross(design, &mu, design))
}

pub fn estimate_b(model: &FittedModel) -> Result<Array2<f64>> {
    require_converged(model)?;
    let eta = model.design.dot(&model.beta);
    let weights = ProfileWeights::new(model.events(), &model.transform.values, model.family, eta.as_slice().unwrap())?;
    Ok(weights.b_matrix())
}

pub fn sandwich_covariance(model: &FittedModel) -> Result<VarianceComponents> {
    require_converged(model)?;
    let events = model.events();
    let x = model.design.view();
    let (n, p) = x.dim();
    let nf = n as f64;
    let eta_arr = model.design.dot(&model.beta);
    let eta = eta_arr.as_slice().unwrap();

    let weights = ProfileWeights::new(events, &model.transform.values, model.family, eta)?;
    let b_matrix = weights.b_matrix();
    let mu = weights.risk_means(x)?;
    let w = model.dataset.w();
    let mu_w = match &model.iv {
        Some(_) => Some(weights.risk_means(w)?),
        None => None,
    };

    let sigma_beta = weights.weighted_cross(x, &mu, x);
    let gq = weights.weighted_cross(x, &mu, w);
    let mut sigma_2 = Array2::<f64>::zeros((p, p));
    for k in 0..model.transform.values.len() {
        let mu_k = mu.row(k);
        for &i in events.risk_set(k) {
            let (_, d_cumhaz) = weights.jumps(i, k);
            let centered = &x.row(i) - &mu_k;
            for r in 0..p {
                for c in 0..p {
                    sigma_2[[r, c]] += d_cumhaz * centered[r] * centered[c];
                }
            }
        }
    }
    sigma_2 /= nf;

    // With Q unknown, μ_Q and μ_Q̂ share the same plug-in, so Σ̂₁₂ = Σ̂₂.
    let sigma_12 = sigma_2.clone();
    let (sigma_1, sigma_q, eta_variance) = match &model.iv {
        Some(iv) => {
            let eta_variance: f64 = model
                .beta
                .iter()
                .zip(iv.sigma_eta_sq.iter())
                .map(|(b, s)| b * b * s)
                .sum();
            let s1 = gq.dot(&(&iv.gram_inverse * nf)).dot(&gq.t()) * eta_variance;
            (symmetrize(&s1), Some(gq), eta_variance)
        }
        None => (Array2::zeros((p, p)), None, 0.0),
    };
    let sigma_total = &sigma_1 - &sigma_2 + &(&sigma_12 * 2.0);

    let info_inv = inverse(sigma_beta.view()).ok_or(LtmError::SingularInformation)?;
    let sandwich = symmetrize(&info_inv.dot(&sigma_total).dot(&info_inv.t()));
    let diagonal: Vec<f64> = sandwich.diag().to_vec();
    if diagonal.iter().any(|d| !(*d > 0.0)) {
        return Err(LtmError::InvalidCovariance {
            diagonal,
            components: format!(
                "sigma_beta={:?} sigma_1={:?} sigma_2={:?} sigma_12={:?}",
                sigma_beta.as_slice(),
                sigma_1.as_slice(),
                sigma_2.as_slice(),
                sigma_12.as_slice()
            ),
        });
    }
    let covariance = &sandwich / nf;

    Ok(VarianceComponents {
        b_matrix,
        mu,
        mu_w,
        sigma_beta,
        sigma_q,
        sigma_1,
        sigma_2,
        sigma_12,
        sigma_total,
        eta_variance,
        sandwich,
        covariance,
    })
}

/// Which point estimator the bootstrap refits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Estimator {
    #[default]
    InstrumentalVariable,
    Naive,
}

pub const MIN_BOOT_REPS: usize = 50;
const MAX_BOOT_FAILURE: f64 = 0.2;

/// Nonparametric bootstrap covariance of `β̂`. Replicate `b` draws from its
/// own ChaCha stream, so the result does not depend on the thread count.
pub fn bootstrap_covariance(
    dataset: &SurvivalDataset,
    family: HazardFamily,
    options: &FitOptions,
    n_boot: usize,
    seed: u64,
    estimator: Estimator,
) -> Result<Array2<f64>> {
    if n_boot < MIN_BOOT_REPS {
        return Err(LtmError::Validation(format!("at least {MIN_BOOT_REPS} bootstrap replicates required, got {n_boot}")));
    }
    let n = dataset.n();
    let p = dataset.p();
    let replicates: Vec<Option<Array1<f64>>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let sample = dataset.select(&indices).ok()?;
            let model = match estimator {
                Estimator::InstrumentalVariable => estimate_iv(&sample, family, options),
                Estimator::Naive => estimate_naive(&sample, family, options),
            }
            .ok()?;
            model.converged.then_some(model.beta)
        })
        .collect();

    let ok: Vec<&Array1<f64>> = replicates.iter().flatten().collect();
    let failed = n_boot - ok.len();
    if failed as f64 > MAX_BOOT_FAILURE * n_boot as f64 || ok.len() < 2 {
        return Err(LtmError::BootstrapInstability { failed, total: n_boot });
    }
    let m = ok.len() as f64;
    let mut mean = Array1::<f64>::zeros(p);
    for b in &ok {
        mean += *b;
    }
    mean /= m;
    let mut cov = Array2::<f64>::zeros((p, p));
    for b in &ok {
        let d = *b - &mean;
        for r in 0..p {
            for c in 0..p {
                cov[[r, c]] += d[r] * d[c];
            }
        }
    }
    Ok(symmetrize(&(cov / (m - 1.0))))
}

/// Standard normal quantile `z_{(1+level)/2}`.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(LtmError::Domain(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let std = Normal::standard();
    Ok(std.inverse_cdf(0.5 * (1.0 + level)))
}

pub fn confidence_intervals(
    beta_hat: ArrayView1<'_, f64>,
    covariance: ArrayView2<'_, f64>,
    level: f64,
) -> Result<Vec<(f64, f64)>> {
    let z = normal_quantile(level)?;
    if covariance.dim() != (beta_hat.len(), beta_hat.len()) {
        return Err(LtmError::Shape("covariance does not match the coefficient vector".into()));
    }
    Ok(beta_hat
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            let half = z * covariance[[j, j]].max(0.0).sqrt();
            (b - half, b + half)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn wald_intervals() {
        let ci = confidence_intervals(array![0.0].view(), array![[1.0]].view(), 0.95).unwrap();
        assert!((ci[0].0 + 1.959964).abs() < 1e-5 && (ci[0].1 - 1.959964).abs() < 1e-5);
        let ci = confidence_intervals(array![2.0].view(), array![[0.25]].view(), 0.90).unwrap();
        assert!((ci[0].0 - 1.177573).abs() < 1e-5 && (ci[0].1 - 2.822427).abs() < 1e-5);
        let ci = confidence_intervals(array![1.5].view(), array![[0.0]].view(), 0.95).unwrap();
        assert_eq!(ci[0], (1.5, 1.5));
        assert!(confidence_intervals(array![0.0].view(), array![[1.0]].view(), 1.0).is_err());
        assert!(confidence_intervals(array![0.0].view(), array![[1.0]].view(), 0.0).is_err());
    }

    fn fitted(case: crate::sim::CaseId, beta: Vec<f64>, r: f64, n: usize, rep: u64) -> FittedModel {
        let family = HazardFamily::new(r).unwrap();
        let mut spec = crate::sim::CaseSpec::new(case, n, beta, family, 1, 11).unwrap();
        spec.censoring_constant = Some(crate::sim::calibrate_censoring(&spec).unwrap());
        let g = crate::sim::generate_case(&spec, rep).unwrap();
        let m = crate::score::estimate_iv(&g.dataset, family, &crate::score::FitOptions::default()).unwrap();
        assert!(m.converged);
        m
    }

    fn profiled_score(model: &FittedModel, eta: &[f64]) -> Array1<f64> {
        let events = model.events();
        let t = crate::transform::solve_profile(events, eta, model.family, crate::transform::RootMethod::SafeguardedNewton)
            .unwrap();
        crate::score::score_from_values(events, eta, &t.values, model.design.view(), model.dataset.status(), model.family)
    }

    // Central differences of the profiled score in the linear predictor along
    // a direction `dir` (one column per perturbed coordinate).
    fn score_derivative(model: &FittedModel, dir: ArrayView2<'_, f64>) -> Array2<f64> {
        let eta0 = model.design.dot(&model.beta);
        let p = model.beta.len();
        let mut out = Array2::zeros((p, dir.ncols()));
        for c in 0..dir.ncols() {
            let h = 1e-5;
            let up: Vec<f64> = (0..eta0.len()).map(|i| eta0[i] + h * dir[[i, c]]).collect();
            let dn: Vec<f64> = (0..eta0.len()).map(|i| eta0[i] - h * dir[[i, c]]).collect();
            let d = (profiled_score(model, &up) - profiled_score(model, &dn)) / (2.0 * h);
            out.column_mut(c).assign(&d);
        }
        out
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, rel: f64) {
        let scale = b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= rel * scale, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn information_matches_profiled_score_derivative() {
        for (case, beta, r) in [
            (crate::sim::CaseId::I, vec![1.0], 0.0),
            (crate::sim::CaseId::I, vec![1.0], 1.0),
            (crate::sim::CaseId::Iii, vec![0.5, 0.2], 0.0),
            (crate::sim::CaseId::Iii, vec![0.5, 0.2], 2.0),
        ] {
            let model = fitted(case, beta, r, 80, 0);
            let comps = sandwich_covariance(&model).unwrap();
            let n = model.n() as f64;
            let fd = score_derivative(&model, model.design.view()) * (-1.0 / n);
            assert_close(&comps.sigma_beta, &fd, 1e-5);
            let gq_fd = score_derivative(&model, model.dataset.w()) * (-1.0 / n);
            assert_close(comps.sigma_q.as_ref().unwrap(), &gq_fd, 1e-5);
        }
    }

    #[test]
    fn proportional_hazards_weights_reduce_to_cox_means() {
        let model = fitted(crate::sim::CaseId::I, vec![1.0], 0.0, 60, 2);
        let comps = sandwich_covariance(&model).unwrap();
        let eta = model.design.dot(&model.beta);
        let events = model.events();
        for k in 0..events.k() {
            let set = events.risk_set(k);
            let den: f64 = set.iter().map(|&i| eta[i].exp()).sum();
            let num: f64 = set.iter().map(|&i| eta[i].exp() * model.design[[i, 0]]).sum();
            assert!((comps.mu[[k, 0]] - num / den).abs() < 1e-9 * (1.0 + (num / den).abs()));
        }
        let b = estimate_b(&model).unwrap();
        for k in 0..events.k() {
            for s in 0..=k {
                let expected = (model.transform.values[k] - model.transform.values[s]).exp();
                assert!((b[[k, s]] - expected).abs() < 1e-9 * expected);
            }
        }
    }
}

