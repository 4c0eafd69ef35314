//! Monte Carlo harness for the three simulation designs.
//!
//! Data follow `X = WQ + ε`, `Z = X + v`, `log T = −Xβ + e`, with exponential
//! instruments, normal errors, `e` drawn from the hazard family, and uniform
//! censoring `C ~ U(0, c)` where `c` is calibrated to a target censoring rate.
//!
//! Every replicate draws from its own ChaCha stream keyed by `(seed,
//! replicate_index)`, and results are reduced in replicate order, so a study is
//! bit-reproducible for any number of worker threads.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::Open01;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SurvivalDataset;
use crate::error::{LtmError, Result};
use crate::family::HazardFamily;
use crate::score::{estimate_iv, FitOptions};
use crate::variance::{confidence_intervals, sandwich_covariance};

pub const CALIBRATION_DRAWS: usize = 100_000;
pub const MAX_CENSORING_CONSTANT: f64 = 1e12;
const CALIBRATION_STREAM: u64 = u64::MAX;
const CALIBRATION_TOL: f64 = 0.01;
pub const MIN_CONVERGENCE_RATE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseId {
    I,
    Ii,
    Iii,
}

impl FromStr for CaseId {
    type Err = LtmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "i" | "1" => Ok(CaseId::I),
            "ii" | "2" => Ok(CaseId::Ii),
            "iii" | "3" => Ok(CaseId::Iii),
            other => Err(LtmError::Validation(format!("unknown case '{other}', expected i, ii or iii"))),
        }
    }
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CaseId::I => "i",
            CaseId::Ii => "ii",
            CaseId::Iii => "iii",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub case_id: CaseId,
    pub n: usize,
    pub beta: Vec<f64>,
    /// `q × p`, row-major rows.
    pub q: Vec<Vec<f64>>,
    pub family_r: f64,
    /// Means of the exponential instruments.
    pub instrument_means: Vec<f64>,
    pub error_sd_v: f64,
    pub error_sd_eps: f64,
    pub target_censoring: f64,
    pub reps: usize,
    pub seed: u64,
    /// Upper limit `c` of the censoring law, once calibrated.
    pub censoring_constant: Option<f64>,
}

impl CaseSpec {
    /// Defaults for one of the three designs; `β` must have `p` entries.
    pub fn new(case_id: CaseId, n: usize, beta: Vec<f64>, family: HazardFamily, reps: usize, seed: u64) -> Result<Self> {
        let (q, means) = match case_id {
            CaseId::I => (vec![vec![3.0]], vec![4.0]),
            CaseId::Ii => (vec![vec![2.0], vec![3.0]], vec![2.0, 4.0]),
            CaseId::Iii => (vec![vec![2.0, 0.0], vec![0.0, 5.0]], vec![2.0, 4.0]),
        };
        let spec = Self {
            case_id,
            n,
            beta,
            q,
            family_r: family.r(),
            instrument_means: means,
            error_sd_v: 1.0,
            error_sd_eps: 1.0,
            target_censoring: 0.20,
            reps,
            seed,
            censoring_constant: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn default_beta(case_id: CaseId) -> Vec<f64> {
        match case_id {
            CaseId::I | CaseId::Ii => vec![1.0],
            CaseId::Iii => vec![2.0, 4.0],
        }
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn q_dim(&self) -> usize {
        self.q.len()
    }

    pub fn family(&self) -> Result<HazardFamily> {
        HazardFamily::new(self.family_r)
    }

    pub fn q_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.q_dim(), self.p()), |(a, b)| self.q[a][b])
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        let q = self.q_dim();
        if p == 0 || q < p {
            return Err(LtmError::Validation(format!("need q >= p >= 1, got p = {p}, q = {q}")));
        }
        if self.q.iter().any(|row| row.len() != p) {
            return Err(LtmError::Shape(format!("Q must be {q}x{p}")));
        }
        if self.instrument_means.len() != q || self.instrument_means.iter().any(|m| !(*m > 0.0)) {
            return Err(LtmError::Validation("need one positive instrument mean per instrument".into()));
        }
        let expected = match self.case_id {
            CaseId::I => (1, 1),
            CaseId::Ii => (1, 2),
            CaseId::Iii => (2, 2),
        };
        if (p, q) != expected {
            return Err(LtmError::Validation(format!(
                "case {} has p = {}, q = {}, got p = {p}, q = {q}",
                self.case_id, expected.0, expected.1
            )));
        }
        if self.n <= q {
            return Err(LtmError::InsufficientData { n: self.n, q });
        }
        if self.reps == 0 {
            return Err(LtmError::Validation("reps must be positive".into()));
        }
        for (name, sd) in [("error_sd_v", self.error_sd_v), ("error_sd_eps", self.error_sd_eps)] {
            if !(sd >= 0.0 && sd.is_finite()) {
                return Err(LtmError::Validation(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.target_censoring >= 0.0 && self.target_censoring < 1.0) {
            return Err(LtmError::Domain("target censoring must lie in [0, 1)".into()));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(LtmError::Validation("beta must be finite".into()));
        }
        self.family()?;
        Ok(())
    }
}

/// A generated replicate together with the quantities hidden from the fit.
#[derive(Debug, Clone)]
pub struct GeneratedCase {
    pub dataset: SurvivalDataset,
    pub x: Array2<f64>,
    pub event_times: Vec<f64>,
    pub censoring_times: Vec<f64>,
}

struct Draw {
    w: Vec<f64>,
    x: Vec<f64>,
    z: Vec<f64>,
    log_t: f64,
    /// `C / c`, uniform on (0, 1).
    censor_unit: f64,
}

struct Sampler {
    exps: Vec<Exp<f64>>,
    eps: Normal<f64>,
    v: Normal<f64>,
    q: Array2<f64>,
    beta: Vec<f64>,
    family: HazardFamily,
}

impl Sampler {
    fn new(spec: &CaseSpec) -> Result<Self> {
        let exps = spec
            .instrument_means
            .iter()
            .map(|m| Exp::new(1.0 / m).map_err(|e| LtmError::Validation(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let normal = |sd: f64| Normal::new(0.0, sd).map_err(|e| LtmError::Validation(e.to_string()));
        Ok(Self {
            exps,
            eps: normal(spec.error_sd_eps)?,
            v: normal(spec.error_sd_v)?,
            q: spec.q_matrix(),
            beta: spec.beta.clone(),
            family: spec.family()?,
        })
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> Draw {
        let (q, p) = self.q.dim();
        let w: Vec<f64> = self.exps.iter().map(|d| d.sample(rng)).collect();
        let mut x = vec![0.0; p];
        for (b, xb) in x.iter_mut().enumerate() {
            for a in 0..q {
                *xb += w[a] * self.q[[a, b]];
            }
            *xb += self.eps.sample(rng);
        }
        let z: Vec<f64> = x.iter().map(|xb| xb + self.v.sample(rng)).collect();
        let u: f64 = Open01.sample(rng);
        let e = self.family.inverse_survival(u);
        let lin: f64 = x.iter().zip(&self.beta).map(|(a, b)| a * b).sum();
        let censor_unit: f64 = Open01.sample(rng);
        Draw {
            w,
            x,
            z,
            log_t: e - lin,
            censor_unit,
        }
    }
}

fn replicate_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn generate_case(spec: &CaseSpec, replicate_index: u64) -> Result<GeneratedCase> {
    spec.validate()?;
    let c = spec
        .censoring_constant
        .ok_or_else(|| LtmError::Precondition("censoring constant has not been calibrated".into()))?;
    if !(c > 0.0 && c.is_finite()) {
        return Err(LtmError::Precondition(format!("invalid censoring constant {c}")));
    }
    let sampler = Sampler::new(spec)?;
    let mut rng = replicate_rng(spec.seed, replicate_index);
    let (n, p, q) = (spec.n, spec.p(), spec.q_dim());
    let mut w = Array2::zeros((n, q));
    let mut x = Array2::zeros((n, p));
    let mut z = Array2::zeros((n, p));
    let mut times = Vec::with_capacity(n);
    let mut status = Vec::with_capacity(n);
    let mut event_times = Vec::with_capacity(n);
    let mut censoring_times = Vec::with_capacity(n);
    for i in 0..n {
        let d = sampler.draw(&mut rng);
        for a in 0..q {
            w[[i, a]] = d.w[a];
        }
        for b in 0..p {
            x[[i, b]] = d.x[b];
            z[[i, b]] = d.z[b];
        }
        // exp underflows below about -745; clamp to the smallest normal double
        let t = d.log_t.exp().max(f64::MIN_POSITIVE);
        let cens = c * d.censor_unit;
        times.push(t.min(cens));
        status.push(t <= cens);
        event_times.push(t);
        censoring_times.push(cens);
    }
    let dataset = SurvivalDataset::new(times, status, z, w)?;
    Ok(GeneratedCase {
        dataset,
        x,
        event_times,
        censoring_times,
    })
}

/// Finds `c` so that `C ~ U(0, c)` censors the target fraction of a large
/// synthetic sample. Bisection runs on `log c` below the cap.
pub fn calibrate_censoring(spec: &CaseSpec) -> Result<f64> {
    spec.validate()?;
    let target = spec.target_censoring;
    if !(target > 0.0 && target <= 0.9) {
        return Err(LtmError::Calibration(format!(
            "target censoring {target} outside (0, 0.9]; a zero target needs c → ∞ beyond the cap {MAX_CENSORING_CONSTANT:e}"
        )));
    }
    let sampler = Sampler::new(spec)?;
    let mut rng = replicate_rng(spec.seed, CALIBRATION_STREAM);
    let draws: Vec<(f64, f64)> = (0..CALIBRATION_DRAWS)
        .map(|_| {
            let d = sampler.draw(&mut rng);
            (d.log_t, d.censor_unit.ln())
        })
        .collect();
    // censored iff T > C, i.e. log T > log c + log U
    let rate = |log_c: f64| draws.iter().filter(|(lt, lu)| *lt > log_c + lu).count() as f64 / draws.len() as f64;

    let mut hi = MAX_CENSORING_CONSTANT.ln();
    let rate_hi = rate(hi);
    if rate_hi > target + CALIBRATION_TOL {
        return Err(LtmError::Calibration(format!(
            "censoring rate is still {rate_hi:.4} at the cap c = {MAX_CENSORING_CONSTANT:e}"
        )));
    }
    if rate_hi > target {
        return Ok(MAX_CENSORING_CONSTANT);
    }
    let mut width = 1.0;
    let mut lo = hi - width;
    while rate(lo) <= target {
        hi = lo;
        width *= 2.0;
        lo = hi - width;
        if width > 1e4 {
            return Err(LtmError::Calibration("could not bracket the censoring constant".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if rate(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (r_lo, r_hi) = (rate(lo), rate(hi));
    let best = if (r_lo - target).abs() < (r_hi - target).abs() { lo } else { hi };
    let achieved = rate(best);
    if (achieved - target).abs() > CALIBRATION_TOL {
        return Err(LtmError::Calibration(format!(
            "closest achievable censoring rate {achieved:.4} misses target {target}"
        )));
    }
    Ok(best.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyMode {
    /// Bias and MSE only.
    PointEstimates,
    /// Also plug-in standard errors, coverage and interval width.
    Coverage,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub fit: FitOptions,
    /// Worker threads; `None` uses the global pool. Does not affect results.
    #[serde(skip)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Echo of the study configuration, with the calibrated censoring constant.
    pub spec: CaseSpec,
    pub fit_options: FitOptions,
    pub mode: StudyMode,
    pub bias: Vec<f64>,
    pub mse: Vec<f64>,
    pub mean_estimate: Vec<f64>,
    pub mc_sd: Vec<f64>,
    pub mean_std_error: Option<Vec<f64>>,
    pub coverage_probability: Option<Vec<f64>>,
    pub average_width: Option<Vec<f64>>,
    pub empirical_censoring_rate: f64,
    pub convergence_rate: f64,
    pub n_used: usize,
    pub failures: BTreeMap<String, usize>,
}

/// Per-replicate record kept for aggregation and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub index: u64,
    pub censoring_rate: Option<f64>,
    pub beta_hat: Option<Vec<f64>>,
    pub std_errors: Option<Vec<f64>>,
    pub intervals: Option<Vec<(f64, f64)>>,
    pub failure: Option<String>,
}

fn failure_kind(e: &LtmError) -> String {
    match e {
        LtmError::NonConvergence { .. } => "non_convergence",
        LtmError::SolverStall { .. } => "solver_stall",
        LtmError::SingularDesign { .. } => "singular_design",
        LtmError::InvalidDataset(_) => "invalid_dataset",
        LtmError::SingularInformation => "singular_information",
        LtmError::InvalidCovariance { .. } => "invalid_covariance",
        LtmError::BracketFailure { .. } | LtmError::DegenerateRiskSet { .. } => "transform_failure",
        _ => "other",
    }
    .to_string()
}

fn run_replicate(spec: &CaseSpec, index: u64, options: &FitOptions, mode: StudyMode, family: HazardFamily) -> ReplicateOutcome {
    let mut outcome = ReplicateOutcome {
        index,
        censoring_rate: None,
        beta_hat: None,
        std_errors: None,
        intervals: None,
        failure: None,
    };
    let generated = match generate_case(spec, index) {
        Ok(g) => g,
        Err(e) => {
            outcome.failure = Some(failure_kind(&e));
            return outcome;
        }
    };
    outcome.censoring_rate = Some(generated.dataset.outcomes().censoring_rate());
    let model = match estimate_iv(&generated.dataset, family, options) {
        Ok(m) if m.converged => m,
        Ok(m) => {
            outcome.failure = Some(failure_kind(&m.into_error()));
            return outcome;
        }
        Err(e) => {
            outcome.failure = Some(failure_kind(&e));
            return outcome;
        }
    };
    if mode == StudyMode::Coverage {
        let ci = sandwich_covariance(&model)
            .and_then(|c| confidence_intervals(model.beta.view(), c.covariance.view(), options.ci_level).map(|ci| (c, ci)));
        match ci {
            Ok((components, ci)) => {
                outcome.std_errors = Some(components.covariance.diag().mapv(f64::sqrt).to_vec());
                outcome.intervals = Some(ci);
            }
            Err(e) => {
                outcome.failure = Some(failure_kind(&e));
                return outcome;
            }
        }
    }
    outcome.beta_hat = Some(model.beta.to_vec());
    outcome
}

/// Runs every replicate and returns the raw per-replicate outcomes, in order.
pub fn run_replicates(spec: &CaseSpec, options: &StudyOptions, mode: StudyMode) -> Result<Vec<ReplicateOutcome>> {
    spec.validate()?;
    options.fit.validate(spec.p())?;
    if spec.censoring_constant.is_none() {
        return Err(LtmError::Precondition("censoring constant has not been calibrated".into()));
    }
    let family = spec.family()?;
    let job = || {
        (0..spec.reps as u64)
            .into_par_iter()
            .map(|idx| run_replicate(spec, idx, &options.fit, mode, family))
            .collect::<Vec<_>>()
    };
    match options.workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| LtmError::Validation(format!("cannot build worker pool: {e}")))?;
            Ok(pool.install(job))
        }
        None => Ok(job()),
    }
}

/// Bias/MSE (and optionally coverage) over the replicates, reduced in
/// replicate order.
pub fn summarize(spec: &CaseSpec, fit_options: &FitOptions, mode: StudyMode, outcomes: &[ReplicateOutcome]) -> MetricsReport {
    let p = spec.p();
    let truth = Array1::from(spec.beta.clone());
    let used: Vec<&ReplicateOutcome> = outcomes.iter().filter(|o| o.failure.is_none()).collect();
    let m = used.len() as f64;
    let mut failures = BTreeMap::new();
    for o in outcomes {
        if let Some(kind) = &o.failure {
            *failures.entry(kind.clone()).or_insert(0) += 1;
        }
    }

    let mut sum = Array1::<f64>::zeros(p);
    let mut sq_err = Array1::<f64>::zeros(p);
    for o in &used {
        let b = Array1::from(o.beta_hat.clone().unwrap());
        let d = &b - &truth;
        sq_err += &d.mapv(|v| v * v);
        sum += &b;
    }
    let mean = &sum / m;
    let bias = &mean - &truth;
    let mse = &sq_err / m;
    let mut var = Array1::<f64>::zeros(p);
    for o in &used {
        let d = Array1::from(o.beta_hat.clone().unwrap()) - &mean;
        var += &d.mapv(|v| v * v);
    }
    let mc_sd = (var / (m - 1.0).max(1.0)).mapv(f64::sqrt);

    let (mean_se, cp, aw) = if mode == StudyMode::Coverage {
        let mut se = vec![0.0; p];
        let mut hit = vec![0.0; p];
        let mut width = vec![0.0; p];
        for o in &used {
            let ci = o.intervals.as_ref().unwrap();
            let s = o.std_errors.as_ref().unwrap();
            for j in 0..p {
                se[j] += s[j];
                width[j] += ci[j].1 - ci[j].0;
                if ci[j].0 <= spec.beta[j] && spec.beta[j] <= ci[j].1 {
                    hit[j] += 1.0;
                }
            }
        }
        let scale = |v: Vec<f64>| v.into_iter().map(|x| x / m).collect::<Vec<_>>();
        (Some(scale(se)), Some(scale(hit)), Some(scale(width)))
    } else {
        (None, None, None)
    };

    let rates: Vec<f64> = outcomes.iter().filter_map(|o| o.censoring_rate).collect();
    let censoring = rates.iter().sum::<f64>() / rates.len().max(1) as f64;

    MetricsReport {
        spec: spec.clone(),
        fit_options: fit_options.clone(),
        mode,
        bias: bias.to_vec(),
        mse: mse.to_vec(),
        mean_estimate: mean.to_vec(),
        mc_sd: mc_sd.to_vec(),
        mean_std_error: mean_se,
        coverage_probability: cp,
        average_width: aw,
        empirical_censoring_rate: censoring,
        convergence_rate: used.len() as f64 / outcomes.len() as f64,
        n_used: used.len(),
        failures,
    }
}

fn study(spec: &CaseSpec, options: &StudyOptions, mode: StudyMode) -> Result<MetricsReport> {
    let mut spec = spec.clone();
    if spec.censoring_constant.is_none() {
        spec.censoring_constant = Some(calibrate_censoring(&spec)?);
    }
    let outcomes = run_replicates(&spec, options, mode)?;
    let report = summarize(&spec, &options.fit, mode, &outcomes);
    if report.convergence_rate < MIN_CONVERGENCE_RATE {
        return Err(LtmError::StudyQuality {
            rate: report.convergence_rate,
            failed: outcomes.len() - report.n_used,
            total: outcomes.len(),
        });
    }
    Ok(report)
}

/// Bias and MSE of `β̂` over `spec.reps` replicates. Calibrates `c` first if
/// the case spec does not carry one.
pub fn run_study(spec: &CaseSpec, options: &StudyOptions) -> Result<MetricsReport> {
    study(spec, options, StudyMode::PointEstimates)
}

/// As [`run_study`], plus coverage probability and average width of the
/// Wald intervals at `options.fit.ci_level`.
pub fn coverage_study(spec: &CaseSpec, options: &StudyOptions) -> Result<MetricsReport> {
    study(spec, options, StudyMode::Coverage)
}
