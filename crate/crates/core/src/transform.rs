//! Profile estimate of the unspecified monotone transform.
//!
//! For fixed `β` the transform is a step function jumping at the distinct
//! event times `t_1 < … < t_K`. Its values solve, left to right,
//!
//! ```text
//! Σᵢ Yᵢ(t_1) Λ(ηᵢ + l_1)                       = d_1
//! Σᵢ Yᵢ(t_k) [Λ(ηᵢ + l_k) − Λ(ηᵢ + l_{k−1})]   = d_k,   k ≥ 2
//! ```
//!
//! with `ηᵢ = xᵢβ` and `d_k` the number of events tied at `t_k`. Each left-hand
//! side is strictly increasing in `l_k`, so every step has a unique root.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Outcomes;
use crate::error::{LtmError, Result};
use crate::family::HazardFamily;

const MAX_DOUBLINGS: usize = 60;
const MAX_ROOT_ITERS: usize = 400;
/// Absolute tolerance on each step's equation, per tied event.
pub const ROOT_TOL: f64 = 1e-12;

/// Risk-set bookkeeping shared by the transform, score and variance code.
#[derive(Debug, Clone)]
pub struct EventStructure {
    event_times: Vec<f64>,
    event_counts: Vec<usize>,
    /// Number of event times `≤ T̃ᵢ`; record `i` is at risk at `t_k` iff `k < last_event[i]`.
    last_event: Vec<usize>,
    /// Event-time index of record `i` when it is an observed event.
    event_index: Vec<Option<usize>>,
    /// Records ordered by decreasing `last_event`; the risk set at `t_k` is a prefix.
    order: Vec<usize>,
    at_risk: Vec<usize>,
}

impl EventStructure {
    pub fn new(outcomes: &Outcomes) -> Self {
        let times = outcomes.times();
        let status = outcomes.status();
        let mut event_times: Vec<f64> = times
            .iter()
            .zip(status)
            .filter(|(_, &d)| d)
            .map(|(&t, _)| t)
            .collect();
        event_times.sort_by(f64::total_cmp);
        event_times.dedup();

        let mut event_counts = vec![0usize; event_times.len()];
        let mut event_index = vec![None; times.len()];
        let last_event: Vec<usize> = times
            .iter()
            .map(|&t| event_times.partition_point(|&e| e <= t))
            .collect();
        for (i, (&t, &d)) in times.iter().zip(status).enumerate() {
            if d {
                let k = last_event[i] - 1;
                debug_assert_eq!(event_times[k], t);
                event_counts[k] += 1;
                event_index[i] = Some(k);
            }
        }

        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| last_event[b].cmp(&last_event[a]).then(a.cmp(&b)));
        let at_risk = (0..event_times.len())
            .map(|k| order.partition_point(|&i| last_event[i] > k))
            .collect();

        Self {
            event_times,
            event_counts,
            last_event,
            event_index,
            order,
            at_risk,
        }
    }

    pub fn n(&self) -> usize {
        self.last_event.len()
    }

    pub fn k(&self) -> usize {
        self.event_times.len()
    }

    pub fn event_times(&self) -> &[f64] {
        &self.event_times
    }

    pub fn event_counts(&self) -> &[usize] {
        &self.event_counts
    }

    pub fn last_event(&self, i: usize) -> usize {
        self.last_event[i]
    }

    pub fn event_index(&self, i: usize) -> Option<usize> {
        self.event_index[i]
    }

    /// `Yᵢ(t_k)`
    pub fn at_risk(&self, i: usize, k: usize) -> bool {
        k < self.last_event[i]
    }

    pub fn risk_set(&self, k: usize) -> &[usize] {
        &self.order[..self.at_risk[k]]
    }

    pub fn risk_set_size(&self, k: usize) -> usize {
        self.at_risk[k]
    }
}

/// Strictly increasing step function `l̂` on the distinct event times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTransform {
    pub event_times: Vec<f64>,
    pub values: Vec<f64>,
    pub event_counts: Vec<usize>,
}

impl StepTransform {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `l̂(t)`, or `None` before the first event time (where `Λ(x + l̂)` is 0).
    pub fn value_at(&self, t: f64) -> Option<f64> {
        let idx = self.event_times.partition_point(|&e| e <= t);
        idx.checked_sub(1).map(|k| self.values[k])
    }

    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.event_times.iter().copied().zip(self.values.iter().copied()).collect()
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.values.windows(2).all(|w| w[0] < w[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RootMethod {
    /// Newton steps kept inside the current bracket, bisecting otherwise.
    #[default]
    SafeguardedNewton,
    Bisection,
}

pub fn solve_transform(
    beta: ArrayView1<'_, f64>,
    design: ArrayView2<'_, f64>,
    outcomes: &Outcomes,
    family: HazardFamily,
) -> Result<StepTransform> {
    let eta = linear_predictor(beta, design, outcomes.len())?;
    let events = EventStructure::new(outcomes);
    solve_profile(&events, &eta, family, RootMethod::SafeguardedNewton)
}

pub fn solve_transform_with(
    beta: ArrayView1<'_, f64>,
    design: ArrayView2<'_, f64>,
    outcomes: &Outcomes,
    family: HazardFamily,
    method: RootMethod,
) -> Result<StepTransform> {
    let eta = linear_predictor(beta, design, outcomes.len())?;
    let events = EventStructure::new(outcomes);
    solve_profile(&events, &eta, family, method)
}

pub(crate) fn linear_predictor(
    beta: ArrayView1<'_, f64>,
    design: ArrayView2<'_, f64>,
    n: usize,
) -> Result<Vec<f64>> {
    if design.nrows() != n || design.ncols() != beta.len() {
        return Err(LtmError::Shape(format!(
            "design is {}x{}, expected {n}x{}",
            design.nrows(),
            design.ncols(),
            beta.len()
        )));
    }
    Ok(design.dot(&beta).to_vec())
}

pub(crate) fn solve_profile(
    events: &EventStructure,
    eta: &[f64],
    family: HazardFamily,
    method: RootMethod,
) -> Result<StepTransform> {
    let k_total = events.k();
    let mut values = Vec::with_capacity(k_total);
    let mut prev: Option<f64> = None;
    for k in 0..k_total {
        let risk = events.risk_set(k);
        let time = events.event_times[k];
        if risk.is_empty() {
            return Err(LtmError::DegenerateRiskSet { time });
        }
        let step = StepEquation {
            family,
            eta,
            risk,
            prev,
            target: events.event_counts[k] as f64,
        };
        let root = step.solve(method).ok_or(LtmError::BracketFailure { time })?;
        values.push(root);
        prev = Some(root);
    }
    Ok(StepTransform {
        event_times: events.event_times.clone(),
        values,
        event_counts: events.event_counts.clone(),
    })
}

struct StepEquation<'a> {
    family: HazardFamily,
    eta: &'a [f64],
    risk: &'a [usize],
    prev: Option<f64>,
    target: f64,
}

impl StepEquation<'_> {
    fn value(&self, l: f64) -> f64 {
        let f = self.family;
        let total: f64 = match self.prev {
            Some(p) => self
                .risk
                .iter()
                .map(|&i| f.cumhaz_increment(self.eta[i] + p, self.eta[i] + l))
                .sum(),
            None => self.risk.iter().map(|&i| f.cumhaz(self.eta[i] + l)).sum(),
        };
        total - self.target
    }

    fn value_and_slope(&self, l: f64) -> (f64, f64) {
        let slope = self.risk.iter().map(|&i| self.family.lambda(self.eta[i] + l)).sum();
        (self.value(l), slope)
    }

    /// A point where the equation is non-positive.
    fn lower_start(&self) -> f64 {
        match self.prev {
            Some(p) => p,
            None => {
                // Λ(s) ≤ eˢ for every r ≥ 0, so this is a lower bound (exact for r = 0).
                let m = self.risk.iter().map(|&i| self.eta[i]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + self.risk.iter().map(|&i| (self.eta[i] - m).exp()).sum::<f64>().ln();
                self.target.ln() - lse
            }
        }
    }

    fn solve(&self, method: RootMethod) -> Option<f64> {
        let tol = ROOT_TOL * self.target.max(1.0);
        let mut lo = self.lower_start();
        let mut f_lo = self.value(lo);
        if f_lo.abs() <= tol && self.prev.is_none() {
            return Some(lo);
        }
        let mut width = 1.0;
        let mut doublings = 0;
        while f_lo > 0.0 {
            lo -= width;
            width *= 2.0;
            f_lo = self.value(lo);
            doublings += 1;
            if doublings > MAX_DOUBLINGS {
                return None;
            }
        }
        let mut hi = lo + width;
        let mut f_hi = self.value(hi);
        while !(f_hi >= 0.0) {
            if f_hi.is_finite() {
                lo = hi;
                f_lo = f_hi;
            }
            width *= 2.0;
            hi = lo + width;
            f_hi = self.value(hi);
            doublings += 1;
            if doublings > MAX_DOUBLINGS {
                return None;
            }
        }
        if f_hi <= tol {
            return Some(hi);
        }

        let mut x = match method {
            RootMethod::Bisection => 0.5 * (lo + hi),
            RootMethod::SafeguardedNewton => {
                let (_, slope) = self.value_and_slope(lo);
                let guess = lo - f_lo / slope;
                if guess > lo && guess < hi {
                    guess
                } else {
                    0.5 * (lo + hi)
                }
            }
        };
        for _ in 0..MAX_ROOT_ITERS {
            let (fx, slope) = match method {
                RootMethod::Bisection => (self.value(x), f64::NAN),
                RootMethod::SafeguardedNewton => self.value_and_slope(x),
            };
            if fx.abs() <= tol {
                return Some(x);
            }
            if fx < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            if hi - lo <= 4.0 * f64::EPSILON * x.abs().max(1.0) {
                return Some(x);
            }
            let newton = x - fx / slope;
            x = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        Some(x)
    }
}

/// Compensator increments `Yᵢ(t_k)·[Λ(ηᵢ + l_k) − Λ(ηᵢ + l_{k−1})]`, `n × K`.
pub fn cumhaz_increments(
    transform: &StepTransform,
    beta: ArrayView1<'_, f64>,
    design: ArrayView2<'_, f64>,
    outcomes: &Outcomes,
    family: HazardFamily,
) -> Result<Array2<f64>> {
    let eta = linear_predictor(beta, design, outcomes.len())?;
    let events = EventStructure::new(outcomes);
    check_transform(transform, &events)?;
    Ok(increments(&events, &eta, &transform.values, family))
}

pub(crate) fn check_transform(transform: &StepTransform, events: &EventStructure) -> Result<()> {
    if transform.event_times != events.event_times() || transform.values.len() != events.k() {
        return Err(LtmError::Shape(format!(
            "transform has {} steps but the data have {} distinct event times",
            transform.values.len(),
            events.k()
        )));
    }
    Ok(())
}

pub(crate) fn increments(
    events: &EventStructure,
    eta: &[f64],
    values: &[f64],
    family: HazardFamily,
) -> Array2<f64> {
    let mut out = Array2::zeros((events.n(), events.k()));
    for (k, &l) in values.iter().enumerate() {
        for &i in events.risk_set(k) {
            out[[i, k]] = if k == 0 {
                family.cumhaz(eta[i] + l)
            } else {
                family.cumhaz_increment(eta[i] + values[k - 1], eta[i] + l)
            };
        }
    }
    out
}
