//! Right-censored survival records with surrogate covariates and instruments.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{LtmError, Result};

/// Follow-up times `T̃ = min(T, C)` and event indicators `δ = I(T ≤ C)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcomes {
    times: Vec<f64>,
    status: Vec<bool>,
}

impl Outcomes {
    pub fn new(times: Vec<f64>, status: Vec<bool>) -> Result<Self> {
        if times.len() != status.len() {
            return Err(LtmError::Shape(format!(
                "{} times but {} status indicators",
                times.len(),
                status.len()
            )));
        }
        if let Some(i) = times.iter().position(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(LtmError::InvalidDataset(format!(
                "time at record {i} is {}, must be positive and finite",
                times[i]
            )));
        }
        if !status.iter().any(|&d| d) {
            return Err(LtmError::InvalidDataset("no observed events".into()));
        }
        Ok(Self { times, status })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn status(&self) -> &[bool] {
        &self.status
    }

    pub fn n_events(&self) -> usize {
        self.status.iter().filter(|&&d| d).count()
    }

    pub fn censoring_rate(&self) -> f64 {
        1.0 - self.n_events() as f64 / self.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalDataset {
    outcomes: Outcomes,
    z: Array2<f64>,
    w: Array2<f64>,
}

impl SurvivalDataset {
    pub fn new(times: Vec<f64>, status: Vec<bool>, z: Array2<f64>, w: Array2<f64>) -> Result<Self> {
        let outcomes = Outcomes::new(times, status)?;
        Self::from_outcomes(outcomes, z, w)
    }

    pub fn from_outcomes(outcomes: Outcomes, z: Array2<f64>, w: Array2<f64>) -> Result<Self> {
        let n = outcomes.len();
        if z.nrows() != n || w.nrows() != n {
            return Err(LtmError::Shape(format!(
                "{n} records but Z has {} rows and W has {} rows",
                z.nrows(),
                w.nrows()
            )));
        }
        let (p, q) = (z.ncols(), w.ncols());
        if p == 0 {
            return Err(LtmError::Validation("at least one covariate column is required".into()));
        }
        if q < p {
            return Err(LtmError::Validation(format!(
                "q >= p required: {q} instrument columns for {p} covariates"
            )));
        }
        if n <= q {
            return Err(LtmError::InsufficientData { n, q });
        }
        for (name, m) in [("Z", &z), ("W", &w)] {
            if let Some(((i, j), v)) = m.indexed_iter().find(|(_, v)| !v.is_finite()) {
                return Err(LtmError::InvalidDataset(format!("{name}[{i}, {j}] = {v} is not finite")));
            }
        }
        Ok(Self { outcomes, z, w })
    }

    pub fn n(&self) -> usize {
        self.outcomes.len()
    }

    pub fn p(&self) -> usize {
        self.z.ncols()
    }

    pub fn q(&self) -> usize {
        self.w.ncols()
    }

    pub fn outcomes(&self) -> &Outcomes {
        &self.outcomes
    }

    pub fn times(&self) -> &[f64] {
        self.outcomes.times()
    }

    pub fn status(&self) -> &[bool] {
        self.outcomes.status()
    }

    pub fn z(&self) -> ArrayView2<'_, f64> {
        self.z.view()
    }

    pub fn w(&self) -> ArrayView2<'_, f64> {
        self.w.view()
    }

    /// Rows taken in the given order; indices may repeat.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let times = indices.iter().map(|&i| self.outcomes.times[i]).collect();
        let status = indices.iter().map(|&i| self.outcomes.status[i]).collect();
        let z = self.z.select(Axis(0), indices);
        let w = self.w.select(Axis(0), indices);
        Self::new(times, status, z, w)
    }

    /// Ordering by (time, events first, Z row, W row). Records that tie on all
    /// keys are identical, so the result does not depend on input order.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n()).collect();
        order.sort_by(|&a, &b| self.compare_records(a, b).then(a.cmp(&b)));
        order
    }

    pub fn canonicalized(&self) -> Self {
        let order = self.canonical_order();
        let times = order.iter().map(|&i| self.outcomes.times[i]).collect();
        let status = order.iter().map(|&i| self.outcomes.status[i]).collect();
        Self {
            outcomes: Outcomes { times, status },
            z: self.z.select(Axis(0), &order),
            w: self.w.select(Axis(0), &order),
        }
    }

    fn compare_records(&self, a: usize, b: usize) -> Ordering {
        let t = self.outcomes.times[a].total_cmp(&self.outcomes.times[b]);
        let d = self.outcomes.status[b].cmp(&self.outcomes.status[a]);
        let rows = |m: &Array2<f64>| {
            m.row(a)
                .iter()
                .zip(m.row(b).iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        };
        t.then(d).then_with(|| rows(&self.z)).then_with(|| rows(&self.w))
    }
}
