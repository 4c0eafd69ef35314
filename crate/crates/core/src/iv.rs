//! First stage: least-squares regression of the surrogates `Z` on the
//! instruments `W`, giving `Q̂ = (WᵀW)⁻¹WᵀZ` and the imputed design `WQ̂`.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::SurvivalDataset;
use crate::error::{LtmError, Result};
use crate::linalg::{from_na, reciprocal_condition, to_na};

/// Smallest accepted reciprocal condition number of `WᵀW`.
pub const MIN_RCOND: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvRegressionFit {
    /// `q × p`
    pub q_hat: Array2<f64>,
    /// `n × p`, rows `(WQ̂)ᵢ`
    pub imputed_design: Array2<f64>,
    /// Residual variance of each column of `Z − WQ̂`, divisor `n − q`.
    pub sigma_eta_sq: Array1<f64>,
    /// `(WᵀW)⁻¹`
    pub gram_inverse: Array2<f64>,
    pub rcond: f64,
}

pub fn estimate_q(dataset: &SurvivalDataset) -> Result<IvRegressionFit> {
    regress(dataset.w(), dataset.z())
}

pub(crate) fn regress(w: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>) -> Result<IvRegressionFit> {
    let (n, q) = w.dim();
    if z.nrows() != n {
        return Err(LtmError::Shape(format!("W has {n} rows, Z has {}", z.nrows())));
    }
    if n <= q {
        return Err(LtmError::InsufficientData { n, q });
    }
    let gram = w.t().dot(&w);
    let rcond = reciprocal_condition(gram.view());
    if !(rcond >= MIN_RCOND) {
        return Err(LtmError::SingularDesign { rcond });
    }

    let w_na = to_na(w);
    let z_na = to_na(z);
    let qr = w_na.qr();
    let rhs = qr.q().transpose() * &z_na;
    let q_hat_na = qr
        .r()
        .solve_upper_triangular(&rhs)
        .ok_or(LtmError::SingularDesign { rcond })?;
    let gram_inv = DMatrix::from_fn(q, q, |i, j| gram[[i, j]])
        .cholesky()
        .ok_or(LtmError::SingularDesign { rcond })?
        .inverse();

    let q_hat = from_na(&q_hat_na);
    let imputed_design = w.dot(&q_hat);
    let residuals = &z - &imputed_design;
    let dof = (n - q) as f64;
    let sigma_eta_sq = residuals.map(|r| r * r).sum_axis(Axis(0)) / dof;

    Ok(IvRegressionFit {
        q_hat,
        imputed_design,
        sigma_eta_sq,
        gram_inverse: from_na(&gram_inv),
        rcond,
    })
}

impl IvRegressionFit {
    pub fn p(&self) -> usize {
        self.q_hat.ncols()
    }

    pub fn q(&self) -> usize {
        self.q_hat.nrows()
    }

    pub fn impute_design(&self, w_new: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if w_new.ncols() != self.q() {
            return Err(LtmError::Shape(format!(
                "W has {} columns, Q̂ expects {}",
                w_new.ncols(),
                self.q()
            )));
        }
        Ok(w_new.dot(&self.q_hat))
    }
}
