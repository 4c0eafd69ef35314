//! CSV input, JSON reports and the plain-text comparison table.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::SurvivalDataset;
use crate::error::{LtmError, Result};
use crate::family::HazardFamily;
use crate::score::{FitResult, FittedModel};

/// Which CSV columns hold the time, status, surrogate and instrument fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub time: String,
    pub status: String,
    pub z: Vec<String>,
    pub w: Vec<String>,
}

impl ColumnMapping {
    pub fn validate(&self) -> Result<()> {
        if self.z.is_empty() {
            return Err(LtmError::Validation("at least one surrogate column is required".into()));
        }
        if self.w.len() < self.z.len() {
            return Err(LtmError::Validation(format!(
                "q ≥ p required: {} instrument columns for {} surrogate columns",
                self.w.len(),
                self.z.len()
            )));
        }
        let mut all: Vec<&str> = vec![&self.time, &self.status];
        all.extend(self.z.iter().map(String::as_str));
        all.extend(self.w.iter().map(String::as_str));
        let mut sorted = all.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(LtmError::Validation(format!("column '{}' is mapped more than once", w[0])));
        }
        Ok(())
    }
}

fn parse_number(field: &str, row: usize, column: &str) -> Result<f64> {
    let s = field.trim();
    if s.is_empty() {
        return Err(LtmError::Parse {
            row,
            message: format!("missing value in column '{column}'"),
        });
    }
    let v: f64 = s.parse().map_err(|_| LtmError::Parse {
        row,
        message: format!("cannot parse '{s}' in column '{column}' as a number"),
    })?;
    if !v.is_finite() {
        return Err(LtmError::Parse {
            row,
            message: format!("non-finite value '{s}' in column '{column}'"),
        });
    }
    Ok(v)
}

/// Reads a headered CSV. Rows are numbered from 1 starting at the first data
/// row. Numbers use `.` as the decimal separator regardless of locale.
pub fn read_dataset(path: &Path, mapping: &ColumnMapping) -> Result<SurvivalDataset> {
    let file = File::open(path)?;
    read_dataset_from(BufReader::new(file), mapping)
}

pub fn read_dataset_from<R: std::io::Read>(reader: R, mapping: &ColumnMapping) -> Result<SurvivalDataset> {
    mapping.validate()?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| LtmError::Format(format!("cannot read CSV header: {e}")))?
        .clone();
    let locate = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LtmError::Validation(format!("column '{name}' not found in header")))
    };
    let t_col = locate(&mapping.time)?;
    let d_col = locate(&mapping.status)?;
    let z_cols = mapping.z.iter().map(|c| locate(c)).collect::<Result<Vec<_>>>()?;
    let w_cols = mapping.w.iter().map(|c| locate(c)).collect::<Result<Vec<_>>>()?;

    let (p, q) = (z_cols.len(), w_cols.len());
    let mut times = Vec::new();
    let mut status = Vec::new();
    let mut z = Vec::new();
    let mut w = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| LtmError::Parse {
            row,
            message: e.to_string(),
        })?;
        let field = |col: usize| record.get(col).unwrap_or("");
        let t = parse_number(field(t_col), row, &mapping.time)?;
        if t <= 0.0 {
            return Err(LtmError::Parse {
                row,
                message: format!("time must be positive, got {t}"),
            });
        }
        let d = parse_number(field(d_col), row, &mapping.status)?;
        let event = if d == 1.0 {
            true
        } else if d == 0.0 {
            false
        } else {
            return Err(LtmError::Parse {
                row,
                message: format!("status must be 0 or 1, got {}", field(d_col)),
            });
        };
        times.push(t);
        status.push(event);
        for (c, name) in z_cols.iter().zip(&mapping.z) {
            z.push(parse_number(field(*c), row, name)?);
        }
        for (c, name) in w_cols.iter().zip(&mapping.w) {
            w.push(parse_number(field(*c), row, name)?);
        }
    }
    let n = times.len();
    if n == 0 {
        return Err(LtmError::InvalidDataset("no data rows".into()));
    }
    let z = Array2::from_shape_vec((n, p), z).map_err(|e| LtmError::Shape(e.to_string()))?;
    let w = Array2::from_shape_vec((n, q), w).map_err(|e| LtmError::Shape(e.to_string()))?;
    SurvivalDataset::new(times, status, z, w)
}

/// One estimator's results as written to a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSection {
    pub converged: bool,
    pub iterations: usize,
    pub final_score_norm: f64,
    pub beta_hat: Vec<f64>,
    pub std_errors: Option<Vec<f64>>,
    pub conf_intervals: Option<Vec<(f64, f64)>>,
    pub covariance: Option<Array2<f64>>,
    /// `(t_k, l̂(t_k))` pairs.
    pub transform: Vec<(f64, f64)>,
    pub q_hat: Option<Array2<f64>>,
    pub sigma_eta_sq: Option<Array1<f64>>,
    pub components: Option<crate::variance::VarianceComponents>,
    pub error: Option<String>,
}

impl FitSection {
    pub fn from_result(result: &FitResult, include_components: bool) -> Self {
        Self {
            converged: result.converged,
            iterations: result.iterations,
            final_score_norm: result.final_score_norm,
            beta_hat: result.beta_hat.to_vec(),
            std_errors: Some(result.std_errors.to_vec()),
            conf_intervals: Some(result.conf_intervals.clone()),
            covariance: Some(result.covariance.clone()),
            transform: result.transform.pairs(),
            q_hat: result.iv.as_ref().map(|f| f.q_hat.clone()),
            sigma_eta_sq: result.iv.as_ref().map(|f| f.sigma_eta_sq.clone()),
            components: if include_components { result.components.clone() } else { None },
            error: None,
        }
    }

    /// A fit that stopped without converging, or whose variance failed.
    pub fn from_failure(model: &FittedModel, error: &LtmError) -> Self {
        Self {
            converged: model.converged,
            iterations: model.iterations,
            final_score_norm: model.score_norm,
            beta_hat: model.beta.to_vec(),
            std_errors: None,
            conf_intervals: None,
            covariance: None,
            transform: model.transform.pairs(),
            q_hat: model.iv.as_ref().map(|f| f.q_hat.clone()),
            sigma_eta_sq: model.iv.as_ref().map(|f| f.sigma_eta_sq.clone()),
            components: None,
            error: Some(error.to_string()),
        }
    }
}

/// Echo of the invocation so a report can be reproduced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub data: String,
    pub columns: ColumnMapping,
    pub family: HazardFamily,
    pub variance: String,
    pub bootstrap_reps: Option<usize>,
    pub seed: Option<u64>,
    pub options: crate::score::FitOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub version: String,
    pub config: FitConfig,
    pub n: usize,
    pub n_events: usize,
    pub naive: FitSection,
    pub proposed: FitSection,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| LtmError::Format(e.to_string()))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path)?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| LtmError::Format(e.to_string()))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Side-by-side naive and instrumental-variable estimates, one row per
/// covariate.
pub fn render_comparison(labels: &[String], naive: &FitSection, proposed: &FitSection, level: f64) -> String {
    let width = labels.iter().map(String::len).max().unwrap_or(0).max(8);
    let pct = format!("{:.0}% CI", level * 100.0);
    let mut s = String::new();
    s.push_str(&format!(
        "{:<width$}  {:>9} {:>9} {:>21}  {:>9} {:>9} {:>21}\n",
        "",
        "Naive",
        "SE",
        pct,
        "Proposed",
        "SE",
        pct
    ));
    let ci = |sec: &FitSection, j: usize| {
        sec.conf_intervals
            .as_ref()
            .map_or_else(|| "-".to_string(), |c| format!("({:.4}, {:.4})", c[j].0, c[j].1))
    };
    for (j, label) in labels.iter().enumerate() {
        s.push_str(&format!(
            "{:<width$}  {:>9} {:>9} {:>21}  {:>9} {:>9} {:>21}\n",
            label,
            cell(naive.beta_hat.get(j).copied()),
            cell(naive.std_errors.as_ref().map(|v| v[j])),
            ci(naive, j),
            cell(proposed.beta_hat.get(j).copied()),
            cell(proposed.std_errors.as_ref().map(|v| v[j])),
            ci(proposed, j),
        ));
    }
    for (name, sec) in [("naive", naive), ("proposed", proposed)] {
        if let Some(e) = &sec.error {
            s.push_str(&format!("{name}: {e}\n"));
        }
    }
    s
}
