//! Observational datasets `(X, A, Y)`, CSV ingestion and the linear decision rule.
//!
//! Covariates are stored row-major so that a regime evaluation `x_iᵀβ` walks
//! memory contiguously.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INTERCEPT_NAME: &str = "(intercept)";

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnConfig {
    pub outcome: String,
    pub treatment: String,
    pub covariates: Vec<String>,
    #[serde(default = "default_true")]
    pub intercept: bool,
    #[serde(default)]
    pub standardize: bool,
}

fn default_true() -> bool {
    true
}

impl ColumnConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn validate(&self) -> Result<()> {
        if self.covariates.is_empty() {
            return Err(Error::InvalidConfig(
                "column config needs at least one covariate".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for name in std::iter::once(&self.outcome)
            .chain(std::iter::once(&self.treatment))
            .chain(self.covariates.iter())
        {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "column `{name}` is assigned more than one role"
                )));
            }
        }
        Ok(())
    }
}

/// Affine map applied to standardized covariates: `z = (x - mean) / sd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    /// Covariate column index (in the stored matrix) of each standardized column.
    pub columns: Vec<usize>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardization {
    /// Express a rule fitted on standardized covariates on the original scale.
    ///
    /// `Σ β_j (x_j - m_j)/s_j + β_0` becomes slopes `β_j/s_j` and intercept
    /// `β_0 - Σ β_j m_j/s_j`; the result is renormalized. Requires an intercept
    /// column at index 0 when any mean is nonzero.
    pub fn to_original_scale(&self, beta: &RegimeParameter, has_intercept: bool) -> Result<RegimeParameter> {
        let mut out = beta.as_slice().to_vec();
        let mut shift = 0.0;
        for ((&col, &m), &s) in self.columns.iter().zip(&self.means).zip(&self.sds) {
            out[col] = beta.as_slice()[col] / s;
            shift += out[col] * m;
        }
        if shift != 0.0 {
            if !has_intercept {
                return Err(Error::InvalidConfig(
                    "mapping standardized coefficients back needs an intercept column".into(),
                ));
            }
            out[0] -= shift;
        }
        RegimeParameter::from_unnormalized(out)
    }
}

/// `n` observations of covariates `X` (n × l), binary treatment `A` and outcome `Y`.
///
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    covariates: Vec<f64>,
    n: usize,
    l: usize,
    treatments: Vec<u8>,
    outcomes: Vec<f64>,
    column_names: Vec<String>,
    intercept: bool,
    standardization: Option<Standardization>,
}

impl Dataset {
    /// Build from a row-major covariate buffer of length `n * column_names.len()`.
    pub fn new(
        covariates: Vec<f64>,
        treatments: Vec<u8>,
        outcomes: Vec<f64>,
        column_names: Vec<String>,
        intercept: bool,
    ) -> Result<Self> {
        let n = outcomes.len();
        let l = column_names.len();
        if n == 0 {
            return Err(Error::InvalidData("dataset has no observations".into()));
        }
        if l == 0 {
            return Err(Error::InvalidData("dataset has no covariate columns".into()));
        }
        if treatments.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: treatments.len(),
            });
        }
        if covariates.len() != n * l {
            return Err(Error::Dimension {
                expected: n * l,
                got: covariates.len(),
            });
        }
        for (i, &a) in treatments.iter().enumerate() {
            if a > 1 {
                return Err(Error::NonBinaryTreatment {
                    row: i + 1,
                    column: "treatment".into(),
                    value: a.to_string(),
                });
            }
        }
        for (i, y) in outcomes.iter().enumerate() {
            if !y.is_finite() {
                return Err(Error::NonFinite {
                    row: i + 1,
                    column: "outcome".into(),
                });
            }
        }
        for (k, v) in covariates.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row: k / l + 1,
                    column: column_names[k % l].clone(),
                });
            }
        }
        if intercept {
            if let Some(i) = (0..n).find(|&i| covariates[i * l] != 1.0) {
                return Err(Error::InvalidData(format!(
                    "intercept column is not 1 at row {}",
                    i + 1
                )));
            }
        }
        Ok(Self {
            covariates,
            n,
            l,
            treatments,
            outcomes,
            column_names,
            intercept,
            standardization: None,
        })
    }

    /// Build from covariate rows; prepends the constant-1 column when `intercept` is set.
    pub fn from_rows(
        rows: &[Vec<f64>],
        treatments: Vec<u8>,
        outcomes: Vec<f64>,
        names: &[&str],
        intercept: bool,
    ) -> Result<Self> {
        let width = names.len();
        let mut flat = Vec::with_capacity(rows.len() * (width + intercept as usize));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::InvalidData(format!(
                    "row {} has {} covariates, expected {width}",
                    i + 1,
                    row.len()
                )));
            }
            if intercept {
                flat.push(1.0);
            }
            flat.extend_from_slice(row);
        }
        let mut column_names: Vec<String> = Vec::with_capacity(width + 1);
        if intercept {
            column_names.push(INTERCEPT_NAME.to_string());
        }
        column_names.extend(names.iter().map(|s| s.to_string()));
        Self::new(flat, treatments, outcomes, column_names, intercept)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Covariate dimension `l`, including the intercept column if present.
    pub fn dim(&self) -> usize {
        self.l
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.l..(i + 1) * self.l]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.covariates.chunks_exact(self.l)
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows().map(move |r| r[j])
    }

    pub fn treatments(&self) -> &[u8] {
        &self.treatments
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn has_intercept(&self) -> bool {
        self.intercept
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn arm_counts(&self) -> (usize, usize) {
        let treated = self.treatments.iter().filter(|&&a| a == 1).count();
        (self.n - treated, treated)
    }

    /// Columns other than the intercept.
    pub fn smooth_columns(&self) -> std::ops::Range<usize> {
        (self.intercept as usize)..self.l
    }

    /// New dataset made of the given rows (with repetition).
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut covariates = Vec::with_capacity(indices.len() * self.l);
        let mut treatments = Vec::with_capacity(indices.len());
        let mut outcomes = Vec::with_capacity(indices.len());
        for &i in indices {
            covariates.extend_from_slice(self.row(i));
            treatments.push(self.treatments[i]);
            outcomes.push(self.outcomes[i]);
        }
        Dataset {
            covariates,
            n: indices.len(),
            l: self.l,
            treatments,
            outcomes,
            column_names: self.column_names.clone(),
            intercept: self.intercept,
            standardization: self.standardization.clone(),
        }
    }

    /// Standardize every non-intercept column to sample mean 0 and sample sd 1 (divisor n-1).
    pub fn standardized(mut self) -> Result<Self> {
        if self.n < 2 {
            return Err(Error::InvalidData(
                "standardization needs at least 2 observations".into(),
            ));
        }
        let cols: Vec<usize> = self.smooth_columns().collect();
        let mut means = Vec::with_capacity(cols.len());
        let mut sds = Vec::with_capacity(cols.len());
        for &j in &cols {
            let mean = self.column(j).sum::<f64>() / self.n as f64;
            let ss: f64 = self.column(j).map(|v| (v - mean) * (v - mean)).sum();
            let sd = (ss / (self.n - 1) as f64).sqrt();
            if sd == 0.0 {
                return Err(Error::InvalidData(format!(
                    "cannot standardize constant column `{}`",
                    self.column_names[j]
                )));
            }
            means.push(mean);
            sds.push(sd);
        }
        let l = self.l;
        for row in self.covariates.chunks_exact_mut(l) {
            for ((&j, &m), &s) in cols.iter().zip(&means).zip(&sds) {
                row[j] = (row[j] - m) / s;
            }
        }
        self.standardization = Some(Standardization {
            columns: cols,
            means,
            sds,
        });
        Ok(self)
    }
}

/// Load a CSV file (header line, `.` decimal separator) using the column roles in `config`.
pub fn load_csv(path: impl AsRef<Path>, config: &ColumnConfig) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, config).map_err(|e| match e {
        Error::EmptyFile(_) => Error::EmptyFile(path.to_path_buf()),
        other => other,
    })
}

/// Parse CSV from any reader. Row numbers in errors are 1-based data rows (header excluded).
pub fn read_csv<R: std::io::Read>(reader: R, config: &ColumnConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::EmptyFile(Default::default()));
    }
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let lookup = |name: &str| {
        index.get(name).copied().ok_or_else(|| Error::MissingColumn {
            column: name.to_string(),
        })
    };
    let y_col = lookup(&config.outcome)?;
    let a_col = lookup(&config.treatment)?;
    let x_cols = config
        .covariates
        .iter()
        .map(|c| lookup(c))
        .collect::<Result<Vec<_>>>()?;

    let width = x_cols.len() + config.intercept as usize;
    let mut covariates = Vec::new();
    let mut treatments = Vec::new();
    let mut outcomes = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        let row = k + 1;
        let cell = |col: usize, name: &str| -> Result<f64> {
            let raw = record.get(col).unwrap_or("").trim();
            let v: f64 = raw.parse().map_err(|_| Error::NonNumeric {
                row,
                column: name.to_string(),
                value: raw.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row,
                    column: name.to_string(),
                });
            }
            Ok(v)
        };
        outcomes.push(cell(y_col, &config.outcome)?);
        let a = cell(a_col, &config.treatment)?;
        treatments.push(if a == 0.0 {
            0
        } else if a == 1.0 {
            1
        } else {
            return Err(Error::NonBinaryTreatment {
                row,
                column: config.treatment.clone(),
                value: record.get(a_col).unwrap_or("").trim().to_string(),
            });
        });
        if config.intercept {
            covariates.push(1.0);
        }
        for (&col, name) in x_cols.iter().zip(&config.covariates) {
            covariates.push(cell(col, name)?);
        }
    }
    if outcomes.is_empty() {
        return Err(Error::EmptyFile(Default::default()));
    }
    let mut names = Vec::with_capacity(width);
    if config.intercept {
        names.push(INTERCEPT_NAME.to_string());
    }
    names.extend(config.covariates.iter().cloned());
    let data = Dataset::new(covariates, treatments, outcomes, names, config.intercept)?;
    if config.standardize {
        data.standardized()
    } else {
        Ok(data)
    }
}

/// Write `outcome,treatment,<covariates...>` (intercept column omitted) using
/// shortest round-trip float formatting.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>, outcome: &str, treatment: &str) -> Result<()> {
    let path = path.as_ref();
    let mut wtr = csv::Writer::from_path(path)?;
    let cols: Vec<usize> = data.smooth_columns().collect();
    let mut header = vec![outcome.to_string(), treatment.to_string()];
    header.extend(cols.iter().map(|&j| data.column_names()[j].clone()));
    wtr.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = vec![data.outcomes()[i].to_string(), data.treatments()[i].to_string()];
        rec.extend(cols.iter().map(|&j| data.row(i)[j].to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Unit-norm coefficient vector indexing the rule `d(x; β) = I(xᵀβ > 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegimeParameter(Vec<f64>);

impl RegimeParameter {
    pub const NORM_TOLERANCE: f64 = 1e-10;

    /// Wrap an already unit-norm vector.
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        let norm = euclidean_norm(&beta);
        if beta.is_empty() || !(norm - 1.0).abs().le(&Self::NORM_TOLERANCE) {
            return Err(Error::InvalidConfig(format!(
                "regime parameter must have unit norm (got {norm})"
            )));
        }
        Ok(Self(beta))
    }

    pub fn from_unnormalized(beta: Vec<f64>) -> Result<Self> {
        let norm = euclidean_norm(&beta);
        if beta.is_empty() || !norm.is_finite() || norm == 0.0 {
            return Err(Error::InvalidConfig(
                "cannot normalize an empty, zero or non-finite vector".into(),
            ));
        }
        Ok(Self(beta.into_iter().map(|b| b / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn decide(&self, x: &[f64]) -> Result<u8> {
        decide(x, self)
    }
}

pub fn euclidean_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[inline]
pub(crate) fn dot(x: &[f64], beta: &[f64]) -> f64 {
    x.iter().zip(beta).map(|(a, b)| a * b).sum()
}

/// `1` iff `xᵀβ > 0`; ties at zero go to control.
pub fn decide(x: &[f64], beta: &RegimeParameter) -> Result<u8> {
    if x.len() != beta.dim() {
        return Err(Error::Dimension {
            expected: beta.dim(),
            got: x.len(),
        });
    }
    Ok((dot(x, beta.as_slice()) > 0.0) as u8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub bounds: (f64, f64),
    pub n: usize,
    pub below: usize,
    pub above: usize,
    pub violations: Vec<usize>,
    pub min: f64,
    pub max: f64,
}

impl OverlapReport {
    pub fn violation_count(&self) -> usize {
        self.violations.len()
    }
}

pub const DEFAULT_OVERLAP_BOUNDS: (f64, f64) = (0.01, 0.99);

/// Flag propensities outside `[c1, c2]`. Diagnostic only.
pub fn validate_overlap(e_hat: &[f64], bounds: (f64, f64)) -> OverlapReport {
    let (c1, c2) = bounds;
    debug_assert!(0.0 < c1 && c1 < c2 && c2 < 1.0);
    let mut below = 0;
    let mut above = 0;
    let mut violations = Vec::new();
    for (i, &e) in e_hat.iter().enumerate() {
        if e < c1 {
            below += 1;
            violations.push(i);
        } else if e > c2 {
            above += 1;
            violations.push(i);
        }
    }
    OverlapReport {
        bounds,
        n: e_hat.len(),
        below,
        above,
        violations,
        min: e_hat.iter().copied().fold(f64::INFINITY, f64::min),
        max: e_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}
