//! Core data representation: datasets, simulation truth, match
//! specifications and matches, plus CSV ingestion.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Units with covariates, a binary treatment indicator and a response.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    ids: Vec<String>,
    x: Matrix,
    w: Vec<bool>,
    y: Vec<f64>,
}

impl Dataset {
    pub fn new(ids: Vec<String>, x: Matrix, w: Vec<bool>, y: Vec<f64>) -> Result<Self> {
        let n = x.rows();
        for len in [ids.len(), w.len(), y.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: len,
                });
            }
        }
        if let Some(pos) = x.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                row: pos / x.cols().max(1) + 1,
                message: "non-finite covariate".into(),
            });
        }
        if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                row: pos + 1,
                message: "non-finite response".into(),
            });
        }
        Ok(Self { ids, x, w, y })
    }

    /// Dataset with ids `"0".."n-1"`.
    pub fn with_index_ids(x: Matrix, w: Vec<bool>, y: Vec<f64>) -> Result<Self> {
        let ids = (0..x.rows()).map(|i| i.to_string()).collect();
        Self::new(ids, x, w, y)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn w(&self) -> &[bool] {
        &self.w
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            x: self.x.select_rows(indices),
            w: indices.iter().map(|&i| self.w[i]).collect(),
            y: indices.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Copy of the dataset with responses replaced.
    pub fn with_responses(&self, y: Vec<f64>) -> Result<Dataset> {
        Dataset::new(self.ids.clone(), self.x.clone(), self.w.clone(), y)
    }
}

/// Partition of unit indices by treatment status, each list in dataset order.
pub fn split_by_treatment(d: &Dataset) -> (Vec<usize>, Vec<usize>) {
    (0..d.n()).partition(|&i| d.w[i])
}

/// Treatment assignment mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Propensity {
    Constant { value: f64 },
    /// `e(x) = 1 / (1 + exp(-theta . x))`, with `theta` over the covariates
    /// (no intercept).
    Logistic { theta: Vec<f64> },
}

impl Propensity {
    pub fn score(&self, x: &[f64]) -> f64 {
        match self {
            Propensity::Constant { value } => *value,
            Propensity::Logistic { theta } => {
                let eta: f64 = theta.iter().zip(x).map(|(t, v)| t * v).sum();
                logistic(eta)
            }
        }
    }
}

pub(crate) fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Hidden truth behind a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    /// Control-mean coefficients, intercept first.
    pub alpha: Vec<f64>,
    /// Effect coefficients, intercept first.
    pub beta: Vec<f64>,
    /// Weight of the `|x1|` term in the control mean.
    pub delta: f64,
    /// Noise standard deviation.
    pub sigma: f64,
    /// `Var(eps^2) / sigma^4` of the noise law (2 for Gaussian noise).
    pub kappa: f64,
    pub propensity: Propensity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub potential0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub potential1: Option<Vec<f64>>,
}

impl Truth {
    /// Control group mean `mu(x) = [1,x].alpha + delta |x1|`.
    pub fn mu(&self, x: &[f64]) -> f64 {
        linear_with_intercept(&self.alpha, x) + self.delta * x[0].abs()
    }

    /// Treatment effect `tau(x) = [1,x].beta`.
    pub fn tau(&self, x: &[f64]) -> f64 {
        linear_with_intercept(&self.beta, x)
    }

    pub fn propensity_score(&self, x: &[f64]) -> f64 {
        self.propensity.score(x)
    }
}

pub(crate) fn linear_with_intercept(coef: &[f64], x: &[f64]) -> f64 {
    coef[0] + coef[1..].iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
}

/// Multiplicity bounds of a match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchSpec {
    pub min_treated: usize,
    pub min_control: usize,
    pub max_treated: usize,
    pub max_control: usize,
}

impl Default for MatchSpec {
    fn default() -> Self {
        Self {
            min_treated: 1,
            min_control: 1,
            max_treated: 2,
            max_control: 2,
        }
    }
}

impl MatchSpec {
    /// Bounds in the order `(m_t, m_c, M_t, M_c)`.
    pub fn new(min_treated: usize, min_control: usize, max_treated: usize, max_control: usize) -> Result<Self> {
        let spec = Self {
            min_treated,
            min_control,
            max_treated,
            max_control,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_treated == 0 || self.max_control == 0 {
            return Err(Error::InvalidConfig(
                "upper multiplicities M_t and M_c must be positive".into(),
            ));
        }
        if self.min_treated > self.max_treated {
            return Err(Error::InvalidConfig(format!(
                "m_t = {} exceeds M_t = {}",
                self.min_treated, self.max_treated
            )));
        }
        if self.min_control > self.max_control {
            return Err(Error::InvalidConfig(format!(
                "m_c = {} exceeds M_c = {}",
                self.min_control, self.max_control
            )));
        }
        Ok(())
    }
}

/// One matched treated/control pair. Indices are positions among the treated
/// and control units (rows and columns of the distance matrix).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub treated: usize,
    pub control: usize,
    pub distance: f64,
}

/// A set of matched pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pairs: Vec<Pair>,
    treated_count: usize,
    control_count: usize,
}

impl Match {
    pub fn new(treated_count: usize, control_count: usize, mut pairs: Vec<Pair>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(pairs.len());
        for p in &pairs {
            if p.treated >= treated_count || p.control >= control_count {
                return Err(Error::InvalidConfig(format!(
                    "pair ({}, {}) out of range for {}x{} units",
                    p.treated, p.control, treated_count, control_count
                )));
            }
            if !seen.insert((p.treated, p.control)) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate pair ({}, {})",
                    p.treated, p.control
                )));
            }
        }
        pairs.sort_by_key(|p| (p.treated, p.control));
        Ok(Self {
            pairs,
            treated_count,
            control_count,
        })
    }

    pub fn empty(treated_count: usize, control_count: usize) -> Self {
        Self {
            pairs: Vec::new(),
            treated_count,
            control_count,
        }
    }

    /// Pairs sorted by `(treated, control)`.
    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn treated_count(&self) -> usize {
        self.treated_count
    }

    pub fn control_count(&self) -> usize {
        self.control_count
    }

    pub fn treated_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.treated_count];
        for p in &self.pairs {
            deg[p.treated] += 1;
        }
        deg
    }

    pub fn control_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.control_count];
        for p in &self.pairs {
            deg[p.control] += 1;
        }
        deg
    }

    /// `M_t^pi`: the largest number of controls any treated unit is matched to.
    pub fn treated_multiplicity(&self) -> usize {
        self.treated_degrees().into_iter().max().unwrap_or(0)
    }

    /// `M_c^pi`.
    pub fn control_multiplicity(&self) -> usize {
        self.control_degrees().into_iter().max().unwrap_or(0)
    }

    pub fn total_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.distance).sum()
    }

    /// `None` for the empty match.
    pub fn average_distance(&self) -> Option<f64> {
        (!self.is_empty()).then(|| self.total_distance() / self.len() as f64)
    }

    /// Whether every unit degree lies within the bounds of `spec`.
    pub fn satisfies(&self, spec: &MatchSpec) -> bool {
        let within = |d: usize, lo: usize, hi: usize| d >= lo && d <= hi;
        self.treated_degrees()
            .into_iter()
            .all(|d| within(d, spec.min_treated, spec.max_treated))
            && self
                .control_degrees()
                .into_iter()
                .all(|d| within(d, spec.min_control, spec.max_control))
    }

    pub fn contains(&self, treated: usize, control: usize) -> bool {
        self.pairs
            .binary_search_by_key(&(treated, control), |p| (p.treated, p.control))
            .is_ok()
    }

    /// The pair set as sorted `(treated, control)` tuples.
    pub fn edge_set(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().map(|p| (p.treated, p.control)).collect()
    }
}

/// Column names of the dataset CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub id: String,
    pub treatment: String,
    pub response: String,
    /// Covariate columns in order; `None` selects every `x<digits>` column in
    /// header order.
    pub covariates: Option<Vec<String>>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            id: "id".into(),
            treatment: "w".into(),
            response: "y".into(),
            covariates: None,
        }
    }
}

fn is_default_covariate(name: &str) -> bool {
    name.len() > 1 && name.starts_with('x') && name[1..].bytes().all(|b| b.is_ascii_digit())
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
}

fn parse_cell(record: &csv::StringRecord, col: usize, row: usize, name: &str) -> Result<f64> {
    let raw = record.get(col).unwrap_or("").trim();
    let value: f64 = raw.parse().map_err(|_| Error::Parse {
        row,
        message: format!("column `{name}`: `{raw}` is not a number"),
    })?;
    if !value.is_finite() {
        return Err(Error::Parse {
            row,
            message: format!("column `{name}`: non-finite value"),
        });
    }
    Ok(value)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Read a dataset CSV (`id,x1,...,xp,w,y`). Row numbers in errors count data
/// rows from 1.
pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    read_dataset(open(path.as_ref())?, schema)
}

pub fn read_dataset<R: std::io::Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let id_col = column_index(&headers, &schema.id)?;
    let w_col = column_index(&headers, &schema.treatment)?;
    let y_col = column_index(&headers, &schema.response)?;
    let x_names: Vec<String> = match &schema.covariates {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .filter(|h| is_default_covariate(h))
            .map(String::from)
            .collect(),
    };
    if x_names.is_empty() {
        return Err(Error::Schema("no covariate columns".into()));
    }
    let x_cols = x_names
        .iter()
        .map(|name| column_index(&headers, name))
        .collect::<Result<Vec<_>>>()?;

    let mut ids = Vec::new();
    let mut xs = Vec::new();
    let mut w = Vec::new();
    let mut y = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let record = record?;
        ids.push(record.get(id_col).unwrap_or("").to_string());
        for (&col, name) in x_cols.iter().zip(&x_names) {
            xs.push(parse_cell(&record, col, row, name)?);
        }
        let treatment = match record.get(w_col).map(str::trim) {
            Some("1") => true,
            Some("0") => false,
            other => {
                return Err(Error::Parse {
                    row,
                    message: format!(
                        "treatment `{}` must be 0 or 1",
                        other.unwrap_or_default()
                    ),
                })
            }
        };
        w.push(treatment);
        y.push(parse_cell(&record, y_col, row, &schema.response)?);
    }
    let x = Matrix::new(y.len(), x_cols.len(), xs)?;
    Dataset::new(ids, x, w, y)
}

/// Write a dataset in the `id,x1,...,xp,w,y` format. Floats are written in
/// shortest round-trip form so that loading reproduces them exactly.
pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(d, BufWriter::new(file))
}

pub fn write_dataset<W: Write>(d: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string()];
    header.extend((1..=d.p()).map(|j| format!("x{j}")));
    header.push("w".into());
    header.push("y".into());
    wtr.write_record(&header)?;
    for i in 0..d.n() {
        let mut record = Vec::with_capacity(d.p() + 3);
        record.push(d.ids[i].clone());
        record.extend(d.x.row(i).iter().map(|v| v.to_string()));
        record.push(if d.w[i] { "1" } else { "0" }.to_string());
        record.push(d.y[i].to_string());
        wtr.write_record(&record)?;
    }
    wtr.flush().map_err(|e| Error::io("<dataset writer>", e))?;
    Ok(())
}

/// Read a numeric covariate table. Every column except an optional `id`
/// column is a covariate; missing values are rejected.
pub fn load_covariate_table(path: impl AsRef<Path>) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(open(path.as_ref())?);
    let headers = rdr.headers()?.clone();
    let cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| *h != "id")
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        for (col, name) in &cols {
            data.push(parse_cell(&record, *col, idx + 1, name)?);
        }
        rows += 1;
    }
    Matrix::new(rows, cols.len(), data)
}
