//! Treated x control distance matrices.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_by_treatment, Dataset, Matrix, Truth};
use crate::error::{Error, Result};
use crate::forest::RegressionForest;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Proximity,
    Mahalanobis,
    SemiOracle,
    /// Read from a file or built by hand.
    External,
}

/// Dense `n_t x n_c` matrix of nonnegative finite distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    values: Matrix,
    kind: DistanceKind,
    treated_ids: Vec<String>,
    control_ids: Vec<String>,
}

impl DistanceMatrix {
    /// Wrap `values` with positional ids `t1..`, `c1..`.
    pub fn new(values: Matrix, kind: DistanceKind) -> Result<Self> {
        let treated_ids = (1..=values.rows()).map(|i| format!("t{i}")).collect();
        let control_ids = (1..=values.cols()).map(|j| format!("c{j}")).collect();
        Self::with_ids(values, kind, treated_ids, control_ids)
    }

    pub fn with_ids(
        values: Matrix,
        kind: DistanceKind,
        treated_ids: Vec<String>,
        control_ids: Vec<String>,
    ) -> Result<Self> {
        if treated_ids.len() != values.rows() {
            return Err(Error::DimensionMismatch {
                expected: values.rows(),
                found: treated_ids.len(),
            });
        }
        if control_ids.len() != values.cols() {
            return Err(Error::DimensionMismatch {
                expected: values.cols(),
                found: control_ids.len(),
            });
        }
        if let Some(v) = values.as_slice().iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "distances must be finite and nonnegative, found {v}"
            )));
        }
        Ok(Self {
            values,
            kind,
            treated_ids,
            control_ids,
        })
    }

    /// Matrix from nested rows, mostly for fixtures.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?, DistanceKind::External)
    }

    pub fn n_treated(&self) -> usize {
        self.values.rows()
    }

    pub fn n_control(&self) -> usize {
        self.values.cols()
    }

    pub fn get(&self, treated: usize, control: usize) -> f64 {
        self.values.get(treated, control)
    }

    pub fn row(&self, treated: usize) -> &[f64] {
        self.values.row(treated)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn kind(&self) -> DistanceKind {
        self.kind
    }

    pub fn treated_ids(&self) -> &[String] {
        &self.treated_ids
    }

    pub fn control_ids(&self) -> &[String] {
        &self.control_ids
    }

    /// Entrywise `scale * d + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Self> {
        let data = self.values.as_slice().iter().map(|v| scale * v + shift).collect();
        let values = Matrix::new(self.n_treated(), self.n_control(), data)?;
        Self::with_ids(values, self.kind, self.treated_ids.clone(), self.control_ids.clone())
    }

    /// CSV with header `treated_id,<control ids>` and one row per treated unit.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["treated_id".to_string()];
        header.extend(self.control_ids.iter().cloned());
        w.write_record(&header)?;
        for (i, id) in self.treated_ids.iter().enumerate() {
            let mut record = vec![id.clone()];
            record.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io("<distance csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = r.headers()?.clone();
        if header.len() < 2 {
            return Err(Error::Schema("distance CSV needs a treated_id column and at least one control".into()));
        }
        let control_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut treated_ids = Vec::new();
        let mut data = Vec::new();
        for (row, record) in r.records().enumerate() {
            let record = record?;
            if record.len() != header.len() {
                return Err(Error::Parse {
                    row: row + 1,
                    message: format!("expected {} cells, found {}", header.len(), record.len()),
                });
            }
            treated_ids.push(record[0].to_string());
            for cell in record.iter().skip(1) {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    row: row + 1,
                    message: format!("non-numeric distance {cell:?}"),
                })?;
                data.push(v);
            }
        }
        let values = Matrix::new(treated_ids.len(), control_ids.len(), data)?;
        Self::with_ids(values, DistanceKind::External, treated_ids, control_ids)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// Number of trees in which treated row `i` and control row `j` land in
/// different leaves.
pub fn proximity_matrix(
    forest: &RegressionForest,
    treated: &Matrix,
    control: &Matrix,
) -> Result<DistanceMatrix> {
    let lt = forest.leaf_assignments(treated)?;
    let lc = forest.leaf_assignments(control)?;
    let (n_t, n_c) = (treated.rows(), control.rows());
    let mut data = vec![0.0; n_t * n_c];
    data.par_chunks_mut(n_c.max(1)).enumerate().for_each(|(i, out)| {
        if n_c == 0 {
            return;
        }
        let a = lt.row(i);
        for (j, slot) in out.iter_mut().enumerate() {
            let b = lc.row(j);
            *slot = a.iter().zip(b).filter(|(x, y)| x != y).count() as f64;
        }
    });
    DistanceMatrix::new(Matrix::new(n_t, n_c, data)?, DistanceKind::Proximity)
}

/// Proximity matrix between the treated and control units of `d`, carrying
/// their ids.
pub fn proximity_for_dataset(forest: &RegressionForest, d: &Dataset) -> Result<DistanceMatrix> {
    let (t, c) = split_by_treatment(d);
    let m = proximity_matrix(forest, &d.x().select_rows(&t), &d.x().select_rows(&c))?;
    relabel(m, d, &t, &c)
}

/// Mahalanobis distances using the (ridge-regularized) sample covariance of
/// all rows of `d`.
pub fn mahalanobis_matrix(d: &Dataset) -> Result<DistanceMatrix> {
    if d.n() < 2 {
        return Err(Error::Degenerate("Mahalanobis distance needs at least 2 units".into()));
    }
    let cov = sample_covariance(d.x());
    let (t, c) = split_by_treatment(d);
    let m = mahalanobis_with_covariance(&d.x().select_rows(&t), &d.x().select_rows(&c), &cov)?;
    relabel(m, d, &t, &c)
}

/// Quadratic forms `(x_t - x_c)' S^-1 (x_t - x_c)` for a given covariance
/// `S` (`p x p`, row-major). `S` is ridge-regularized by `1e-8 tr(S)/p`.
pub fn mahalanobis_with_covariance(
    treated: &Matrix,
    control: &Matrix,
    covariance: &Matrix,
) -> Result<DistanceMatrix> {
    let p = treated.cols();
    if control.cols() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: control.cols(),
        });
    }
    if covariance.rows() != p || covariance.cols() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: covariance.rows(),
        });
    }
    let mut s = DMatrix::from_row_slice(p, p, covariance.as_slice());
    let trace = s.trace();
    let ridge = if trace > 0.0 { 1e-8 * trace / p as f64 } else { 1e-8 };
    for k in 0..p {
        s[(k, k)] += ridge;
    }
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::Degenerate("covariance is not positive definite".into()))?;

    let (n_t, n_c) = (treated.rows(), control.rows());
    let mut data = vec![0.0; n_t * n_c];
    data.par_chunks_mut(n_c.max(1)).enumerate().for_each(|(i, out)| {
        if n_c == 0 {
            return;
        }
        let xt = treated.row(i);
        for (j, slot) in out.iter_mut().enumerate() {
            let diff = DVector::from_iterator(p, xt.iter().zip(control.row(j)).map(|(a, b)| a - b));
            let z = chol.solve(&diff);
            *slot = diff.dot(&z).max(0.0);
        }
    });
    DistanceMatrix::new(Matrix::new(n_t, n_c, data)?, DistanceKind::Mahalanobis)
}

/// Sample covariance with divisor `n - 1`.
pub fn sample_covariance(x: &Matrix) -> Matrix {
    let (n, p) = (x.rows(), x.cols());
    let mut mean = vec![0.0; p];
    for row in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Matrix::zeros(p, p);
    for row in x.iter_rows() {
        for a in 0..p {
            let da = row[a] - mean[a];
            for b in a..p {
                let v = cov.get(a, b) + da * (row[b] - mean[b]);
                cov.set(a, b, v);
            }
        }
    }
    let denom = (n as f64 - 1.0).max(1.0);
    for a in 0..p {
        for b in a..p {
            let v = cov.get(a, b) / denom;
            cov.set(a, b, v);
            cov.set(b, a, v);
        }
    }
    cov
}

/// Semi-oracle distance `(Y_t(0) - Y_c(0))^2` from the recorded control
/// potentials, optionally perturbed by per-unit `noise`.
pub fn semi_oracle_matrix(truth: &Truth, d: &Dataset, noise: Option<&[f64]>) -> Result<DistanceMatrix> {
    let mu = truth.potential0.as_ref().ok_or(Error::MissingPotentials)?;
    if mu.len() != d.n() {
        return Err(Error::DimensionMismatch {
            expected: d.n(),
            found: mu.len(),
        });
    }
    if let Some(e) = noise {
        if e.len() != d.n() {
            return Err(Error::DimensionMismatch {
                expected: d.n(),
                found: e.len(),
            });
        }
    }
    let y0 = |i: usize| mu[i] + noise.map_or(0.0, |e| e[i]);
    let (t, c) = split_by_treatment(d);
    let mut data = Vec::with_capacity(t.len() * c.len());
    for &i in &t {
        for &j in &c {
            data.push((y0(i) - y0(j)).powi(2));
        }
    }
    let m = DistanceMatrix::new(Matrix::new(t.len(), c.len(), data)?, DistanceKind::SemiOracle)?;
    relabel(m, d, &t, &c)
}

/// One `N(0, sigma^2)` draw per unit, for the noisy semi-oracle distance.
pub fn draw_noise(truth: &Truth, n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            truth.sigma * z
        })
        .collect()
}

fn relabel(m: DistanceMatrix, d: &Dataset, t: &[usize], c: &[usize]) -> Result<DistanceMatrix> {
    let tid = t.iter().map(|&i| d.ids()[i].clone()).collect();
    let cid = c.iter().map(|&j| d.ids()[j].clone()).collect();
    DistanceMatrix::with_ids(m.values, m.kind, tid, cid)
}
