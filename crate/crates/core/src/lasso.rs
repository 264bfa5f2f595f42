//! Joint LASSO over control-mean and effect coefficients,
//!
//! ```text
//! min (1/2n) sum_i (Y_i - [1,X_i].alpha - W_i [1,X_i].beta)^2 + lambda (|alpha|_1 + |beta|_1)
//! ```
//!
//! fit by cyclic coordinate descent on the design `[1, X, W, W X]`. Every
//! coefficient, intercepts included, is penalized.

use serde::{Deserialize, Serialize};

use crate::data::{linear_with_intercept, Dataset, Matrix};
use crate::error::{Error, Result};

/// Convergence threshold on the largest coefficient change in a sweep.
pub const CD_TOL: f64 = 1e-7;
const MAX_SWEEPS: usize = 1_000_000;

/// `2^(-i/2)` for `i = 1..=11`.
pub fn default_lambdas() -> Vec<f64> {
    (1..=11).map(|i| 2f64.powf(-(i as f64) / 2.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoPath {
    pub lambdas: Vec<f64>,
    /// Per lambda, `p + 1` control-mean coefficients (intercept first).
    pub alpha: Vec<Vec<f64>>,
    /// Per lambda, `p + 1` effect coefficients (intercept first).
    pub beta: Vec<Vec<f64>>,
}

impl LassoPath {
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn p(&self) -> usize {
        self.alpha.first().map_or(0, |a| a.len() - 1)
    }

    fn check(&self, index: usize, x: &[f64]) -> Result<()> {
        if index >= self.len() {
            return Err(Error::InvalidConfig(format!(
                "lambda index {index} out of range for a path of length {}",
                self.len()
            )));
        }
        if x.len() != self.p() {
            return Err(Error::DimensionMismatch {
                expected: self.p(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// `[1,x].beta_hat`.
    pub fn predict_tau(&self, index: usize, x: &[f64]) -> Result<f64> {
        self.check(index, x)?;
        Ok(linear_with_intercept(&self.beta[index], x))
    }

    /// `[1,x].alpha_hat`.
    pub fn predict_control(&self, index: usize, x: &[f64]) -> Result<f64> {
        self.check(index, x)?;
        Ok(linear_with_intercept(&self.alpha[index], x))
    }

    /// `[1,x].alpha_hat + w [1,x].beta_hat`.
    pub fn predict_response(&self, index: usize, x: &[f64], w: bool) -> Result<f64> {
        let mu = self.predict_control(index, x)?;
        Ok(if w { mu + self.predict_tau(index, x)? } else { mu })
    }
}

/// Design matrix `[1, X, W, W X]` with `2(p + 1)` columns.
pub fn joint_design(x: &Matrix, w: &[bool]) -> Matrix {
    let (n, p) = (x.rows(), x.cols());
    let mut z = Matrix::zeros(n, 2 * (p + 1));
    for i in 0..n {
        let row = z.row_mut(i);
        row[0] = 1.0;
        row[1..=p].copy_from_slice(x.row(i));
        if w[i] {
            row[p + 1] = 1.0;
            row[p + 2..].copy_from_slice(x.row(i));
        }
    }
    z
}

pub fn fit_joint_lasso(d: &Dataset, lambdas: &[f64]) -> Result<LassoPath> {
    let z = joint_design(d.x(), d.w());
    let thetas = fit_lasso(&z, d.y(), lambdas)?;
    let p = d.p();
    let (alpha, beta) = thetas
        .into_iter()
        .map(|mut t| {
            let b = t.split_off(p + 1);
            (t, b)
        })
        .unzip();
    Ok(LassoPath {
        lambdas: lambdas.to_vec(),
        alpha,
        beta,
    })
}

/// `max_j |z_j' y| / n`: the smallest lambda at which the solution is zero.
pub fn lambda_max(z: &Matrix, y: &[f64]) -> f64 {
    let n = z.rows() as f64;
    (0..z.cols())
        .map(|j| (0..z.rows()).map(|i| z.get(i, j) * y[i]).sum::<f64>().abs() / n)
        .fold(0.0, f64::max)
}

/// `(1/2n) |y - Z theta|^2 + lambda |theta|_1`.
pub fn objective(z: &Matrix, y: &[f64], theta: &[f64], lambda: f64) -> f64 {
    let n = z.rows() as f64;
    let rss: f64 = z
        .iter_rows()
        .zip(y)
        .map(|(row, yi)| {
            let fit: f64 = row.iter().zip(theta).map(|(a, b)| a * b).sum();
            (yi - fit).powi(2)
        })
        .sum();
    rss / (2.0 * n) + lambda * theta.iter().map(|t| t.abs()).sum::<f64>()
}

/// Largest violation of the optimality conditions at `theta`: for zero
/// coefficients `|g_j| - lambda` (if positive), otherwise `|g_j + lambda
/// sign(theta_j)|`, where `g` is the gradient of the smooth part.
pub fn kkt_residual(z: &Matrix, y: &[f64], theta: &[f64], lambda: f64) -> f64 {
    let n = z.rows() as f64;
    let resid: Vec<f64> = z
        .iter_rows()
        .zip(y)
        .map(|(row, yi)| yi - row.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    (0..z.cols())
        .map(|j| {
            let g = -(0..z.rows()).map(|i| z.get(i, j) * resid[i]).sum::<f64>() / n;
            if theta[j] == 0.0 {
                (g.abs() - lambda).max(0.0)
            } else {
                (g + lambda * theta[j].signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Coordinate descent along a strictly descending `lambdas`, warm-started
/// from the previous solution. Returns one coefficient vector per lambda.
pub fn fit_lasso(z: &Matrix, y: &[f64], lambdas: &[f64]) -> Result<Vec<Vec<f64>>> {
    let (n, q) = (z.rows(), z.cols());
    if n == 0 {
        return Err(Error::Degenerate("LASSO needs at least one observation".into()));
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: y.len(),
        });
    }
    if z.as_slice().iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("LASSO input contains non-finite values".into()));
    }
    if lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::InvalidConfig("lambdas must be positive and finite".into()));
    }
    if lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidConfig("lambda grid must be strictly descending".into()));
    }

    let nf = n as f64;
    let cols: Vec<Vec<f64>> = (0..q).map(|j| (0..n).map(|i| z.get(i, j)).collect()).collect();
    let scale: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / nf).collect();
    let mut theta = vec![0.0; q];
    let mut resid = y.to_vec();
    let mut path = Vec::with_capacity(lambdas.len());

    for &lambda in lambdas {
        let mut converged = false;
        for _ in 0..MAX_SWEEPS {
            #[cfg(debug_assertions)]
            let before = objective(z, y, &theta, lambda);
            let mut max_change: f64 = 0.0;
            for j in 0..q {
                if scale[j] == 0.0 {
                    continue;
                }
                let col = &cols[j];
                let rho = col.iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / nf + scale[j] * theta[j];
                let new = soft_threshold(rho, lambda) / scale[j];
                let delta = new - theta[j];
                if delta != 0.0 {
                    for (r, a) in resid.iter_mut().zip(col) {
                        *r -= delta * a;
                    }
                    theta[j] = new;
                    max_change = max_change.max(delta.abs());
                }
            }
            #[cfg(debug_assertions)]
            {
                let after = objective(z, y, &theta, lambda);
                debug_assert!(after <= before + 1e-10 * before.abs().max(1.0), "{after} > {before}");
            }
            if max_change < CD_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Degenerate(format!(
                "coordinate descent did not converge at lambda = {lambda}"
            )));
        }
        path.push(theta.clone());
    }
    Ok(path)
}
