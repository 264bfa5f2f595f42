//! Synthetic data from the potential outcome model
//!
//! ```text
//! X ~ P,  W | X ~ Ber(e(X)),  Y = mu(X) + W tau(X) + eps
//! mu(x) = [1,x].alpha + delta |x1|,   tau(x) = [1,x].beta
//! ```
//!
//! Coefficients are sparse (`floor(p/2)` nonzero non-intercept entries drawn
//! from `{-1, +1}`, zero intercepts) and the noise level is chosen so that the
//! signal-to-noise ratio `Var((W - e(X)) tau(X)) / sigma^2` hits the
//! requested target on the generated covariates.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Matrix, Propensity, Truth};
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};

pub const DEFAULT_N: usize = 200;
pub const DEFAULT_SNR: f64 = 0.5;
/// `Var(eps^2) / sigma^4` for Gaussian noise.
pub const GAUSSIAN_KAPPA: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n: usize,
    pub p: usize,
    pub delta: f64,
    pub propensity: Propensity,
    pub k_folds: usize,
    pub snr_target: f64,
    pub seed: u64,
    /// Replaces the drawn control-mean coefficients (length `p + 1`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    /// Replaces the drawn effect coefficients (length `p + 1`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n < 4 {
            return bad(format!("n = {} must be at least 4", self.n));
        }
        if self.p < 1 {
            return bad("p must be at least 1".into());
        }
        if !(self.snr_target > 0.0 && self.snr_target <= 1.0) {
            return bad(format!("snr_target = {} must lie in (0, 1]", self.snr_target));
        }
        if self.k_folds < 2 {
            return bad(format!("k_folds = {} must be at least 2", self.k_folds));
        }
        if !self.delta.is_finite() {
            return bad("delta must be finite".into());
        }
        self.validate_model(self.p)
    }

    fn validate_model(&self, p: usize) -> Result<()> {
        match &self.propensity {
            Propensity::Constant { value } if !(*value > 0.0 && *value < 1.0) => {
                return Err(Error::InvalidConfig(format!(
                    "constant propensity {value} must lie in (0, 1)"
                )))
            }
            Propensity::Logistic { theta } if theta.len() != p => {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    found: theta.len(),
                })
            }
            _ => {}
        }
        for coef in [&self.alpha, &self.beta].into_iter().flatten() {
            if coef.len() != p + 1 {
                return Err(Error::DimensionMismatch {
                    expected: p + 1,
                    found: coef.len(),
                });
            }
        }
        Ok(())
    }
}

/// The five simulation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    I,
    II,
    III,
    IV,
    V,
}

impl Setting {
    pub const ALL: [Setting; 5] = [Setting::I, Setting::II, Setting::III, Setting::IV, Setting::V];

    pub fn delta(self) -> f64 {
        match self {
            Setting::II => -2.0,
            _ => 0.0,
        }
    }

    pub fn p(self) -> usize {
        match self {
            Setting::III => 20,
            _ => 10,
        }
    }

    pub fn k_folds(self) -> usize {
        match self {
            Setting::V => 25,
            _ => 10,
        }
    }

    /// Constant 0.5, or `e(x) = e^{2 x1} / (1 + e^{2 x1})` for setting IV.
    pub fn propensity(self, p: usize) -> Propensity {
        match self {
            Setting::IV => {
                let mut theta = vec![0.0; p];
                theta[0] = 2.0;
                Propensity::Logistic { theta }
            }
            _ => Propensity::Constant { value: 0.5 },
        }
    }

    pub fn config(self, n: usize, seed: u64) -> ScenarioConfig {
        self.config_with_p(n, self.p(), seed)
    }

    /// Setting parameters at a covariate dimension other than the preset one
    /// (used when covariates come from a user table).
    pub fn config_with_p(self, n: usize, p: usize, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            n,
            p,
            delta: self.delta(),
            propensity: self.propensity(p),
            k_folds: self.k_folds(),
            snr_target: DEFAULT_SNR,
            seed,
            alpha: None,
            beta: None,
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Setting::I => "I",
            Setting::II => "II",
            Setting::III => "III",
            Setting::IV => "IV",
            Setting::V => "V",
        };
        f.write_str(name)
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "I" | "1" => Ok(Setting::I),
            "II" | "2" => Ok(Setting::II),
            "III" | "3" => Ok(Setting::III),
            "IV" | "4" => Ok(Setting::IV),
            "V" | "5" => Ok(Setting::V),
            other => Err(Error::InvalidConfig(format!(
                "unknown setting `{other}`; expected one of I, II, III, IV, V"
            ))),
        }
    }
}

/// Draw a scenario: covariates uniform on `[-1, 1]^p`, then treatment and
/// responses from the model.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<(Dataset, Truth)> {
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let data = (0..cfg.n * cfg.p)
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    let x = Matrix::new(cfg.n, cfg.p, data)?;
    simulate_outcomes(x, cfg, &mut rng)
}

/// Scenario on covariates taken from a user table. A `fraction` of the rows
/// (`floor(fraction * rows)`, at least 2) is sampled without replacement in
/// random order, each column of the sample is standardized to zero mean and
/// unit population variance, and treatment and responses are generated as in
/// [`generate_scenario`]. `cfg.n` and `cfg.p` are taken from the table.
pub fn generate_from_features(
    table: &Matrix,
    fraction: f64,
    cfg: &ScenarioConfig,
) -> Result<(Dataset, Truth)> {
    if table.rows() == 0 || table.cols() == 0 {
        return Err(Error::Degenerate("empty covariate table".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "subsample fraction {fraction} must lie in (0, 1]"
        )));
    }
    let n = ((fraction * table.rows() as f64) + 1e-9).floor() as usize;
    let n = n.clamp(2.min(table.rows()), table.rows());
    let cfg = ScenarioConfig {
        n,
        p: table.cols(),
        ..cfg.clone()
    };
    cfg.validate()?;

    let mut rng = rng_from_seed(cfg.seed);
    let rows: Vec<usize> = index::sample(&mut rng, table.rows(), n).into_vec();
    let mut x = table.select_rows(&rows);
    standardize_columns(&mut x);
    simulate_outcomes(x, &cfg, &mut rng)
}

/// Centre and scale each column to unit population variance. Constant columns
/// become all-zero.
pub fn standardize_columns(x: &mut Matrix) {
    let n = x.rows() as f64;
    for j in 0..x.cols() {
        let mean = (0..x.rows()).map(|i| x.get(i, j)).sum::<f64>() / n;
        let var = (0..x.rows()).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for i in 0..x.rows() {
            let centred = x.get(i, j) - mean;
            x.set(i, j, if sd > 0.0 { centred / sd } else { 0.0 });
        }
    }
}

fn sparse_signs(p: usize, forced: &[(usize, f64)], rng: &mut Rng) -> Vec<f64> {
    let budget = p / 2;
    let mut coef = vec![0.0; p + 1];
    let mut used = 0;
    for &(j, sign) in forced.iter().take(budget) {
        coef[j + 1] = sign;
        used += 1;
    }
    let free: Vec<usize> = (0..p).filter(|j| coef[j + 1] == 0.0).collect();
    let extra = budget - used;
    for k in index::sample(rng, free.len(), extra.min(free.len())) {
        coef[free[k] + 1] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    }
    coef
}

fn simulate_outcomes(x: Matrix, cfg: &ScenarioConfig, rng: &mut Rng) -> Result<(Dataset, Truth)> {
    let p = x.cols();
    let alpha_draw = sparse_signs(p, &[], rng);
    // With a covariate-dependent propensity the effect shares the propensity's
    // covariates with matching signs, so that e(x) and tau(x) are positively
    // correlated.
    let forced: Vec<(usize, f64)> = match &cfg.propensity {
        Propensity::Logistic { theta } => theta
            .iter()
            .enumerate()
            .filter(|(_, t)| **t != 0.0)
            .map(|(j, t)| (j, t.signum()))
            .collect(),
        Propensity::Constant { .. } => Vec::new(),
    };
    let beta_draw = sparse_signs(p, &forced, rng);
    let alpha = cfg.alpha.clone().unwrap_or(alpha_draw);
    let beta = cfg.beta.clone().unwrap_or(beta_draw);

    let mut truth = Truth {
        alpha,
        beta,
        delta: cfg.delta,
        sigma: 1.0,
        kappa: GAUSSIAN_KAPPA,
        propensity: cfg.propensity.clone(),
        potential0: None,
        potential1: None,
    };

    let n = x.rows();
    let scores: Vec<f64> = x.iter_rows().map(|r| truth.propensity_score(r)).collect();
    let w: Vec<bool> = scores.iter().map(|&e| rng.random_bool(e)).collect();
    let mu: Vec<f64> = x.iter_rows().map(|r| truth.mu(r)).collect();
    let tau: Vec<f64> = x.iter_rows().map(|r| truth.tau(r)).collect();

    let signal = scores
        .iter()
        .zip(&tau)
        .map(|(e, t)| e * (1.0 - e) * t * t)
        .sum::<f64>()
        / n as f64;
    truth.sigma = if signal > 0.0 {
        (signal / cfg.snr_target).sqrt()
    } else {
        1.0
    };

    let y = (0..n)
        .map(|i| {
            let eps: f64 = StandardNormal.sample(rng);
            mu[i] + if w[i] { tau[i] } else { 0.0 } + truth.sigma * eps
        })
        .collect();
    truth.potential1 = Some(mu.iter().zip(&tau).map(|(m, t)| m + t).collect());
    truth.potential0 = Some(mu);
    let d = Dataset::with_index_ids(x, w, y)?;
    Ok((d, truth))
}
