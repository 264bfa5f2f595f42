//! Matched validation error, its bias/variance bounds, fold construction
//! and cross-validation under the five validation methods, and the
//! conditional likelihood criteria for exponential-family responses.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::data::{split_by_treatment, Dataset, Match, MatchSpec, Matrix};
use crate::distance::{
    mahalanobis_with_covariance, proximity_matrix, sample_covariance, DistanceKind, DistanceMatrix,
};
use crate::error::{Error, Result};
use crate::flow::{min_avg_match, min_total_match};
use crate::forest::{fit_forest, ForestParams};
use crate::lasso::{fit_joint_lasso, LassoPath};
use crate::prune::{components, prune};
use crate::rng::{derive_seed, stream, Rng};

/// Noise moments: `Var(eps) = sigma2`, `Var(eps^2) = kappa sigma2^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma2: f64,
    pub kappa: f64,
}

impl NoiseSpec {
    pub fn new(sigma2: f64, kappa: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && kappa > 0.0 && sigma2.is_finite() && kappa.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise needs sigma2 > 0 and kappa > 0, got {sigma2} and {kappa}"
            )));
        }
        Ok(Self { sigma2, kappa })
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        Self::new(sigma * sigma, 2.0)
    }
}

/// `(1/|Pi|) sum (Y_t - Y_c - tau_hat(X_t))^2` over the pairs of `m`.
///
/// `y_treated` and `tau_hat` are indexed by treated position, `y_control`
/// by control position.
pub fn validation_error(m: &Match, y_treated: &[f64], y_control: &[f64], tau_hat: &[f64]) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::EmptyMatch);
    }
    check_len(m.treated_count(), y_treated.len())?;
    check_len(m.treated_count(), tau_hat.len())?;
    check_len(m.control_count(), y_control.len())?;
    let sum: f64 = m
        .pairs()
        .iter()
        .map(|p| (y_treated[p.treated] - y_control[p.control] - tau_hat[p.treated]).powi(2))
        .sum();
    Ok(sum / m.len() as f64)
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

/// Per-pair control mean gaps `b = mu(X_t) - mu(X_c)` and the oracle error
/// `(1/|Pi|) sum (tau_t - tau_hat(X_t))^2` of a match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDiagnostics {
    pub b_values: Vec<f64>,
    pub b2_bar: f64,
    pub oracle_error: f64,
}

impl PairDiagnostics {
    pub fn compute(
        m: &Match,
        mu_treated: &[f64],
        mu_control: &[f64],
        tau_treated: &[f64],
        tau_hat: &[f64],
    ) -> Result<Self> {
        if m.is_empty() {
            return Err(Error::EmptyMatch);
        }
        check_len(m.treated_count(), mu_treated.len())?;
        check_len(m.treated_count(), tau_treated.len())?;
        check_len(m.treated_count(), tau_hat.len())?;
        check_len(m.control_count(), mu_control.len())?;
        let k = m.len() as f64;
        let b_values: Vec<f64> = m
            .pairs()
            .iter()
            .map(|p| mu_treated[p.treated] - mu_control[p.control])
            .collect();
        let b2_bar = b_values.iter().map(|b| b * b).sum::<f64>() / k;
        let oracle_error = m
            .pairs()
            .iter()
            .map(|p| (tau_treated[p.treated] - tau_hat[p.treated]).powi(2))
            .sum::<f64>()
            / k;
        Ok(Self {
            b_values,
            b2_bar,
            oracle_error,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationBounds {
    /// Bounds on `(E[err_hat] - 2 sigma^2) / error` when `normalized`, or on
    /// `E[err_hat]` itself when the oracle error is zero.
    pub bias_lower: f64,
    pub bias_upper: f64,
    pub variance_upper: f64,
    pub normalized: bool,
}

/// Bias and variance bounds for the matched validation error estimator.
pub fn validation_bounds(diag: &PairDiagnostics, noise: &NoiseSpec, m: &Match) -> ValidationBounds {
    let (b2, err, s2) = (diag.b2_bar, diag.oracle_error, noise.sigma2);
    let (bias_lower, bias_upper, normalized) = if err > 0.0 {
        let r = (b2 / err).sqrt();
        ((1.0 - r).powi(2), (1.0 + r).powi(2), true)
    } else {
        (b2 + 2.0 * s2, b2 + 2.0 * s2, false)
    };
    let multiplicity = (m.treated_multiplicity() + m.control_multiplicity()) as f64 - 1.0;
    let variance_upper = multiplicity / m.len().max(1) as f64
        * ((4.0 * noise.kappa + 8.0) * s2 * s2 + 32.0 * s2 * (b2 + err));
    ValidationBounds {
        bias_lower,
        bias_upper,
        variance_upper,
        normalized,
    }
}

/// The bias bounds on the scale of `E[err_hat]`:
/// `2 sigma^2 + (sqrt(error) -/+ sqrt(b2_bar))^2`.
pub fn expected_error_interval(diag: &PairDiagnostics, noise: &NoiseSpec) -> (f64, f64) {
    let (e, b) = (diag.oracle_error.sqrt(), diag.b2_bar.sqrt());
    (2.0 * noise.sigma2 + (e - b).powi(2), 2.0 * noise.sigma2 + (e + b).powi(2))
}

/// The validation methods compared in the simulation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Response prediction error on random folds.
    #[serde(rename = "prd")]
    Prd,
    /// Mahalanobis distance, average objective, match-then-split.
    #[serde(rename = "cvr")]
    Cvr,
    /// Proximity distance, total objective, match-then-split.
    #[serde(rename = "full")]
    Full,
    /// Proximity distance, average objective, split-then-match.
    #[serde(rename = "S-M")]
    SplitMatch,
    /// Proximity distance, average objective, match-then-split.
    #[serde(rename = "combo")]
    Combo,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Prd, Method::Cvr, Method::Full, Method::SplitMatch, Method::Combo];

    pub fn name(self) -> &'static str {
        match self {
            Method::Prd => "prd",
            Method::Cvr => "cvr",
            Method::Full => "full",
            Method::SplitMatch => "S-M",
            Method::Combo => "combo",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "prd" => Ok(Method::Prd),
            "cvr" => Ok(Method::Cvr),
            "full" => Ok(Method::Full),
            "s-m" | "sm" => Ok(Method::SplitMatch),
            "combo" => Ok(Method::Combo),
            _ => Err(Error::InvalidConfig(format!(
                "unknown method {s:?} (expected one of prd, cvr, full, S-M, combo)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    pub spec: MatchSpec,
    /// Forest settings; the seed is replaced by one derived from `seed`.
    pub forest: ForestParams,
    pub k_folds: usize,
    pub seed: u64,
}

impl MethodConfig {
    pub fn new(method: Method, k_folds: usize, seed: u64) -> Self {
        Self {
            method,
            spec: MatchSpec::default(),
            forest: ForestParams::default(),
            k_folds,
            seed,
        }
    }

    fn forest_params(&self, stream_index: u64) -> ForestParams {
        ForestParams {
            seed: derive_seed(self.seed, stream_index),
            ..self.forest.clone()
        }
    }
}

/// Proximity distances from a forest grown on the controls only.
fn control_proximity(x_t: &Matrix, x_c: &Matrix, y_c: &[f64], params: &ForestParams) -> Result<DistanceMatrix> {
    if x_c.rows() < 2 {
        return DistanceMatrix::new(Matrix::zeros(x_t.rows(), x_c.rows()), DistanceKind::Proximity);
    }
    let forest = fit_forest(x_c, y_c, params)?;
    proximity_matrix(&forest, x_t, x_c)
}

/// Hold-out assessment: match the validation set on a control-only
/// proximity distance under the average objective and return the matched
/// validation error of `tau_hat`.
pub fn holdout_assess(
    tau_hat: &(dyn Fn(&[f64]) -> f64 + Sync),
    validation: &Dataset,
    cfg: &MethodConfig,
) -> Result<f64> {
    let (t, c) = split_by_treatment(validation);
    let x = validation.x();
    let (x_t, x_c) = (x.select_rows(&t), x.select_rows(&c));
    let y_c: Vec<f64> = c.iter().map(|&j| validation.y()[j]).collect();
    let y_t: Vec<f64> = t.iter().map(|&i| validation.y()[i]).collect();
    let d = control_proximity(&x_t, &x_c, &y_c, &cfg.forest_params(1))?;
    let sol = min_avg_match(&d, &cfg.spec)?;
    let tau: Vec<f64> = t.iter().map(|&i| tau_hat(x.row(i))).collect();
    validation_error(&sol.matching, &y_t, &y_c, &tau)
}

/// Fold id for every treated and control unit of a match (by position).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Folds {
    pub k: usize,
    pub treated: Vec<usize>,
    pub control: Vec<usize>,
}

impl Folds {
    /// Units per fold.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in self.treated.iter().chain(&self.control) {
            s[f] += 1;
        }
        s
    }
}

/// Assign the connected components of a (pruned) match to `k` folds:
/// components are shuffled and each goes to the currently smallest fold.
/// Unmatched units are then placed one at a time, also into the smallest
/// fold. Ties go to the lowest fold index.
pub fn make_folds(m: &Match, k: usize, rng: &mut Rng) -> Result<Folds> {
    let mut comps = components(m);
    if k < 1 || k > comps.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot split {} matched components into {k} folds",
            comps.len()
        )));
    }
    comps.shuffle(rng);
    let mut sizes = vec![0usize; k];
    let smallest = |sizes: &[usize]| (0..k).min_by_key(|&f| (sizes[f], f)).expect("k >= 1");
    let mut treated = vec![usize::MAX; m.treated_count()];
    let mut control = vec![usize::MAX; m.control_count()];
    for (t, c) in &comps {
        let f = smallest(&sizes);
        t.iter().for_each(|&i| treated[i] = f);
        c.iter().for_each(|&j| control[j] = f);
        sizes[f] += t.len() + c.len();
    }
    for slot in treated.iter_mut().chain(control.iter_mut()) {
        if *slot == usize::MAX {
            let f = smallest(&sizes);
            *slot = f;
            sizes[f] += 1;
        }
    }
    Ok(Folds { k, treated, control })
}

/// Balanced random unit folds: a random permutation dealt out in turn.
pub fn random_folds(n: usize, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if k < 2 || k > n {
        return Err(Error::InvalidConfig(format!("cannot split {n} units into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    Ok(fold)
}

/// The matching stage of match-then-split: distance, optimal match and
/// pruning on the full data, then component folds. Only covariates,
/// treatment indicators and control responses are visible here.
pub fn match_then_split(
    x: &Matrix,
    w: &[bool],
    control_y: &[f64],
    cfg: &MethodConfig,
) -> Result<(Match, Vec<usize>, Vec<usize>, Folds)> {
    let t: Vec<usize> = (0..w.len()).filter(|&i| w[i]).collect();
    let c: Vec<usize> = (0..w.len()).filter(|&i| !w[i]).collect();
    check_len(c.len(), control_y.len())?;
    let (x_t, x_c) = (x.select_rows(&t), x.select_rows(&c));
    let d = match cfg.method {
        Method::Combo | Method::Full => control_proximity(&x_t, &x_c, control_y, &cfg.forest_params(1))?,
        Method::Cvr => mahalanobis_with_covariance(&x_t, &x_c, &sample_covariance(x))?,
        other => {
            return Err(Error::InvalidConfig(format!(
                "{other} does not match before splitting"
            )))
        }
    };
    let sol = match cfg.method {
        Method::Full => min_total_match(&d, &cfg.spec)?,
        _ => min_avg_match(&d, &cfg.spec)?,
    };
    let pruned = prune(&sol.matching);
    let folds = make_folds(&pruned, cfg.k_folds, &mut stream(cfg.seed, 0))?;
    Ok((pruned, t, c, folds))
}

/// Per-lambda cross-validation errors of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub method: Method,
    pub lambdas: Vec<f64>,
    /// Mean over the folds that produced an error.
    pub errors: Vec<f64>,
    /// Per fold: the error curve, or `None` when the fold had nothing to
    /// evaluate.
    pub fold_errors: Vec<Option<Vec<f64>>>,
    /// Folds without validation pairs (or units).
    pub flagged: Vec<usize>,
}

/// Cross-validate the joint LASSO along `lambdas`.
pub fn cross_validate_lasso(d: &Dataset, lambdas: &[f64], cfg: &MethodConfig) -> Result<CvReport> {
    cross_validate(d, lambdas, cfg, fit_joint_lasso)
}

/// Cross-validate an estimator that is fit along `lambdas` by `fit`.
pub fn cross_validate<F>(d: &Dataset, lambdas: &[f64], cfg: &MethodConfig, fit: F) -> Result<CvReport>
where
    F: Fn(&Dataset, &[f64]) -> Result<LassoPath> + Sync,
{
    if cfg.k_folds < 2 {
        return Err(Error::InvalidConfig(format!("k_folds must be at least 2, got {}", cfg.k_folds)));
    }
    let fold_errors: Vec<Option<Vec<f64>>> = match cfg.method {
        Method::Combo | Method::Cvr | Method::Full => {
            let (_, c) = split_by_treatment(d);
            let y_c: Vec<f64> = c.iter().map(|&j| d.y()[j]).collect();
            let (pruned, t, c, folds) = match_then_split(d.x(), d.w(), &y_c, cfg)?;
            let mut unit_fold = vec![0; d.n()];
            for (pos, &i) in t.iter().enumerate() {
                unit_fold[i] = folds.treated[pos];
            }
            for (pos, &j) in c.iter().enumerate() {
                unit_fold[j] = folds.control[pos];
            }
            (0..cfg.k_folds)
                .into_par_iter()
                .map(|f| {
                    let held: Vec<_> = pruned
                        .pairs()
                        .iter()
                        .filter(|p| folds.treated[p.treated] == f)
                        .map(|p| (t[p.treated], c[p.control]))
                        .collect();
                    if held.is_empty() {
                        return Ok(None);
                    }
                    let path = fit(&d.subset(&outside(&unit_fold, f)), lambdas)?;
                    pair_errors(d, &path, &held).map(Some)
                })
                .collect::<Result<_>>()?
        }
        Method::SplitMatch => {
            let unit_fold = random_folds(d.n(), cfg.k_folds, &mut stream(cfg.seed, 0))?;
            (0..cfg.k_folds)
                .into_par_iter()
                .map(|f| {
                    let inside: Vec<usize> = (0..d.n()).filter(|&i| unit_fold[i] == f).collect();
                    let held = match split_then_match(d, &inside, cfg, f)? {
                        Some(h) if !h.is_empty() => h,
                        _ => return Ok(None),
                    };
                    let path = fit(&d.subset(&outside(&unit_fold, f)), lambdas)?;
                    pair_errors(d, &path, &held).map(Some)
                })
                .collect::<Result<_>>()?
        }
        Method::Prd => {
            let unit_fold = random_folds(d.n(), cfg.k_folds, &mut stream(cfg.seed, 0))?;
            (0..cfg.k_folds)
                .into_par_iter()
                .map(|f| {
                    let inside: Vec<usize> = (0..d.n()).filter(|&i| unit_fold[i] == f).collect();
                    if inside.is_empty() {
                        return Ok(None);
                    }
                    let path = fit(&d.subset(&outside(&unit_fold, f)), lambdas)?;
                    prediction_errors(d, &path, &inside).map(Some)
                })
                .collect::<Result<_>>()?
        }
    };

    let flagged: Vec<usize> = (0..fold_errors.len()).filter(|&f| fold_errors[f].is_none()).collect();
    for &f in &flagged {
        warn!("{}: fold {f} has nothing to validate and is left out", cfg.method);
    }
    let used: Vec<&Vec<f64>> = fold_errors.iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::Degenerate(format!("{}: every fold was empty", cfg.method)));
    }
    let errors = (0..lambdas.len())
        .map(|l| used.iter().map(|e| e[l]).sum::<f64>() / used.len() as f64)
        .collect();
    Ok(CvReport {
        method: cfg.method,
        lambdas: lambdas.to_vec(),
        errors,
        fold_errors,
        flagged,
    })
}

fn outside(unit_fold: &[usize], f: usize) -> Vec<usize> {
    (0..unit_fold.len()).filter(|&i| unit_fold[i] != f).collect()
}

/// Pairs (as dataset indices) from matching within one held-out fold, or
/// `None` when the fold cannot be matched.
fn split_then_match(d: &Dataset, inside: &[usize], cfg: &MethodConfig, f: usize) -> Result<Option<Vec<(usize, usize)>>> {
    let t: Vec<usize> = inside.iter().copied().filter(|&i| d.w()[i]).collect();
    let c: Vec<usize> = inside.iter().copied().filter(|&i| !d.w()[i]).collect();
    if t.is_empty() || c.is_empty() {
        return Ok(None);
    }
    let y_c: Vec<f64> = c.iter().map(|&j| d.y()[j]).collect();
    let dist = control_proximity(
        &d.x().select_rows(&t),
        &d.x().select_rows(&c),
        &y_c,
        &cfg.forest_params(2 + f as u64),
    )?;
    let sol = match min_avg_match(&dist, &cfg.spec) {
        Ok(s) => s,
        Err(Error::Infeasible(msg)) => {
            warn!("S-M: fold {f} cannot be matched: {msg}");
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let pruned = prune(&sol.matching);
    Ok(Some(pruned.pairs().iter().map(|p| (t[p.treated], c[p.control])).collect()))
}

/// Matched validation error for every lambda of `path` over `pairs`.
fn pair_errors(d: &Dataset, path: &LassoPath, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    (0..path.len())
        .map(|l| {
            let mut sum = 0.0;
            for &(i, j) in pairs {
                let tau = path.predict_tau(l, d.x().row(i))?;
                sum += (d.y()[i] - d.y()[j] - tau).powi(2);
            }
            Ok(sum / pairs.len() as f64)
        })
        .collect()
}

/// Mean squared response prediction error for every lambda over `units`.
fn prediction_errors(d: &Dataset, path: &LassoPath, units: &[usize]) -> Result<Vec<f64>> {
    (0..path.len())
        .map(|l| {
            let mut sum = 0.0;
            for &i in units {
                let fit = path.predict_response(l, d.x().row(i), d.w()[i])?;
                sum += (d.y()[i] - fit).powi(2);
            }
            Ok(sum / units.len() as f64)
        })
        .collect()
}

/// Response family for the conditional likelihood criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Gaussian { sigma2: f64 },
    Bernoulli,
    Poisson,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean over pairs of the negative log conditional likelihood of the
/// observed split `(Y_t, Y_c)` given `Y_t + Y_c`, with natural parameter
/// difference `tau_hat(X_t)`. This is free of the control mean.
pub fn conditional_nll(
    m: &Match,
    y_treated: &[f64],
    y_control: &[f64],
    tau_hat: &[f64],
    family: Family,
) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::EmptyMatch);
    }
    check_len(m.treated_count(), y_treated.len())?;
    check_len(m.treated_count(), tau_hat.len())?;
    check_len(m.control_count(), y_control.len())?;
    let mut total = 0.0;
    for (k, p) in m.pairs().iter().enumerate() {
        let (yt, yc, eta) = (y_treated[p.treated], y_control[p.control], tau_hat[p.treated]);
        total += match family {
            Family::Gaussian { sigma2 } => {
                if !(sigma2 > 0.0) {
                    return Err(Error::InvalidConfig(format!("sigma2 must be positive, got {sigma2}")));
                }
                (yt - yc - eta).powi(2) / (4.0 * sigma2) + 0.5 * (4.0 * std::f64::consts::PI * sigma2).ln()
            }
            Family::Bernoulli => {
                for v in [yt, yc] {
                    if v != 0.0 && v != 1.0 {
                        return Err(Error::InvalidResponse {
                            family: "bernoulli",
                            pair: k,
                            value: v,
                        });
                    }
                }
                if yt == yc {
                    0.0
                } else {
                    softplus(eta) - eta * yt
                }
            }
            Family::Poisson => {
                for v in [yt, yc] {
                    if !(v >= 0.0 && v.fract() == 0.0 && v.is_finite()) {
                        return Err(Error::InvalidResponse {
                            family: "poisson",
                            pair: k,
                            value: v,
                        });
                    }
                }
                let (a, b) = (yt as u64, yc as u64);
                // Y_t | Z ~ Binomial(Z, logistic(eta)).
                -(ln_binomial(a + b, a) - yt * softplus(-eta) - yc * softplus(eta))
            }
        };
    }
    Ok(total / m.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Pair;
    use crate::rng::rng_from_seed;
    use crate::synth::{generate_scenario, Setting};
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn pairs(n_t: usize, n_c: usize, edges: &[(usize, usize)]) -> Match {
        let p = edges
            .iter()
            .map(|&(t, c)| Pair { treated: t, control: c, distance: 0.0 })
            .collect();
        Match::new(n_t, n_c, p).unwrap()
    }

    fn small_forest() -> ForestParams {
        ForestParams {
            n_trees: 50,
            ..ForestParams::default()
        }
    }

    #[test]
    fn validation_error_arithmetic() {
        let one = pairs(1, 1, &[(0, 0)]);
        assert_eq!(validation_error(&one, &[3.0], &[1.0], &[2.0]).unwrap(), 0.0);
        let two = pairs(2, 2, &[(0, 0), (1, 1)]);
        assert_eq!(validation_error(&two, &[5.0, 4.0], &[1.0, 2.0], &[2.0, 2.0]).unwrap(), 2.0);
        assert!(matches!(
            validation_error(&Match::empty(1, 1), &[0.0], &[0.0], &[0.0]),
            Err(Error::EmptyMatch)
        ));
        assert!(validation_error(&one, &[3.0], &[1.0], &[]).is_err());
    }

    #[test]
    fn perfect_pairs_have_error_two_sigma2() {
        let n = 10_000;
        let m = pairs(n, n, &(0..n).map(|i| (i, i)).collect::<Vec<_>>());
        let mut rng = rng_from_seed(1);
        let mut noise = || -> f64 { StandardNormal.sample(&mut rng) };
        let tau: Vec<f64> = (0..n).map(|i| (i % 7) as f64 * 0.1).collect();
        let y_c: Vec<f64> = (0..n).map(|_| 1.0 + noise()).collect();
        let y_t: Vec<f64> = (0..n).map(|i| 1.0 + tau[i] + noise()).collect();
        let err = validation_error(&m, &y_t, &y_c, &tau).unwrap();
        assert!((err - 2.0).abs() < 0.1, "{err}");
    }

    #[test]
    fn bounds_examples() {
        let m = pairs(100, 100, &(0..100).map(|i| (i, i)).collect::<Vec<_>>());
        let noise = NoiseSpec::gaussian(1.0).unwrap();
        let perfect = PairDiagnostics {
            b_values: vec![0.0; 100],
            b2_bar: 0.0,
            oracle_error: 0.5,
        };
        let b = validation_bounds(&perfect, &noise, &m);
        assert_eq!((b.bias_lower, b.bias_upper), (1.0, 1.0));
        let equal = PairDiagnostics {
            b2_bar: 0.5,
            ..perfect.clone()
        };
        let b = validation_bounds(&equal, &noise, &m);
        assert_eq!((b.bias_lower, b.bias_upper), (0.0, 4.0));
        let zero = PairDiagnostics {
            oracle_error: 0.0,
            ..perfect
        };
        let b = validation_bounds(&zero, &noise, &m);
        assert!(!b.normalized);
        assert_eq!(b.bias_lower, 2.0);
        assert!((b.variance_upper - 0.16).abs() < 1e-12);
    }

    #[test]
    fn diagnostics_mean_of_squares() {
        let m = pairs(2, 2, &[(0, 0), (0, 1), (1, 1)]);
        let d = PairDiagnostics::compute(&m, &[1.0, 2.0], &[0.5, 3.0], &[1.0, 1.0], &[0.0, 1.0]).unwrap();
        assert_eq!(d.b_values, [0.5, -2.0, -1.0]);
        assert!((d.b2_bar - (0.25 + 4.0 + 1.0) / 3.0).abs() < 1e-12);
        assert!((d.oracle_error - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn folds_keep_pairs_together() {
        let m = pairs(10, 10, &(0..10).map(|i| (i, i)).collect::<Vec<_>>());
        let f = make_folds(&m, 5, &mut rng_from_seed(2)).unwrap();
        assert_eq!(f.sizes(), [4; 5]);
        for p in m.pairs() {
            assert_eq!(f.treated[p.treated], f.control[p.control]);
        }
        assert!(make_folds(&m, 11, &mut rng_from_seed(2)).is_err());
    }

    #[test]
    fn ten_pairs_five_folds_two_units_each() {
        let m = pairs(10, 10, &(0..10).map(|i| (i, i)).collect::<Vec<_>>());
        let f = make_folds(&m, 5, &mut rng_from_seed(3)).unwrap();
        // Two pairs, four units, per fold.
        let mut per_fold_pairs = [0; 5];
        for p in m.pairs() {
            per_fold_pairs[f.treated[p.treated]] += 1;
        }
        assert_eq!(per_fold_pairs, [2; 5]);
    }

    #[test]
    fn greedy_balance_with_a_triple() {
        // One star of size 3 plus seven pairs.
        let mut edges = vec![(0, 0), (0, 1)];
        edges.extend((1..8).map(|i| (i, i + 1)));
        let m = pairs(8, 9, &edges);
        for seed in 0..50 {
            let f = make_folds(&m, 2, &mut rng_from_seed(seed)).unwrap();
            let s = f.sizes();
            assert!(s[0].abs_diff(s[1]) <= 3, "{s:?}");
            for p in m.pairs() {
                assert_eq!(f.treated[p.treated], f.control[p.control]);
            }
        }
    }

    #[test]
    fn unmatched_units_fill_small_folds() {
        let m = pairs(4, 3, &[(0, 0), (1, 1)]);
        let f = make_folds(&m, 2, &mut rng_from_seed(4)).unwrap();
        let s = f.sizes();
        assert_eq!(s.iter().sum::<usize>(), 7);
        assert!(s[0].abs_diff(s[1]) <= 1);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("SM".parse::<Method>().is_ok());
        assert!("oracle".parse::<Method>().is_err());
    }

    #[test]
    fn holdout_perfect_duplicates() {
        // Treated rows duplicate control rows; noiseless responses; exact
        // effect predictor.
        let n = 40;
        let mut rng = rng_from_seed(5);
        let base: Vec<Vec<f64>> = (0..n / 2).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let rows: Vec<Vec<f64>> = base.iter().chain(base.iter()).cloned().collect();
        let w: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
        let mu = |x: &[f64]| 2.0 * x[0] - x[1];
        let tau = |x: &[f64]| 1.0 + x[1];
        let y: Vec<f64> = rows.iter().zip(&w).map(|(x, &wi)| mu(x) + if wi { tau(x) } else { 0.0 }).collect();
        let d = Dataset::with_index_ids(Matrix::from_rows(&rows).unwrap(), w, y).unwrap();
        let mut cfg = MethodConfig::new(Method::Combo, 2, 7);
        cfg.forest = ForestParams { n_trees: 100, min_leaf: 1, ..ForestParams::default() };
        cfg.spec = MatchSpec::new(1, 1, 1, 1).unwrap();
        let err = holdout_assess(&tau, &d, &cfg).unwrap();
        assert!(err < 1e-20, "{err}");
    }

    #[test]
    fn holdout_constant_dataset() {
        let n = 12;
        let w: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let y: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let d = Dataset::with_index_ids(Matrix::zeros(n, 2), w, y).unwrap();
        let mut cfg = MethodConfig::new(Method::Combo, 2, 1);
        cfg.forest = small_forest();
        cfg.spec = MatchSpec::new(1, 1, 1, 1).unwrap();
        let err = holdout_assess(&|_| 0.5, &d, &cfg).unwrap();
        // Some perfect matching of evens to odds; recompute its error.
        let (t, c) = split_by_treatment(&d);
        let dist = DistanceMatrix::new(Matrix::zeros(t.len(), c.len()), DistanceKind::Proximity).unwrap();
        let sol = min_avg_match(&dist, &cfg.spec).unwrap();
        let yt: Vec<f64> = t.iter().map(|&i| d.y()[i]).collect();
        let yc: Vec<f64> = c.iter().map(|&j| d.y()[j]).collect();
        let expect = validation_error(&sol.matching, &yt, &yc, &vec![0.5; t.len()]).unwrap();
        assert_eq!(err, expect);
    }

    #[test]
    fn holdout_is_deterministic() {
        let (d, truth) = generate_scenario(&Setting::I.config(200, 9)).unwrap();
        let mut cfg = MethodConfig::new(Method::Combo, 10, 3);
        cfg.forest = small_forest();
        let tau = |x: &[f64]| truth.tau(x) * 0.5;
        let a = holdout_assess(&tau, &d, &cfg).unwrap();
        let b = holdout_assess(&tau, &d, &cfg).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn prd_is_zero_for_exact_noiseless_fit() {
        let n = 60;
        let mut rng = rng_from_seed(6);
        let x = Matrix::new(n, 2, (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let (alpha, beta) = (vec![0.5, 1.0, -1.0], vec![1.0, 0.0, 2.0]);
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let r = x.row(i);
                let lin = |c: &[f64]| c[0] + c[1] * r[0] + c[2] * r[1];
                lin(&alpha) + if w[i] { lin(&beta) } else { 0.0 }
            })
            .collect();
        let d = Dataset::with_index_ids(x, w, y).unwrap();
        let oracle = |_: &Dataset, l: &[f64]| {
            Ok(LassoPath {
                lambdas: l.to_vec(),
                alpha: vec![alpha.clone(); l.len()],
                beta: vec![beta.clone(); l.len()],
            })
        };
        let report = cross_validate(&d, &[0.3, 0.1], &MethodConfig::new(Method::Prd, 5, 1), oracle).unwrap();
        assert!(report.errors.iter().all(|&e| e < 1e-24), "{:?}", report.errors);
        assert!(report.flagged.is_empty());
    }

    #[test]
    fn combo_fold_average_and_determinism() {
        let (d, _) = generate_scenario(&Setting::I.config(200, 10)).unwrap();
        let mut cfg = MethodConfig::new(Method::Combo, 2, 4);
        cfg.forest = small_forest();
        let grid = [0.1];
        let r = cross_validate_lasso(&d, &grid, &cfg).unwrap();
        let folds: Vec<f64> = r.fold_errors.iter().flatten().map(|e| e[0]).collect();
        assert_eq!(folds.len(), 2);
        assert!((r.errors[0] - (folds[0] + folds[1]) / 2.0).abs() < 1e-12);
        let again = cross_validate_lasso(&d, &grid, &cfg).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn every_method_gives_finite_curves() {
        let (d, _) = generate_scenario(&Setting::I.config(200, 11)).unwrap();
        let grid = crate::lasso::default_lambdas();
        for method in Method::ALL {
            let mut cfg = MethodConfig::new(method, 10, 5);
            cfg.forest = small_forest();
            let r = cross_validate_lasso(&d, &grid, &cfg).unwrap();
            assert_eq!(r.errors.len(), 11);
            assert!(r.errors.iter().all(|e| e.is_finite()), "{method}: {:?}", r.errors);
            let again = cross_validate_lasso(&d, &grid, &cfg).unwrap();
            assert_eq!(r.errors, again.errors);
        }
    }

    #[test]
    fn matching_stage_ignores_treated_responses() {
        let (d, _) = generate_scenario(&Setting::I.config(120, 12)).unwrap();
        let (_, c) = split_by_treatment(&d);
        let y_c: Vec<f64> = c.iter().map(|&j| d.y()[j]).collect();
        let mut cfg = MethodConfig::new(Method::Combo, 5, 2);
        cfg.forest = small_forest();
        let a = match_then_split(d.x(), d.w(), &y_c, &cfg).unwrap();
        // Scrambling treated responses cannot change the matched folds.
        let y2: Vec<f64> = d.y().iter().zip(d.w()).map(|(&y, &w)| if w { -100.0 * y } else { y }).collect();
        let d2 = d.with_responses(y2).unwrap();
        let y_c2: Vec<f64> = c.iter().map(|&j| d2.y()[j]).collect();
        let b = match_then_split(d2.x(), d2.w(), &y_c2, &cfg).unwrap();
        assert_eq!(a, b);
        let r1 = cross_validate_lasso(&d, &[0.2], &cfg).unwrap();
        let r2 = cross_validate_lasso(&d2, &[0.2], &cfg).unwrap();
        assert_eq!(r1.flagged, r2.flagged);
    }

    #[test]
    fn split_then_match_flags_unmatchable_folds() {
        // Treated units all fall into some folds only.
        let n = 20;
        let w: Vec<bool> = (0..n).map(|i| i < 3).collect();
        let mut rng = rng_from_seed(8);
        let x = Matrix::new(n, 1, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let d = Dataset::with_index_ids(x, w, (0..n).map(|i| i as f64).collect()).unwrap();
        let mut cfg = MethodConfig::new(Method::SplitMatch, 10, 1);
        cfg.forest = small_forest();
        let r = cross_validate_lasso(&d, &[0.1], &cfg).unwrap();
        assert!(r.flagged.len() >= 7);
        assert_eq!(r.fold_errors.len(), 10);
    }

    #[test]
    fn conditional_nll_examples() {
        let one = pairs(1, 1, &[(0, 0)]);
        let g = conditional_nll(&one, &[3.0], &[1.0], &[2.0], Family::Gaussian { sigma2: 1.0 }).unwrap();
        assert!((g - 0.5 * (4.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let p = conditional_nll(&one, &[2.0], &[2.0], &[0.0], Family::Poisson).unwrap();
        assert!((p + 0.375f64.ln()).abs() < 1e-12);
        for eta in [-3.0, 0.0, 0.7, 10.0] {
            let b = conditional_nll(&one, &[1.0], &[1.0], &[eta], Family::Bernoulli).unwrap();
            assert_eq!(b, 0.0);
            let b = conditional_nll(&one, &[0.0], &[0.0], &[eta], Family::Bernoulli).unwrap();
            assert_eq!(b, 0.0);
        }
        let disc = conditional_nll(&one, &[1.0], &[0.0], &[0.7], Family::Bernoulli).unwrap();
        assert!((disc - -(0.7f64.exp() / (1.0 + 0.7f64.exp())).ln()).abs() < 1e-12);
        assert!(matches!(
            conditional_nll(&one, &[2.0], &[0.0], &[0.0], Family::Bernoulli),
            Err(Error::InvalidResponse { family: "bernoulli", .. })
        ));
        assert!(matches!(
            conditional_nll(&one, &[1.5], &[0.0], &[0.0], Family::Poisson),
            Err(Error::InvalidResponse { family: "poisson", .. })
        ));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
    }
}
