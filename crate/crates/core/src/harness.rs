//! Simulation study driver: settings x methods x repetitions, relative MSE
//! against the oracle choice of lambda, averaged error curves and their
//! regressions, and the result files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assess::{cross_validate_lasso, Method, MethodConfig};
use crate::data::{Dataset, MatchSpec, Truth};
use crate::error::{Error, Result};
use crate::forest::ForestParams;
use crate::lasso::{fit_joint_lasso, LassoPath};
use crate::rng::derive_seed;
use crate::synth::{generate_scenario, Setting, DEFAULT_N, DEFAULT_SNR};

/// `|beta_hat_lambda - beta|^2` for every lambda of the path.
pub fn beta_error_curve(path: &LassoPath, truth: &Truth) -> Result<Vec<f64>> {
    if path.p() + 1 != truth.beta.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.beta.len(),
            found: path.p() + 1,
        });
    }
    Ok(path
        .beta
        .iter()
        .map(|b| b.iter().zip(&truth.beta).map(|(a, t)| (a - t).powi(2)).sum())
        .collect())
}

/// `(1/n_t) sum_t (tau(X_t) - tau_hat_lambda(X_t))^2` over the treated
/// units of `d`, for every lambda of the path.
pub fn tau_error_curve(path: &LassoPath, truth: &Truth, d: &Dataset) -> Result<Vec<f64>> {
    let treated: Vec<usize> = (0..d.n()).filter(|&i| d.w()[i]).collect();
    if treated.is_empty() {
        return Err(Error::Degenerate("no treated units".into()));
    }
    (0..path.len())
        .map(|l| {
            let mut sum = 0.0;
            for &i in &treated {
                let x = d.x().row(i);
                sum += (truth.tau(x) - path.predict_tau(l, x)?).powi(2);
            }
            Ok(sum / treated.len() as f64)
        })
        .collect()
}

/// The oracle choice over the grid and its error; ties go to the smaller
/// index.
pub fn oracle_mse(path: &LassoPath, truth: &Truth) -> Result<(usize, f64)> {
    let curve = beta_error_curve(path, truth)?;
    let (mut best, mut value) = (0, f64::INFINITY);
    for (l, &e) in curve.iter().enumerate() {
        if e < value {
            (best, value) = (l, e);
        }
    }
    if curve.is_empty() {
        return Err(Error::InvalidConfig("empty lambda path".into()));
    }
    Ok((best, value))
}

/// Index of the minimal validation error; ties go to the smaller lambda.
pub fn select_lambda(lambdas: &[f64], errors: &[f64]) -> Result<usize> {
    if lambdas.is_empty() || lambdas.len() != errors.len() {
        return Err(Error::DimensionMismatch {
            expected: lambdas.len(),
            found: errors.len(),
        });
    }
    let mut best = 0;
    for l in 1..errors.len() {
        let better = errors[l] < errors[best] || (errors[l] == errors[best] && lambdas[l] < lambdas[best]);
        if better {
            best = l;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeMse {
    /// `log(mse_method / mse_oracle)`, `+inf` when `flagged`.
    pub value: f64,
    /// The oracle error was zero.
    pub flagged: bool,
}

pub fn relative_mse(mse_method: f64, mse_oracle: f64) -> RelativeMse {
    if mse_oracle <= 0.0 {
        let value = if mse_method <= 0.0 { 0.0 } else { f64::INFINITY };
        return RelativeMse { value, flagged: true };
    }
    RelativeMse {
        value: (mse_method / mse_oracle).ln(),
        flagged: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least squares regression of `validation` on `oracle` with intercept.
pub fn curve_regression(validation: &[f64], oracle: &[f64]) -> Result<CurveFit> {
    if validation.len() != oracle.len() {
        return Err(Error::DimensionMismatch {
            expected: oracle.len(),
            found: validation.len(),
        });
    }
    if oracle.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "curve regression needs at least 3 points, got {}",
            oracle.len()
        )));
    }
    if oracle.iter().chain(validation).any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("curve regression on non-finite values".into()));
    }
    let n = oracle.len() as f64;
    let mx = oracle.iter().sum::<f64>() / n;
    let my = validation.iter().sum::<f64>() / n;
    let sxx: f64 = oracle.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = oracle.iter().zip(validation).map(|(x, y)| (x - mx) * (y - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Degenerate("constant oracle curve: slope undefined".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = oracle
        .iter()
        .zip(validation)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let tss: f64 = validation.iter().map(|y| (y - my).powi(2)).sum();
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    Ok(CurveFit {
        slope,
        intercept,
        r_squared,
    })
}

/// `2^(-i/2)` for `i = 1..=20`: the default grid continued far enough
/// that the oracle choice is interior in every setting.
pub fn simulation_lambdas() -> Vec<f64> {
    (1..=20).map(|i| 2f64.powf(-(i as f64) / 2.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub settings: Vec<Setting>,
    pub methods: Vec<Method>,
    pub reps: usize,
    pub seed: u64,
    pub n: usize,
    pub snr: f64,
    pub lambdas: Vec<f64>,
    pub spec: MatchSpec,
    pub forest: ForestParams,
    /// Overrides the per-setting fold count.
    pub k_folds: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            settings: Setting::ALL.to_vec(),
            methods: Method::ALL.to_vec(),
            reps: 200,
            seed: 0,
            n: DEFAULT_N,
            snr: DEFAULT_SNR,
            lambdas: simulation_lambdas(),
            spec: MatchSpec::default(),
            forest: ForestParams::default(),
            k_folds: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 1 {
            return Err(Error::InvalidConfig("reps must be at least 1".into()));
        }
        if self.settings.is_empty() || self.methods.is_empty() {
            return Err(Error::InvalidConfig("need at least one setting and one method".into()));
        }
        self.spec.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub method: Method,
    pub lambda_index: usize,
    pub lambda: f64,
    pub mse: f64,
    /// `None` when the oracle error was zero (infinite relative MSE).
    pub relative_mse: Option<f64>,
    pub flagged: bool,
    pub validation_curve: Vec<f64>,
    pub flagged_folds: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodFailure {
    pub method: Method,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub setting: Setting,
    pub rep: usize,
    pub seed: u64,
    /// Set when the repetition itself failed; nothing else is then filled.
    pub error: Option<String>,
    pub oracle_lambda_index: usize,
    pub mse_oracle: f64,
    /// `|beta_hat_lambda - beta|^2` per lambda.
    pub beta_error_curve: Vec<f64>,
    /// Effect prediction error on the treated units per lambda; the
    /// reference curve for the curve regressions.
    pub oracle_curve: Vec<f64>,
    pub methods: Vec<MethodRecord>,
    pub failures: Vec<MethodFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub reps: usize,
    pub mean_curve: Vec<f64>,
    /// `None` when the oracle curve is constant or no repetition succeeded.
    pub fit: Option<CurveFit>,
    /// Quartiles `[q1, median, q3]` of the relative MSE.
    pub relative_mse_quartiles: [f64; 3],
    pub infinite_relative_mse: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingSummary {
    pub setting: Setting,
    pub completed_reps: usize,
    pub failed_reps: usize,
    pub mean_oracle_curve: Vec<f64>,
    pub methods: Vec<MethodSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub reps: Vec<RepRecord>,
    pub summaries: Vec<SettingSummary>,
}

impl ExperimentResult {
    pub fn summary(&self, setting: Setting, method: Method) -> Option<&MethodSummary> {
        self.summaries
            .iter()
            .find(|s| s.setting == setting)?
            .methods
            .iter()
            .find(|m| m.method == method)
    }
}

fn position<T: PartialEq>(all: &[T], x: &T) -> u64 {
    all.iter().position(|a| a == x).expect("listed") as u64
}

/// Seed of one repetition; independent of which other settings run.
pub fn rep_seed(seed: u64, setting: Setting, rep: usize) -> u64 {
    derive_seed(derive_seed(seed, position(&Setting::ALL, &setting)), rep as u64)
}

fn run_rep(cfg: &ExperimentConfig, setting: Setting, rep: usize) -> RepRecord {
    let seed = rep_seed(cfg.seed, setting, rep);
    let mut record = RepRecord {
        setting,
        rep,
        seed,
        error: None,
        oracle_lambda_index: 0,
        mse_oracle: f64::NAN,
        beta_error_curve: Vec::new(),
        oracle_curve: Vec::new(),
        methods: Vec::new(),
        failures: Vec::new(),
    };
    if let Err(e) = fill_rep(cfg, &mut record) {
        warn!("setting {setting} rep {rep} failed: {e}");
        record.error = Some(e.to_string());
        record.methods.clear();
    }
    record
}

fn fill_rep(cfg: &ExperimentConfig, record: &mut RepRecord) -> Result<()> {
    let setting = record.setting;
    let mut scenario = setting.config(cfg.n, derive_seed(record.seed, 0));
    scenario.snr_target = cfg.snr;
    let (d, truth) = generate_scenario(&scenario)?;
    let path = fit_joint_lasso(&d, &cfg.lambdas)?;
    let curve = beta_error_curve(&path, &truth)?;
    let (best, mse_oracle) = oracle_mse(&path, &truth)?;
    record.oracle_lambda_index = best;
    record.mse_oracle = mse_oracle;
    record.beta_error_curve = curve.clone();
    record.oracle_curve = tau_error_curve(&path, &truth, &d)?;
    for &method in &cfg.methods {
        let mcfg = MethodConfig {
            method,
            spec: cfg.spec,
            forest: cfg.forest.clone(),
            k_folds: cfg.k_folds.unwrap_or(scenario.k_folds),
            seed: derive_seed(record.seed, 1 + position(&Method::ALL, &method)),
        };
        let report = match cross_validate_lasso(&d, &cfg.lambdas, &mcfg) {
            Ok(r) => r,
            Err(e) => {
                warn!("setting {setting} rep {} method {method} failed: {e}", record.rep);
                record.failures.push(MethodFailure {
                    method,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let l = select_lambda(&cfg.lambdas, &report.errors)?;
        let rel = relative_mse(curve[l], mse_oracle);
        record.methods.push(MethodRecord {
            method,
            lambda_index: l,
            lambda: cfg.lambdas[l],
            mse: curve[l],
            relative_mse: (!rel.flagged || rel.value.is_finite()).then_some(rel.value),
            flagged: rel.flagged,
            validation_curve: report.errors,
            flagged_folds: report.flagged,
        });
    }
    Ok(())
}

/// Run every repetition of every setting. Repetitions run in parallel on
/// the current rayon pool; records keep the (setting, rep) order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let tasks: Vec<(Setting, usize)> = cfg
        .settings
        .iter()
        .flat_map(|&s| (0..cfg.reps).map(move |r| (s, r)))
        .collect();
    info!("running {} repetitions", tasks.len());
    let reps: Vec<RepRecord> = tasks.par_iter().map(|&(s, r)| run_rep(cfg, s, r)).collect();
    let summaries = cfg.settings.iter().map(|&s| summarize(cfg, s, &reps)).collect();
    Ok(ExperimentResult {
        config: cfg.clone(),
        reps,
        summaries,
    })
}

fn mean_curve<'a>(curves: impl Iterator<Item = &'a Vec<f64>>, len: usize) -> Vec<f64> {
    let mut sum = vec![0.0; len];
    let mut count = 0usize;
    for c in curves {
        sum.iter_mut().zip(c).for_each(|(s, v)| *s += v);
        count += 1;
    }
    sum.iter().map(|s| if count == 0 { f64::NAN } else { s / count as f64 }).collect()
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (sorted[h.floor() as usize], sorted[h.ceil() as usize]);
    if lo == hi {
        lo
    } else {
        lo + (h - h.floor()) * (hi - lo)
    }
}

fn summarize(cfg: &ExperimentConfig, setting: Setting, reps: &[RepRecord]) -> SettingSummary {
    let done: Vec<&RepRecord> = reps.iter().filter(|r| r.setting == setting && r.error.is_none()).collect();
    let failed = reps.iter().filter(|r| r.setting == setting && r.error.is_some()).count();
    let len = cfg.lambdas.len();
    let oracle = mean_curve(done.iter().map(|r| &r.oracle_curve), len);
    let methods = cfg
        .methods
        .iter()
        .map(|&method| {
            let recs: Vec<&MethodRecord> = done
                .iter()
                .flat_map(|r| r.methods.iter().filter(|m| m.method == method))
                .collect();
            let curve = mean_curve(recs.iter().map(|m| &m.validation_curve), len);
            let fit = curve_regression(&curve, &oracle).ok();
            let mut rel: Vec<f64> = recs
                .iter()
                .map(|m| m.relative_mse.unwrap_or(f64::INFINITY))
                .collect();
            rel.sort_by(f64::total_cmp);
            MethodSummary {
                method,
                reps: recs.len(),
                mean_curve: curve,
                fit,
                relative_mse_quartiles: [quantile(&rel, 0.25), quantile(&rel, 0.5), quantile(&rel, 0.75)],
                infinite_relative_mse: rel.iter().filter(|v| v.is_infinite()).count(),
            }
        })
        .collect();
    SettingSummary {
        setting,
        completed_reps: done.len(),
        failed_reps: failed,
        mean_oracle_curve: oracle,
        methods,
    }
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        v.to_string()
    }
}

/// `setting,lambda,oracle,<method>...`, one row per setting and lambda.
pub fn curves_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("setting,lambda,oracle");
    for m in &result.config.methods {
        write!(out, ",{m}").unwrap();
    }
    out.push('\n');
    for s in &result.summaries {
        for (l, lambda) in result.config.lambdas.iter().enumerate() {
            write!(out, "{},{},{}", s.setting, lambda, fmt_f64(s.mean_oracle_curve[l])).unwrap();
            for m in &s.methods {
                write!(out, ",{}", fmt_f64(m.mean_curve[l])).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

/// One row per setting and method.
pub fn summary_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("setting,method,reps,slope,intercept,r_squared,rel_mse_q1,rel_mse_median,rel_mse_q3,infinite\n");
    for s in &result.summaries {
        for m in &s.methods {
            let (slope, icpt, r2) = m
                .fit
                .map_or(("NA".into(), "NA".into(), "NA".into()), |f| {
                    (fmt_f64(f.slope), fmt_f64(f.intercept), fmt_f64(f.r_squared))
                });
            let [q1, q2, q3] = m.relative_mse_quartiles.map(fmt_f64);
            writeln!(
                out,
                "{},{},{},{slope},{icpt},{r2},{q1},{q2},{q3},{}",
                s.setting, m.method, m.reps, m.infinite_relative_mse
            )
            .unwrap();
        }
    }
    out
}

/// Line plot of the mean curves of each setting against `log2(lambda)`,
/// each shifted to start at the oracle curve's first value.
pub fn curves_svg(result: &ExperimentResult) -> String {
    const W: f64 = 360.0;
    const H: f64 = 240.0;
    const PAD: f64 = 30.0;
    const COLORS: [&str; 6] = ["#000000", "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];
    let xs: Vec<f64> = result.config.lambdas.iter().map(|l| l.log2()).collect();
    let (xmin, xmax) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let panels = result.summaries.len().max(1) as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n",
        W * panels,
        H + 20.0 * (result.config.methods.len() + 1) as f64
    );
    for (k, s) in result.summaries.iter().enumerate() {
        let x0 = W * k as f64;
        let start = s.mean_oracle_curve.first().copied().unwrap_or(0.0);
        let mut curves: Vec<(String, Vec<f64>)> = vec![("oracle".into(), s.mean_oracle_curve.clone())];
        for m in &s.methods {
            let shift = start - m.mean_curve.first().copied().unwrap_or(0.0);
            curves.push((m.method.to_string(), m.mean_curve.iter().map(|v| v + shift).collect()));
        }
        let finite = curves.iter().flat_map(|(_, c)| c.iter().copied()).filter(|v| v.is_finite());
        let (ymin, ymax) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
        let sx = |x: f64| x0 + PAD + (x - xmin) / (xmax - xmin).max(1e-12) * (W - 2.0 * PAD);
        let sy = |y: f64| H - PAD - (y - ymin) / (ymax - ymin).max(1e-12) * (H - 2.0 * PAD);
        writeln!(svg, "<text x=\"{}\" y=\"16\">setting {}</text>", x0 + PAD, s.setting).unwrap();
        for (c, (name, curve)) in curves.iter().enumerate() {
            let pts: Vec<String> = xs
                .iter()
                .zip(curve)
                .filter(|(_, y)| y.is_finite())
                .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let color = COLORS[c % COLORS.len()];
            writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{color}\" points=\"{}\"/>",
                pts.join(" ")
            )
            .unwrap();
            if k == 0 {
                writeln!(
                    svg,
                    "<text x=\"{PAD}\" y=\"{}\" fill=\"{color}\">{name}</text>",
                    H + 20.0 * (c + 1) as f64
                )
                .unwrap();
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write `results.json`, `curves.csv`, `summary.csv` and optionally
/// `curves.svg` into `dir`.
pub fn write_outputs(result: &ExperimentResult, dir: &Path, svg: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: &str| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(path, e))
    };
    write("results.json", &(serde_json::to_string_pretty(result)? + "\n"))?;
    write("curves.csv", &curves_csv(result))?;
    write("summary.csv", &summary_csv(result))?;
    if svg {
        write("curves.svg", &curves_svg(result))?;
    }
    Ok(())
}

/// `lambda,alpha_0..alpha_p,beta_0..beta_p`, one row per lambda.
pub fn coefficients_csv(path: &LassoPath) -> String {
    let p = path.p();
    let mut out = String::from("lambda");
    for name in ["alpha", "beta"] {
        for j in 0..=p {
            write!(out, ",{name}_{j}").unwrap();
        }
    }
    out.push('\n');
    for l in 0..path.len() {
        write!(out, "{}", path.lambdas[l]).unwrap();
        for v in path.alpha[l].iter().chain(&path.beta[l]) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Propensity;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn truth(beta: Vec<f64>) -> Truth {
        Truth {
            alpha: vec![0.0; beta.len()],
            beta,
            delta: 0.0,
            sigma: 1.0,
            kappa: 2.0,
            propensity: Propensity::Constant { value: 0.5 },
            potential0: None,
            potential1: None,
        }
    }

    fn path(betas: Vec<Vec<f64>>) -> LassoPath {
        let n = betas.len();
        LassoPath {
            lambdas: (0..n).map(|i| 1.0 / (i + 1) as f64).collect(),
            alpha: vec![vec![0.0; betas[0].len()]; n],
            beta: betas,
        }
    }

    #[test]
    fn oracle_examples() {
        let t = truth(vec![1.0, -1.0, 1.0]);
        let p = path(vec![vec![0.0; 3], vec![1.0, -1.0, 1.0], vec![1.0, -1.0, 1.0]]);
        assert_eq!(oracle_mse(&p, &t).unwrap(), (1, 0.0));
        let zeros = path(vec![vec![0.0; 3]; 4]);
        let (l, v) = oracle_mse(&zeros, &t).unwrap();
        assert_eq!((l, v), (0, 3.0));
    }

    #[test]
    fn oracle_matches_recomputation() {
        let mut rng = rng_from_seed(1);
        for _ in 0..50 {
            let beta: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let betas: Vec<Vec<f64>> = (0..8).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let t = truth(beta.clone());
            let p = path(betas.clone());
            let sweep: Vec<f64> = betas
                .iter()
                .map(|b| (0..4).map(|j| (b[j] - beta[j]) * (b[j] - beta[j])).sum())
                .collect();
            let min = sweep.iter().copied().fold(f64::INFINITY, f64::min);
            let (l, v) = oracle_mse(&p, &t).unwrap();
            assert_eq!(v, min);
            assert_eq!(sweep[l], min);
            assert_eq!(beta_error_curve(&p, &t).unwrap(), sweep);
        }
    }

    #[test]
    fn selection_ties_go_to_smaller_lambda() {
        let grid = [1.0, 0.5, 0.25, 0.125];
        assert_eq!(select_lambda(&grid, &[3.0, 1.0, 1.0, 2.0]).unwrap(), 2);
        assert_eq!(select_lambda(&[0.1, 0.2], &[1.0, 1.0]).unwrap(), 0);
        assert!(select_lambda(&grid, &[1.0]).is_err());
    }

    #[test]
    fn relative_mse_examples() {
        assert_eq!(relative_mse(1.5, 1.5).value, 0.0);
        assert!((relative_mse(std::f64::consts::E * 2.0, 2.0).value - 1.0).abs() < 1e-15);
        assert!((relative_mse(2.0, 0.5).value - 4f64.ln()).abs() < 1e-15);
        let z = relative_mse(1.0, 0.0);
        assert!(z.flagged && z.value == f64::INFINITY);
    }

    #[test]
    fn regression_examples() {
        let o = [1.0, 2.0, 4.0, 7.0];
        let f = curve_regression(&o, &o).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12 && (f.r_squared - 1.0).abs() < 1e-12);
        let v: Vec<f64> = o.iter().map(|x| 2.0 * x + 5.0).collect();
        let f = curve_regression(&v, &o).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 5.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!(matches!(curve_regression(&o, &[1.0; 4]), Err(Error::Degenerate(_))));
        assert!(curve_regression(&o[..2], &o[..2]).is_err());
    }

    #[test]
    fn regression_matches_normal_equations() {
        let mut rng = rng_from_seed(2);
        let o: Vec<f64> = (0..11).map(|i| i as f64 * 0.3 + rng.random_range(0.0..0.1)).collect();
        let v: Vec<f64> = o.iter().map(|x| 0.8 * x + 2.0 + rng.random_range(-0.2..0.2)).collect();
        // Solve [n sx; sx sxx] [a; b] = [sy; sxy] with nalgebra.
        let n = o.len() as f64;
        let (sx, sy) = (o.iter().sum::<f64>(), v.iter().sum::<f64>());
        let sxx: f64 = o.iter().map(|x| x * x).sum();
        let sxy: f64 = o.iter().zip(&v).map(|(x, y)| x * y).sum();
        let a = nalgebra::Matrix2::new(n, sx, sx, sxx);
        let sol = a.lu().solve(&nalgebra::Vector2::new(sy, sxy)).unwrap();
        let f = curve_regression(&v, &o).unwrap();
        assert!((f.intercept - sol[0]).abs() < 1e-10);
        assert!((f.slope - sol[1]).abs() < 1e-10);
        let rss: f64 = o.iter().zip(&v).map(|(x, y)| (y - sol[0] - sol[1] * x).powi(2)).sum();
        let tss: f64 = v.iter().map(|y| (y - sy / n).powi(2)).sum();
        assert!((f.r_squared - (1.0 - rss / tss)).abs() < 1e-10);
    }

    #[test]
    fn quantiles() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5), 3.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.25), 1.25);
        assert_eq!(quantile(&[1.0, f64::INFINITY, f64::INFINITY], 0.75), f64::INFINITY);
        assert!(quantile(&[], 0.5).is_nan());
    }

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            settings: vec![Setting::I],
            methods: vec![Method::Combo, Method::Prd],
            reps: 2,
            seed: 3,
            n: 80,
            forest: ForestParams {
                n_trees: 30,
                ..ForestParams::default()
            },
            k_folds: Some(4),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn tiny_experiment_is_deterministic() {
        let cfg = tiny();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.reps.len(), 2);
        for r in &a.reps {
            assert!(r.error.is_none());
            assert_eq!(r.oracle_curve.len(), 20);
            assert_eq!(r.beta_error_curve.len(), 20);
            for m in &r.methods {
                assert!(r.mse_oracle <= m.mse);
                assert!(m.relative_mse.unwrap() >= 0.0);
            }
        }
        let s = a.summary(Setting::I, Method::Combo).unwrap();
        assert_eq!(s.mean_curve.len(), 20);
        assert_eq!(summary_csv(&a).lines().count(), 3);
        assert_eq!(curves_csv(&a).lines().count(), 21);
        assert!(curves_svg(&a).contains("<polyline"));
    }

    #[test]
    fn oracle_selector_has_zero_relative_mse() {
        let cfg = tiny();
        let r = run_experiment(&cfg).unwrap();
        for rep in &r.reps {
            let l = select_lambda(&cfg.lambdas, &rep.beta_error_curve).unwrap();
            let v = relative_mse(rep.beta_error_curve[l], rep.mse_oracle);
            assert_eq!(v.value, 0.0);
        }
    }

    #[test]
    fn failed_reps_are_recorded() {
        let mut cfg = tiny();
        cfg.k_folds = Some(1000);
        let r = run_experiment(&cfg).unwrap();
        for rep in &r.reps {
            assert!(rep.methods.is_empty());
            assert_eq!(rep.failures.len(), 2);
        }
        assert_eq!(r.summaries[0].methods[0].reps, 0);
        assert!(r.summaries[0].methods[0].fit.is_none());
    }

    #[test]
    fn coefficients_table() {
        let p = path(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let csv = coefficients_csv(&p);
        assert_eq!(csv.lines().next().unwrap(), "lambda,alpha_0,alpha_1,beta_0,beta_1");
        assert_eq!(csv.lines().nth(2).unwrap(), "0.5,0,0,3,4");
    }
}
