use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use hte_match::assess::{cross_validate_lasso, Method, MethodConfig};
use hte_match::data::{load_covariate_table, load_dataset, save_dataset, split_by_treatment, Schema};
use hte_match::distance::{mahalanobis_matrix, proximity_for_dataset, semi_oracle_matrix, DistanceMatrix};
use hte_match::flow::{solve, Objective};
use hte_match::forest::{fit_forest, ForestParams};
use hte_match::harness::{coefficients_csv, run_experiment, simulation_lambdas, write_outputs, ExperimentConfig};
use hte_match::lasso::{default_lambdas, fit_joint_lasso};
use hte_match::prune::prune;
use hte_match::synth::{generate_from_features, generate_scenario, Setting, DEFAULT_N, DEFAULT_SNR};
use hte_match::{Dataset, Match, MatchSpec, Pair, Truth};

#[derive(Debug, Parser)]
#[command(name = "hte-match", version, about = "Assess heterogeneous treatment effect estimators by optimal matching")]
#[command(args_override_self = true)]
struct Cli {
    /// JSON object whose keys are long flag names of the chosen subcommand.
    /// Flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Run on a single worker thread.
    #[arg(long, global = true)]
    serial: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its truth.
    Simulate(SimulateArgs),
    /// Distance matrices, optimal matches and pruning.
    #[command(subcommand)]
    Match(MatchCommand),
    /// Cross-validate the joint LASSO along a lambda grid.
    Cv(CvArgs),
    /// Run the simulation study.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_parser = parse_setting, default_value = "I")]
    setting: Setting,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_N)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_SNR)]
    snr: f64,
    /// Draw covariates from the rows of a numeric CSV table instead.
    #[arg(long, value_name = "CSV")]
    from_features: Option<PathBuf>,
    /// Fraction of table rows sampled with `--from-features`.
    #[arg(long, default_value_t = 1.0)]
    frac: f64,
    /// Dataset CSV (standard output when absent).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Truth JSON.
    #[arg(long)]
    truth_out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum MatchCommand {
    /// Optimal match under a multiplicity specification.
    Solve(SolveArgs),
    /// Prune a pair file to star components.
    Prune(PruneArgs),
    /// Compute a treated x control distance matrix.
    ExportDistance(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DistanceChoice {
    Proximity,
    Mahalanobis,
    SemiOracle,
}

#[derive(Debug, Args)]
struct ForestArgs {
    /// Trees in the control-only forest.
    #[arg(long, default_value_t = 500)]
    trees: usize,
    #[arg(long, default_value_t = 5)]
    min_leaf: usize,
}

impl ForestArgs {
    fn params(&self, seed: u64) -> ForestParams {
        ForestParams {
            n_trees: self.trees,
            min_leaf: self.min_leaf,
            seed,
            ..ForestParams::default()
        }
    }
}

#[derive(Debug, Args)]
struct SpecArgs {
    /// Minimum matches per treated unit.
    #[arg(long = "min-treated", default_value_t = 1)]
    min_treated: usize,
    /// Minimum matches per control unit.
    #[arg(long = "min-control", default_value_t = 1)]
    min_control: usize,
    /// Maximum matches per treated unit.
    #[arg(long = "max-treated", default_value_t = 2)]
    max_treated: usize,
    /// Maximum matches per control unit.
    #[arg(long = "max-control", default_value_t = 2)]
    max_control: usize,
}

impl SpecArgs {
    fn spec(&self) -> Result<MatchSpec> {
        Ok(MatchSpec::new(self.min_treated, self.min_control, self.max_treated, self.max_control)?)
    }
}

#[derive(Debug, Args)]
struct SolveArgs {
    /// Distance matrix CSV.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    distance: Option<PathBuf>,
    /// Dataset CSV; the distance is computed with `--kind`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "proximity")]
    kind: DistanceChoice,
    #[arg(long, value_parser = parse_objective, default_value = "avg")]
    objective: Objective,
    #[command(flatten)]
    spec: SpecArgs,
    /// Prune the optimal match to star components.
    #[arg(long)]
    prune: bool,
    #[command(flatten)]
    forest: ForestArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pair CSV (standard output when absent).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PruneArgs {
    /// Pair CSV with columns `treated_id,control_id,distance`.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "proximity")]
    kind: DistanceChoice,
    /// Truth JSON (semi-oracle distance only).
    #[arg(long)]
    truth: Option<PathBuf>,
    #[command(flatten)]
    forest: ForestArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_method, default_value = "combo")]
    method: Method,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Comma-separated descending grid, or `default`.
    #[arg(long, default_value = "default")]
    lambdas: String,
    #[command(flatten)]
    spec: SpecArgs,
    #[command(flatten)]
    forest: ForestArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-lambda error CSV (standard output when absent).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Also write the full-data LASSO path coefficients.
    #[arg(long)]
    coef_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Comma-separated settings.
    #[arg(long, default_value = "I,II,III,IV,V")]
    settings: String,
    /// Comma-separated methods.
    #[arg(long, default_value = "prd,cvr,full,S-M,combo")]
    methods: String,
    #[arg(long, default_value_t = 200)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_N)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_SNR)]
    snr: f64,
    /// Comma-separated descending grid, or `default`.
    #[arg(long, default_value = "default")]
    lambdas: String,
    /// Override the per-setting fold count.
    #[arg(long)]
    folds: Option<usize>,
    #[command(flatten)]
    spec: SpecArgs,
    #[command(flatten)]
    forest: ForestArgs,
    /// Also write curves.svg.
    #[arg(long)]
    svg: bool,
    /// Output directory.
    #[arg(long, short, default_value = "results")]
    out: PathBuf,
}

fn parse_setting(s: &str) -> std::result::Result<Setting, String> {
    s.parse().map_err(|e: hte_match::Error| e.to_string())
}

fn parse_objective(s: &str) -> std::result::Result<Objective, String> {
    s.parse().map_err(|e: hte_match::Error| e.to_string())
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: hte_match::Error| e.to_string())
}

fn parse_list<T>(s: &str, f: fn(&str) -> std::result::Result<T, String>) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| f(t).map_err(anyhow::Error::msg))
        .collect()
}

fn parse_lambdas(s: &str, default: fn() -> Vec<f64>) -> Result<Vec<f64>> {
    if s.trim() == "default" {
        return Ok(default());
    }
    let grid: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad lambda {t:?}")))
        .collect::<Result<_>>()?;
    if grid.is_empty() || grid.iter().any(|l| !(*l > 0.0)) || grid.windows(2).any(|w| w[1] >= w[0]) {
        bail!("lambdas must be positive and strictly descending");
    }
    Ok(grid)
}

/// Where `--config` keys are spliced in: right after the subcommand path.
fn subcommand_end(args: &[String]) -> Option<usize> {
    let top = args.iter().position(|a| matches!(a.as_str(), "simulate" | "match" | "cv" | "experiment"))?;
    if args[top] == "match" {
        let sub = args[top + 1..]
            .iter()
            .position(|a| matches!(a.as_str(), "solve" | "prune" | "export-distance"))?;
        return Some(top + 1 + sub + 1);
    }
    Some(top + 1)
}

fn config_path(args: &[String]) -> Option<PathBuf> {
    args.iter().enumerate().find_map(|(i, a)| {
        if let Some(v) = a.strip_prefix("--config=") {
            Some(PathBuf::from(v))
        } else if a == "--config" {
            args.get(i + 1).map(PathBuf::from)
        } else {
            None
        }
    })
}

fn config_flags(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let map: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&text).with_context(|| format!("{} must hold a JSON object", path.display()))?;
    let mut out = Vec::new();
    for (key, value) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        let scalar = |v: &serde_json::Value| match v {
            serde_json::Value::String(s) => Ok(s.clone()),
            serde_json::Value::Number(n) => Ok(n.to_string()),
            other => bail!("config key {key:?}: unsupported value {other}"),
        };
        match &value {
            serde_json::Value::Bool(true) => out.push(flag),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::Array(items) => {
                let parts: Vec<String> = items.iter().map(scalar).collect::<Result<_>>()?;
                out.push(flag);
                out.push(parts.join(","));
            }
            v => {
                out.push(flag);
                out.push(scalar(v)?);
            }
        }
    }
    Ok(out)
}

fn expand_args(args: Vec<String>) -> Result<Vec<String>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let Some(at) = subcommand_end(&args) else {
        return Ok(args);
    };
    let mut out = args[..at].to_vec();
    out.extend(config_flags(&path)?);
    out.extend_from_slice(&args[at..]);
    Ok(out)
}

fn sink(path: Option<&Path>) -> Result<Box<dyn std::io::Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    let mut w = sink(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset> {
    load_dataset(path, &Schema::default()).with_context(|| format!("loading {}", path.display()))
}

fn distance_for(d: &Dataset, kind: DistanceChoice, forest: &ForestArgs, seed: u64, truth: Option<&Path>) -> Result<DistanceMatrix> {
    Ok(match kind {
        DistanceChoice::Proximity => {
            let (_, c) = split_by_treatment(d);
            let controls = d.subset(&c);
            let f = fit_forest(controls.x(), controls.y(), &forest.params(seed))?;
            proximity_for_dataset(&f, d)?
        }
        DistanceChoice::Mahalanobis => mahalanobis_matrix(d)?,
        DistanceChoice::SemiOracle => {
            let path = truth.context("--truth is required for the semi-oracle distance")?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let t: Truth = serde_json::from_str(&text)?;
            semi_oracle_matrix(&t, d, None)?
        }
    })
}

fn pairs_csv(m: &Match, d: &DistanceMatrix) -> String {
    let mut out = String::from("treated_id,control_id,distance\n");
    for p in m.pairs() {
        out.push_str(&format!(
            "{},{},{}\n",
            d.treated_ids()[p.treated],
            d.control_ids()[p.control],
            p.distance
        ));
    }
    out
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let mut cfg = a.setting.config(a.n, a.seed);
    cfg.snr_target = a.snr;
    let (d, truth) = match &a.from_features {
        Some(path) => {
            let table = load_covariate_table(path).with_context(|| format!("loading {}", path.display()))?;
            generate_from_features(&table, a.frac, &cfg)?
        }
        None => generate_scenario(&cfg)?,
    };
    info!("generated {} units ({} treated)", d.n(), d.w().iter().filter(|&&w| w).count());
    match &a.out {
        Some(p) => save_dataset(&d, p)?,
        None => {
            let mut out = std::io::stdout().lock();
            hte_match::data::write_dataset(&d, &mut out)?;
        }
    }
    if let Some(p) = &a.truth_out {
        write_text(Some(p), &(serde_json::to_string_pretty(&truth)? + "\n"))?;
    }
    Ok(())
}

fn cmd_solve(a: &SolveArgs) -> Result<()> {
    let spec = a.spec.spec()?;
    let d = match (&a.distance, &a.data) {
        (Some(p), _) => DistanceMatrix::load(p).with_context(|| format!("loading {}", p.display()))?,
        (None, Some(p)) => distance_for(&load_data(p)?, a.kind, &a.forest, a.seed, None)?,
        (None, None) => bail!("one of --distance or --data is required"),
    };
    let sol = solve(&d, &spec, a.objective)?;
    let m = if a.prune { prune(&sol.matching) } else { sol.matching };
    info!(
        "{} pairs, total {}, average {}",
        m.len(),
        m.total_distance(),
        m.average_distance().map_or("undefined".into(), |v| v.to_string())
    );
    write_text(a.out.as_deref(), &pairs_csv(&m, &d))
}

fn cmd_prune(a: &PruneArgs) -> Result<()> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&a.pairs)
        .with_context(|| format!("reading {}", a.pairs.display()))?;
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["treated_id", "control_id", "distance"] {
        bail!("pair CSV header must be treated_id,control_id,distance");
    }
    let mut t_ids: HashMap<String, usize> = HashMap::new();
    let mut c_ids: HashMap<String, usize> = HashMap::new();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let distance: f64 = rec[2].parse().with_context(|| format!("row {}: bad distance {:?}", i + 1, &rec[2]))?;
        let n_t = t_ids.len();
        let t = *t_ids.entry(rec[0].to_string()).or_insert(n_t);
        let n_c = c_ids.len();
        let c = *c_ids.entry(rec[1].to_string()).or_insert(n_c);
        rows.push((rec[0].to_string(), rec[1].to_string(), rec[2].to_string(), Pair { treated: t, control: c, distance }));
    }
    let m = Match::new(t_ids.len(), c_ids.len(), rows.iter().map(|r| r.3).collect())?;
    let kept = prune(&m);
    info!("pruned {} of {} pairs", m.len() - kept.len(), m.len());
    let mut out = String::from("treated_id,control_id,distance\n");
    for (t, c, dist, p) in &rows {
        if kept.contains(p.treated, p.control) {
            out.push_str(&format!("{t},{c},{dist}\n"));
        }
    }
    write_text(a.out.as_deref(), &out)
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let d = load_data(&a.data)?;
    let dist = distance_for(&d, a.kind, &a.forest, a.seed, a.truth.as_deref())?;
    let mut w = sink(a.out.as_deref())?;
    dist.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_cv(a: &CvArgs) -> Result<()> {
    let d = load_data(&a.data)?;
    let lambdas = parse_lambdas(&a.lambdas, default_lambdas)?;
    let cfg = MethodConfig {
        method: a.method,
        spec: a.spec.spec()?,
        forest: a.forest.params(0),
        k_folds: a.folds,
        seed: a.seed,
    };
    let report = cross_validate_lasso(&d, &lambdas, &cfg)?;
    if !report.flagged.is_empty() {
        warn!("folds without validation data: {:?}", report.flagged);
    }
    let mut out = String::from("lambda,error\n");
    for (l, e) in report.lambdas.iter().zip(&report.errors) {
        out.push_str(&format!("{l},{e}\n"));
    }
    write_text(a.out.as_deref(), &out)?;
    if let Some(p) = &a.coef_out {
        write_text(Some(p), &coefficients_csv(&fit_joint_lasso(&d, &lambdas)?))?;
    }
    Ok(())
}

fn cmd_experiment(a: &ExperimentArgs) -> Result<()> {
    let cfg = ExperimentConfig {
        settings: parse_list(&a.settings, parse_setting)?,
        methods: parse_list(&a.methods, parse_method)?,
        reps: a.reps,
        seed: a.seed,
        n: a.n,
        snr: a.snr,
        lambdas: parse_lambdas(&a.lambdas, simulation_lambdas)?,
        spec: a.spec.spec()?,
        forest: a.forest.params(0),
        k_folds: a.folds,
    };
    let result = run_experiment(&cfg)?;
    let failed: usize = result.summaries.iter().map(|s| s.failed_reps).sum();
    if failed > 0 {
        warn!("{failed} repetitions failed; see results.json");
    }
    write_outputs(&result, &a.out, a.svg)?;
    info!("wrote results to {}", a.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let threads = if cli.serial { Some(1) } else { cli.jobs };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring worker threads")?;
    }
    info!("resolved configuration: {cli:?}");
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Match(MatchCommand::Solve(a)) => cmd_solve(a),
        Command::Match(MatchCommand::Prune(a)) => cmd_prune(a),
        Command::Match(MatchCommand::ExportDistance(a)) => cmd_export(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}

fn main() -> ExitCode {
    let args = match expand_args(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    let level = if cli.quiet {
        "error"
    } else {
        match cli.verbose {
            0 => "info",
            1 => "debug",
            _ => "trace",
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
