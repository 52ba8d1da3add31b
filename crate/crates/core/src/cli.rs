//! Experiment configuration, runs over seeds, evaluation against oracles, and the
//! `dpnets` command-line front end.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{save_params, Activation, FeatureMap, Features, Mlp, MlpSpec};
use crate::ndcore::Matrix;
use crate::regression::{write_eigenvalues_csv, GeneratorModel, Model, TransferModel};
use crate::scores::ScoreKind;
use crate::systems::{
    spectral_error, truncated_projection_score, Dataset, Langevin, LangevinOracle, LinearSystem, LogisticMap,
    LogisticOracle, SystemSpec,
};
use crate::trainer::{train, train_generator, AbortReport, FeaturePair, TrainConfig, TrainReport};

pub const DEFAULT_GRID: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    SpectralError,
    OptimalityGap,
    EigenvalueError,
    ImpliedTimescales,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSpec {
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    /// Number of leading eigenvalues compared against the oracle.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Truncation rank for the optimality gap.
    #[serde(default = "default_top_k")]
    pub gap_rank: usize,
    #[serde(default = "default_grid")]
    pub grid: usize,
    /// Forecast horizons written alongside the model.
    #[serde(default)]
    pub horizons: Vec<usize>,
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::SpectralError, Metric::OptimalityGap, Metric::EigenvalueError, Metric::ImpliedTimescales]
}

fn default_top_k() -> usize {
    3
}

fn default_grid() -> usize {
    DEFAULT_GRID
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        EvaluationSpec {
            metrics: default_metrics(),
            top_k: default_top_k(),
            gap_rank: default_top_k(),
            grid: default_grid(),
            horizons: Vec::new(),
        }
    }
}

/// Everything a run needs, read from a JSON document. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSpec,
    /// Trajectory length (number of pairs).
    #[serde(default = "default_samples")]
    pub samples: usize,
    pub features: MlpSpec,
    /// Architecture of `ψ'` when untied; defaults to that of `ψ`.
    #[serde(default)]
    pub features_next: Option<MlpSpec>,
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluation: EvaluationSpec,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_samples() -> usize {
    1 << 14
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    /// Logistic-map protocol: 2^14 points, batch 2^13, 500 epochs, LeakyReLU
    /// 64-128-64 with `r = 7`, `γ = 1`, learning rate 1e-4.
    pub fn logistic(score: ScoreKind) -> ExperimentConfig {
        let mut train = TrainConfig::new(score, 1 << 13, 500, 1e-4);
        train.gamma = 1.0;
        ExperimentConfig {
            system: SystemSpec::Logistic(LogisticMap::default()),
            samples: 1 << 14,
            features: MlpSpec::new(1, &[64, 128, 64, 7], Activation::LeakyRelu, 0),
            features_next: None,
            train,
            evaluation: EvaluationSpec::default(),
            output_dir: None,
            seeds: (0..20).collect(),
        }
    }

    /// Generator training on the default double well from equilibrium samples.
    pub fn langevin() -> ExperimentConfig {
        let mut train = TrainConfig::new(ScoreKind::Generator, 1 << 13, 100, 1e-3);
        train.gamma = 1.0;
        train.tied = true;
        ExperimentConfig {
            system: SystemSpec::Langevin(Langevin::default()),
            samples: 100_000,
            features: MlpSpec::new(1, &[32, 32, 4], Activation::Celu, 0),
            features_next: None,
            train,
            evaluation: EvaluationSpec::default(),
            output_dir: None,
            seeds: (0..5).collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn is_generator(&self) -> bool {
        matches!(self.train.score, ScoreKind::Generator)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.train.validate()?;
        self.features.validate()?;
        if self.features.input_dim != self.system.dim() {
            return Err(Error::Config(format!(
                "feature input_dim {} differs from the system dimension {}",
                self.features.input_dim,
                self.system.dim()
            )));
        }
        if let Some(next) = &self.features_next {
            next.validate()?;
            if self.train.tied {
                return Err(Error::Config("features_next given for tied training".into()));
            }
            if next.input_dim != self.features.input_dim || next.output_dim() != self.features.output_dim() {
                return Err(Error::Config("features_next must match the input and output dimensions of features".into()));
            }
        }
        if self.samples < self.train.batch_size {
            return Err(Error::Config(format!(
                "samples ({}) must be at least the batch size ({})",
                self.samples, self.train.batch_size
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.evaluation.top_k == 0 || self.evaluation.gap_rank == 0 {
            return Err(Error::Config("top_k and gap_rank must be positive".into()));
        }
        if self.evaluation.grid < 256 {
            return Err(Error::Config(format!("oracle grid must be at least 256, got {}", self.evaluation.grid)));
        }
        if self.is_generator() {
            if !matches!(self.system, SystemSpec::Langevin(_)) {
                return Err(Error::Config("the generator score needs a Langevin system".into()));
            }
            if !self.train.tied {
                return Err(Error::Config("the generator score trains a single map; set train.tied".into()));
            }
            if let Some(a) = self.features.activations.iter().find(|a| matches!(a, Activation::LeakyRelu)) {
                return Err(Error::UnsupportedActivation(*a));
            }
            if self.evaluation.top_k >= self.features.output_dim() {
                return Err(Error::Config(format!(
                    "comparing {} nonzero generator modes needs at least {} features",
                    self.evaluation.top_k,
                    self.evaluation.top_k + 1
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the serialized config, defaults included.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    fn seeded_maps(&self, seed: u64) -> Result<FeaturePair> {
        let psi = Mlp::init_with_seed(&self.features, self.features.seed.wrapping_add(seed))?;
        if self.train.tied {
            return Ok(FeaturePair::tied(psi));
        }
        let spec = self.features_next.clone().unwrap_or_else(|| self.features.clone());
        let next = Mlp::init_with_seed(&spec, spec.seed.wrapping_add(seed).wrapping_add(1 << 32))?;
        Ok(FeaturePair::untied(psi, next))
    }
}

/// Exact reference for a system.
#[derive(Clone, Debug)]
pub enum Oracle {
    Logistic(LogisticOracle),
    Langevin(LangevinOracle),
    Linear(LinearSystem),
}

impl Oracle {
    pub fn build(system: &SystemSpec, grid: usize) -> Result<Oracle> {
        Ok(match system {
            SystemSpec::Logistic(s) => Oracle::Logistic(s.oracle(grid)?),
            SystemSpec::Langevin(s) => Oracle::Langevin(s.oracle(grid)?),
            SystemSpec::Linear(s) => Oracle::Linear(s.clone()),
        })
    }

    /// Leading `k` oracle eigenvalues: transfer-operator eigenvalues for maps, generator
    /// eigenvalues for diffusions.
    pub fn eigenvalues(&self, k: usize) -> Result<Vec<Complex64>> {
        match self {
            Oracle::Logistic(o) => Ok(o.eigenvalues.iter().take(k).copied().collect()),
            Oracle::Langevin(o) => Ok(o.eigenvalues.iter().take(k).map(|&l| Complex64::new(l, 0.0)).collect()),
            Oracle::Linear(s) => {
                if s.dim() != 1 {
                    return Err(Error::Config("closed-form spectra are available for scalar linear systems only".into()));
                }
                Ok((0..k).map(|i| Complex64::new(s.a[0].powi(i as i32), 0.0)).collect())
            }
        }
    }

    pub fn singular_values(&self, k: usize) -> Option<Vec<f64>> {
        match self {
            Oracle::Logistic(o) => Some(o.singular_values.iter().take(k).copied().collect()),
            Oracle::Linear(s) if s.dim() == 1 => Some((0..k).map(|i| s.a[0].abs().powi(i as i32)).collect()),
            _ => None,
        }
    }
}

/// Named scalar results of one run, in insertion order.
pub type Metrics = Vec<(String, f64)>;

/// Metrics of a fitted model against the oracle of its system.
pub fn evaluate_model(model: &Model, oracle: &Oracle, eval: &EvaluationSpec) -> Result<Metrics> {
    let mut out = Metrics::new();
    let spectral = model.spectral()?;
    let wants = |m: Metric| eval.metrics.contains(&m);
    match (model, oracle) {
        (Model::Transfer(m), Oracle::Logistic(o)) => {
            let rtol = m.rtol;
            if wants(Metric::SpectralError) {
                let compressed = o.compressed_eigenvalues(&m.features, rtol)?;
                out.push(("spectral_error".into(), spectral_error(&compressed, &o.eigenvalues, eval.top_k)));
                out.push(("spectral_error_fitted".into(), spectral_error(&spectral.eigenvalues, &o.eigenvalues, eval.top_k)));
            }
            if wants(Metric::OptimalityGap) {
                let next = m.features_next.as_ref().unwrap_or(&m.features);
                let cov = o.covariances(&m.features, next)?;
                let p = truncated_projection_score(&cov, eval.gap_rank, rtol)?;
                out.push(("optimality_gap".into(), o.top_singular_energy(eval.gap_rank) - p));
            }
        }
        (Model::Generator(_), Oracle::Langevin(o)) => {
            if wants(Metric::EigenvalueError) {
                let estimated = nonzero_generator_modes(&spectral.eigenvalues, eval.top_k);
                let reference = o.leading_nonzero(eval.top_k);
                if estimated.len() < reference.len() {
                    return Err(Error::Config(format!(
                        "model rank {} is too small to compare {} nonzero modes",
                        spectral.rank(),
                        eval.top_k
                    )));
                }
                let mut worst = 0.0_f64;
                for (i, (e, r)) in estimated.iter().zip(&reference).enumerate() {
                    let rel = (e - Complex64::new(*r, 0.0)).norm() / r.abs();
                    out.push((format!("eigenvalue_{}", i + 1), e.re));
                    worst = worst.max(rel);
                }
                out.push(("max_relative_eigenvalue_error".into(), worst));
            }
        }
        (Model::Transfer(m), Oracle::Linear(_)) if wants(Metric::SpectralError) || wants(Metric::EigenvalueError) => {
            let reference = oracle.eigenvalues(eval.top_k)?;
            out.push(("spectral_error_fitted".into(), spectral_error(&spectral.eigenvalues, &reference, m.rank().min(eval.top_k))));
        }
        _ => {}
    }
    if wants(Metric::ImpliedTimescales) {
        for (i, t) in model.implied_timescales(&spectral).iter().take(eval.top_k + 1).enumerate() {
            out.push((format!("implied_timescale_{i}"), *t));
        }
    }
    Ok(out)
}

/// Generator eigenvalues after dropping the one closest to zero, by descending real part.
pub fn nonzero_generator_modes(eigenvalues: &[Complex64], k: usize) -> Vec<Complex64> {
    let mut ev = eigenvalues.to_vec();
    if let Some(stationary) = (0..ev.len()).min_by(|&i, &j| ev[i].norm().total_cmp(&ev[j].norm())) {
        ev.remove(stationary);
    }
    ev.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    ev.truncate(k);
    ev
}

/// Result of training and fitting one seed.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub seed: u64,
    pub report: TrainReport,
    pub maps: FeaturePair,
    pub model: Model,
    pub metrics: Metrics,
}

/// Samples data, trains, fits the operator on the learned representation and
/// evaluates it. Deterministic in `(config, seed)`.
pub fn run_experiment(config: &ExperimentConfig, seed: u64, oracle: Option<&Oracle>) -> Result<RunOutcome> {
    config.validate()?;
    let data = config.system.sample_trajectory(config.samples, seed)?;
    let mut train_cfg = config.train.clone();
    train_cfg.seed = config.train.seed.wrapping_add(seed);
    let mut maps = config.seeded_maps(seed)?;
    let (report, model) = if config.is_generator() {
        let SystemSpec::Langevin(sde) = &config.system else { unreachable!("validated") };
        let report = train_generator(&data.x, sde, &mut maps.psi, &train_cfg)?;
        let mut model = GeneratorModel::fit(Features::Mlp(maps.psi.clone()), &data.x, sde, train_cfg.rtol)?;
        model.observables.push(crate::regression::Observable { name: "state".into(), values: data.x.transpose() });
        (report, Model::Generator(model))
    } else {
        let report = train(&data, None, &mut maps, &train_cfg)?;
        let mut model =
            TransferModel::fit(Features::Mlp(maps.psi.clone()), &data, train_cfg.rtol)?.with_lag_time(mean_lag(&config.system, &data));
        if let Some(next) = &maps.psi_next {
            model = model.with_features_next(Features::Mlp(next.clone()));
        }
        model.register_observable("state", data.y.transpose())?;
        (report, Model::Transfer(model))
    };
    let mut metrics = Metrics::new();
    if let Some(s) = report.final_score() {
        metrics.push(("final_score".into(), s.total));
    }
    if let Some(o) = oracle {
        metrics.extend(evaluate_model(&model, o, &config.evaluation)?);
    }
    Ok(RunOutcome { seed, report, maps, model, metrics })
}

fn mean_lag(system: &SystemSpec, data: &Dataset) -> f64 {
    match &data.lag {
        Some(l) if !l.is_empty() => l.iter().sum::<f64>() / l.len() as f64,
        _ => system.lag_time(),
    }
}

/// `metric,mean,std,runs` over the runs that produced each metric (sample std).
pub fn aggregate(runs: &[Metrics]) -> Vec<(String, f64, f64, usize)> {
    let mut order: Vec<String> = Vec::new();
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for (k, v) in run {
            if !values.contains_key(k) {
                order.push(k.clone());
            }
            values.entry(k.clone()).or_default().push(*v);
        }
    }
    order
        .into_iter()
        .map(|k| {
            let v = &values[&k];
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.iter().all(|x| *x == v[0]) {
                0.0
            } else {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            };
            (k, mean, var.sqrt(), v.len())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Command line

#[derive(Parser, Debug)]
#[command(name = "dpnets", version, about = "Learn projection-score representations of stochastic dynamics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train feature maps and fit operator models for every seed.
    Train(RunArgs),
    /// Write the oracle spectrum of a system and a grid-refinement report.
    Oracle(OracleArgs),
    /// Evaluate a saved model against the oracle of a system.
    Evaluate(EvaluateArgs),
    /// Forecast a registered observable from query states.
    Forecast(ForecastArgs),
    /// Run a protocol over seeds and report per-seed and aggregate metrics.
    Benchmark(BenchmarkArgs),
}

/// Inclusive seed range `A..B` (or a single seed).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    pub fn seeds(&self) -> Vec<u64> {
        (self.start..=self.end).collect()
    }
}

impl FromStr for SeedRange {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let parse = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("bad seed {t:?}: {e}"));
        let (start, end) = match s.split_once("..") {
            Some((a, b)) => (parse(a)?, parse(b.trim_start_matches('='))?),
            None => {
                let v = parse(s)?;
                (v, v)
            }
        };
        if end < start {
            return Err(format!("empty seed range {s}"));
        }
        Ok(SeedRange { start, end })
    }
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Inclusive range such as `0..19`; overrides the config seed list.
    #[arg(long)]
    pub seeds: Option<SeedRange>,
    #[arg(long)]
    pub overwrite: bool,
    /// Oracle grid used for evaluation.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub topk: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    /// Experiment config; defaults to a built-in preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in protocol: logistic-relaxed, logistic-projection or langevin.
    #[arg(long, default_value = "logistic-relaxed")]
    pub preset: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seeds: Option<SeedRange>,
    #[arg(long)]
    pub overwrite: bool,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub topk: Option<usize>,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    /// Experiment config or bare system spec.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GRID)]
    pub grid: usize,
    #[arg(long, default_value_t = 10)]
    pub topk: usize,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Experiment config or bare system spec naming the oracle.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct ForecastArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV of query states with a header row, one state per line.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub horizon: usize,
    /// Registered observable to forecast.
    #[arg(long, default_value = "state")]
    pub observable: String,
    /// Time unit per horizon step for generator models.
    #[arg(long, default_value_t = 1.0)]
    pub dt: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
}

/// Parses the process arguments and runs the command.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    ExitCode::from(run(cli))
}

/// Runs a parsed command and returns its exit code: 0 success, 2 configuration or
/// IO error, 3 numerical failure.
pub fn run(cli: Cli) -> u8 {
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Oracle(a) => cmd_oracle(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Forecast(a) => cmd_forecast(&a),
        Command::Benchmark(a) => cmd_benchmark(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::Format(_) | Error::UnsupportedActivation(_) | Error::Dimension(_) => 2,
        _ => 3,
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("DPNET_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| Error::Config(format!("DPNET_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Config("DPNET_THREADS must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Config(e.to_string()))
}

/// Creates `dir`, refusing to write into a non-empty directory without `overwrite`.
fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() && !overwrite && std::fs::read_dir(dir)?.next().is_some() {
        return Err(Error::Config(format!("{} is not empty; pass --overwrite to replace its outputs", dir.display())));
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_sha256: String,
    config: &'a C,
    seeds: Vec<u64>,
    files: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    runs: Vec<RunStatus>,
}

#[derive(Serialize)]
struct RunStatus {
    seed: u64,
    status: String,
}

fn write_manifest<C: Serialize>(
    dir: &Path,
    command: &str,
    config: &C,
    seeds: Vec<u64>,
    files: &[&str],
    runs: Vec<RunStatus>,
) -> Result<()> {
    let mut hashes = BTreeMap::new();
    for f in files {
        let p = dir.join(f);
        if p.exists() {
            hashes.insert(f.to_string(), sha256_file(&p)?);
        }
    }
    let manifest = Manifest {
        tool: "dpnets",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_sha256: hex::encode(Sha256::digest(serde_json::to_vec(config)?)),
        config,
        seeds,
        files: hashes,
        runs,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn write_metrics(path: &Path, metrics: &Metrics) -> Result<()> {
    let mut s = String::from("metric,value\n");
    for (k, v) in metrics {
        let _ = writeln!(s, "{k},{v}");
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn write_aggregate(path: &Path, runs: &[Metrics], failed: usize) -> Result<()> {
    let mut s = String::from("metric,mean,std,runs\n");
    for (k, mean, std, n) in aggregate(runs) {
        let _ = writeln!(s, "{k},{mean},{std},{n}");
    }
    let _ = writeln!(s, "failed_runs,{failed},0,{}", runs.len() + failed);
    std::fs::write(path, s)?;
    Ok(())
}

fn write_model_eigenvalues(path: &Path, model: &Model) -> Result<()> {
    let spectral = model.spectral()?;
    let ts = model.implied_timescales(&spectral);
    let mut buf = Vec::new();
    write_eigenvalues_csv(&mut buf, &spectral.eigenvalues, &ts)?;
    std::fs::write(path, buf)?;
    Ok(())
}

enum SeedResult {
    Done(Metrics),
    Aborted,
}

/// One seed: train, save artifacts in `dir`, evaluate. Numerical aborts are recorded
/// in `abort.json` instead of propagating.
fn run_seed(config: &ExperimentConfig, seed: u64, oracle: Option<&Oracle>, dir: &Path, artifacts: bool) -> Result<SeedResult> {
    std::fs::create_dir_all(dir)?;
    let seed_config = ExperimentConfig { seeds: vec![seed], ..config.clone() };
    let outcome = match run_experiment(config, seed, oracle) {
        Ok(o) => o,
        Err(Error::Aborted(report)) => {
            write_abort(dir, &report)?;
            write_manifest(dir, "train", &seed_config, vec![seed], &["abort.json"], vec![])?;
            return Ok(SeedResult::Aborted);
        }
        Err(e) if exit_code(&e) == 3 => {
            let report = AbortReport {
                step: 0,
                epoch: 0,
                reason: e.to_string(),
                batch_indices: Vec::new(),
                params: Vec::new(),
                params_next: None,
            };
            write_abort(dir, &report)?;
            write_manifest(dir, "train", &seed_config, vec![seed], &["abort.json"], vec![])?;
            return Ok(SeedResult::Aborted);
        }
        Err(e) => return Err(e),
    };
    let mut files = vec!["train_log.csv", "metrics.csv", "eigenvalues.csv"];
    outcome.report.save_csv(&dir.join("train_log.csv"))?;
    write_metrics(&dir.join("metrics.csv"), &outcome.metrics)?;
    write_model_eigenvalues(&dir.join("eigenvalues.csv"), &outcome.model)?;
    if artifacts {
        save_params(&dir.join("psi.params"), outcome.maps.psi.params())?;
        files.push("psi.params");
        if let Some(next) = &outcome.maps.psi_next {
            save_params(&dir.join("psi_next.params"), next.params())?;
            files.push("psi_next.params");
        }
        outcome.model.save(&dir.join("model.dpn"))?;
        files.push("model.dpn");
    }
    write_manifest(dir, "train", &seed_config, vec![seed], &files, vec![])?;
    Ok(SeedResult::Done(outcome.metrics))
}

fn write_abort(dir: &Path, report: &AbortReport) -> Result<()> {
    std::fs::write(dir.join("abort.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

fn run_seeds(command: &str, config: &ExperimentConfig, out: &Path, artifacts: bool) -> Result<u8> {
    let oracle = Oracle::build(&config.system, config.evaluation.grid)?;
    let pool = thread_pool()?;
    let results: Vec<(u64, Result<SeedResult>)> = pool.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&seed| (seed, run_seed(config, seed, Some(&oracle), &out.join(format!("seed_{seed}")), artifacts)))
            .collect()
    });
    let mut metrics = Vec::new();
    let mut statuses = Vec::new();
    let mut failed = 0;
    for (seed, r) in results {
        match r? {
            SeedResult::Done(m) => {
                statuses.push(RunStatus { seed, status: "ok".into() });
                metrics.push(m);
            }
            SeedResult::Aborted => {
                eprintln!("seed {seed}: training aborted, see seed_{seed}/abort.json");
                statuses.push(RunStatus { seed, status: "aborted".into() });
                failed += 1;
            }
        }
    }
    write_aggregate(&out.join("aggregate.csv"), &metrics, failed)?;
    write_manifest(out, command, config, config.seeds.clone(), &["aggregate.csv"], statuses)?;
    for (k, mean, std, n) in aggregate(&metrics) {
        println!("{k:<32} {mean:>12.6} ± {std:<10.6} (n={n})");
    }
    Ok(if failed > 0 { 3 } else { 0 })
}

fn apply_overrides(config: &mut ExperimentConfig, seeds: Option<SeedRange>, grid: Option<usize>, topk: Option<usize>) -> Result<()> {
    if let Some(s) = seeds {
        config.seeds = s.seeds();
    }
    if let Some(g) = grid {
        config.evaluation.grid = g;
    }
    if let Some(k) = topk {
        config.evaluation.top_k = k;
    }
    config.validate()
}

fn output_dir(flag: &Option<PathBuf>, config: &ExperimentConfig, fallback: &str) -> PathBuf {
    flag.clone().or_else(|| config.output_dir.clone()).unwrap_or_else(|| PathBuf::from(fallback))
}

pub fn cmd_train(args: &RunArgs) -> Result<u8> {
    let mut config = ExperimentConfig::load(&args.config)?;
    apply_overrides(&mut config, args.seeds, args.grid, args.topk)?;
    let out = output_dir(&args.out, &config, "dpnets_runs");
    prepare_dir(&out, args.overwrite)?;
    run_seeds("train", &config, &out, true)
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    match name {
        "logistic-relaxed" => Ok(ExperimentConfig::logistic(ScoreKind::S)),
        "logistic-projection" => Ok(ExperimentConfig::logistic(ScoreKind::P)),
        "langevin" => Ok(ExperimentConfig::langevin()),
        other => Err(Error::Config(format!(
            "unknown preset {other:?}; expected logistic-relaxed, logistic-projection or langevin"
        ))),
    }
}

pub fn cmd_benchmark(args: &BenchmarkArgs) -> Result<u8> {
    let mut config = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => preset(&args.preset)?,
    };
    apply_overrides(&mut config, args.seeds, args.grid, args.topk)?;
    let out = output_dir(&args.out, &config, "dpnets_benchmark");
    prepare_dir(&out, args.overwrite)?;
    run_seeds("benchmark", &config, &out, false)
}

/// Accepts either a full experiment config or a bare system spec.
/// A system spec plus the evaluation settings of the full config it came from, if any.
fn load_system_with_evaluation(path: &Path) -> Result<(SystemSpec, Option<EvaluationSpec>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let (system, eval) = if value.get("system").is_some() {
        let cfg = ExperimentConfig::from_json(&text)?;
        (cfg.system, Some(cfg.evaluation))
    } else {
        (serde_json::from_value::<SystemSpec>(value).map_err(|e| Error::Config(e.to_string()))?, None)
    };
    system.validate()?;
    Ok((system, eval))
}

fn load_system(path: &Path) -> Result<SystemSpec> {
    Ok(load_system_with_evaluation(path)?.0)
}

pub fn cmd_oracle(args: &OracleArgs) -> Result<u8> {
    let system = load_system(&args.config)?;
    if args.grid < 256 {
        return Err(Error::Config(format!("oracle grid must be at least 256, got {}", args.grid)));
    }
    prepare_dir(&args.out, args.overwrite)?;
    let coarse = Oracle::build(&system, args.grid)?;
    let ev = coarse.eigenvalues(args.topk)?;
    let sv = coarse.singular_values(args.topk);
    let mut s = String::from("index,eigenvalue_real,eigenvalue_imag,modulus,implied_timescale");
    if sv.is_some() {
        s.push_str(",singular_value");
    }
    s.push('\n');
    let lag = system.lag_time();
    for (i, l) in ev.iter().enumerate() {
        let ts = match system {
            SystemSpec::Langevin(_) => crate::regression::continuous_timescale(*l),
            _ => crate::regression::discrete_timescale(*l, lag),
        };
        let _ = write!(s, "{i},{},{},{},{ts}", l.re, l.im, l.norm());
        if let Some(sv) = &sv {
            let _ = write!(s, ",{}", sv.get(i).copied().unwrap_or(f64::NAN));
        }
        s.push('\n');
    }
    std::fs::write(args.out.join("oracle_spectrum.csv"), s)?;

    let mut files = vec!["oracle_spectrum.csv"];
    if !matches!(system, SystemSpec::Linear(_)) {
        let fine = Oracle::build(&system, 2 * args.grid)?;
        let ef = fine.eigenvalues(args.topk)?;
        let mut r = format!("quantity,index,grid_{},grid_{},abs_diff\n", args.grid, 2 * args.grid);
        for (i, (a, b)) in ev.iter().zip(&ef).enumerate() {
            let _ = writeln!(r, "eigenvalue,{i},{},{},{}", fmt_c(*a), fmt_c(*b), (a - b).norm());
        }
        if let (Some(a), Some(b)) = (sv, fine.singular_values(args.topk)) {
            for (i, (x, y)) in a.iter().zip(&b).enumerate() {
                let _ = writeln!(r, "singular_value,{i},{x},{y},{}", (x - y).abs());
            }
        }
        std::fs::write(args.out.join("refinement.csv"), r)?;
        files.push("refinement.csv");
    }
    #[derive(Serialize)]
    struct OracleRequest<'a> {
        system: &'a SystemSpec,
        grid: usize,
        topk: usize,
    }
    write_manifest(&args.out, "oracle", &OracleRequest { system: &system, grid: args.grid, topk: args.topk }, vec![], &files, vec![])?;
    Ok(0)
}

fn fmt_c(z: Complex64) -> String {
    if z.im == 0.0 {
        format!("{}", z.re)
    } else {
        format!("{}{:+}i", z.re, z.im)
    }
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<u8> {
    let (system, eval) = load_system_with_evaluation(&args.config)?;
    let model = Model::load(&args.model)?;
    if model.features().input_dim() != system.dim() {
        return Err(Error::Config("model input dimension differs from the system".into()));
    }
    let mut eval = eval.unwrap_or_default();
    if let Some(g) = args.grid {
        eval.grid = g;
    }
    if let Some(k) = args.topk {
        eval.top_k = k;
    }
    prepare_dir(&args.out, args.overwrite)?;
    let oracle = Oracle::build(&system, eval.grid)?;
    let metrics = evaluate_model(&model, &oracle, &eval)?;
    write_metrics(&args.out.join("metrics.csv"), &metrics)?;
    #[derive(Serialize)]
    struct EvaluateRequest<'a> {
        model: String,
        system: &'a SystemSpec,
        evaluation: &'a EvaluationSpec,
    }
    let req = EvaluateRequest { model: sha256_file(&args.model)?, system: &system, evaluation: &eval };
    write_manifest(&args.out, "evaluate", &req, vec![], &["metrics.csv"], vec![])?;
    Ok(0)
}

/// Reads query states from a CSV with a header row.
pub fn read_queries(path: &Path, dim: usize) -> Result<Matrix> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut data = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if rec.len() != dim {
            return Err(Error::Format(format!("{} line {}: expected {dim} columns", path.display(), line + 2)));
        }
        for field in rec.iter() {
            data.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), line + 2)))?,
            );
        }
    }
    if data.is_empty() {
        return Err(Error::Format(format!("{} holds no queries", path.display())));
    }
    Ok(Matrix::from_column_slice(dim, data.len() / dim, &data))
}

pub fn cmd_forecast(args: &ForecastArgs) -> Result<u8> {
    let model = Model::load(&args.model)?;
    let queries = read_queries(&args.queries, model.features().input_dim())?;
    prepare_dir(&args.out, args.overwrite)?;
    let (values, width) = match &model {
        Model::Transfer(m) => {
            let v = m.observable(&args.observable)?.clone();
            let w = v.ncols();
            (v, w)
        }
        Model::Generator(m) => {
            let v = m
                .observables
                .iter()
                .find(|o| o.name == args.observable)
                .map(|o| o.values.clone())
                .ok_or_else(|| Error::Config(format!("no observable named {:?}", args.observable)))?;
            let w = v.ncols();
            (v, w)
        }
    };
    let d = queries.nrows();
    let mut s = String::from("query,t");
    for i in 0..d {
        let _ = write!(s, ",x{i}");
    }
    for i in 0..width {
        let _ = write!(s, ",value{i}");
    }
    s.push('\n');
    let mut rows = Vec::with_capacity(args.horizon + 1);
    for t in 0..=args.horizon {
        let f = match &model {
            Model::Transfer(m) => m.forecast(&values, t, &queries)?,
            Model::Generator(m) => m.forecast(&values, t as f64 * args.dt, &queries)?,
        };
        rows.push(f);
    }
    for q in 0..queries.ncols() {
        for (t, f) in rows.iter().enumerate() {
            let _ = write!(s, "{q},{t}");
            for i in 0..d {
                let _ = write!(s, ",{}", queries[(i, q)]);
            }
            for l in 0..width {
                let _ = write!(s, ",{}", f[(l, q)]);
            }
            s.push('\n');
        }
    }
    std::fs::write(args.out.join("forecasts.csv"), s)?;
    #[derive(Serialize)]
    struct ForecastRequest {
        model: String,
        queries: String,
        horizon: usize,
        observable: String,
        dt: f64,
    }
    let req = ForecastRequest {
        model: sha256_file(&args.model)?,
        queries: sha256_file(&args.queries)?,
        horizon: args.horizon,
        observable: args.observable.clone(),
        dt: args.dt,
    };
    write_manifest(&args.out, "forecast", &req, vec![], &["forecasts.csv"], vec![])?;
    Ok(0)
}
