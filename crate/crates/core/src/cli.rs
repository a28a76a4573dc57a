//! Command-line front end.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    extract_merge_scenarios, parse_table, synth_scenarios, ExtractConfig, ScenarioManifest, SynthConfig, Units,
};
use crate::error::{Error, Result};
use crate::eval::{aggregate, cv_baseline, evaluate_scenario, MetricsReport, DEFAULT_HORIZONS_S};
use crate::gtrs::{assemble_system, solve_nonnegative, SolverResult};
use crate::likelihood::{default_hyperparams, neg_log_likelihood};
use crate::model::{ControllerParams, Hyperparams, Scenario, VehicleState, DEFAULT_DT};
use crate::sampler::{predict, LeadMode, SamplerConfig, WeightedTrajectorySet, DEFAULT_SAMPLES};

#[derive(Debug, Parser)]
#[command(name = "lagpred", version, about = "Lag-vehicle trajectory prediction for ramp merges")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract merge scenarios from a trajectory table.
    Extract(ExtractArgs),
    /// Generate synthetic scenarios with a known controller.
    Synth(SynthArgs),
    /// Predict every scenario of a manifest, one JSON line each.
    Predict(PredictArgs),
    /// Score predictions against the manifest's ground truth.
    Evaluate(EvaluateArgs),
    /// Time solve plus sampling per scenario.
    Bench(BenchArgs),
    /// Likelihood over a (k_v, k_g) grid at fixed g*, as CSV.
    Surface(SurfaceArgs),
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
    /// `meters` or `feet`.
    #[arg(long, default_value = "feet")]
    units: String,
    /// Frame period in seconds.
    #[arg(long, default_value_t = DEFAULT_DT)]
    dt: f64,
    #[arg(long, default_value_t = 7)]
    ramp_lane: i64,
    #[arg(long, default_value_t = 6)]
    target_lane: i64,
    #[arg(long, default_value_t = 3.2)]
    observe_seconds: f64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_DT)]
    dt: f64,
    #[arg(long, default_value_t = 3.2)]
    observe_seconds: f64,
    #[arg(long, default_value_t = 4.8)]
    horizon_seconds: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0.5)]
    k_v: f64,
    #[arg(long, default_value_t = 0.2)]
    k_g: f64,
    #[arg(long, default_value_t = 12.0)]
    g_star: f64,
    #[arg(long, default_value_t = 4.5)]
    lead_length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LeadModeArg {
    Truth,
    Cv,
}

#[derive(Debug, Args, Clone)]
struct ModelArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Prior mean gap; defaults to the mean observed gap.
    #[arg(long)]
    g0_override: Option<f64>,
    /// Use only the last `round(observe_seconds / dt)` observations.
    #[arg(long, default_value_t = 3.2)]
    observe_seconds: f64,
}

#[derive(Debug, Args, Clone)]
struct SampleArgs {
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "truth")]
    lead_mode: LeadModeArg,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sample: SampleArgs,
    /// Emit 5/50/95% quantiles and the mean per step instead of samples.
    #[arg(long)]
    summary: bool,
    /// Record wall time per scenario (makes the output non-reproducible).
    #[arg(long)]
    record_time: bool,
    /// Write the assembled least-squares system of every scenario as JSONL.
    #[arg(long)]
    dump_system: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Also score the constant-velocity baseline.
    #[arg(long)]
    baseline: bool,
    #[arg(long, default_value_t = 3.2)]
    observe_seconds: f64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sample: SampleArgs,
    #[arg(long, default_value_t = 5)]
    repeat: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SurfaceArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[command(flatten)]
    model: ModelArgs,
    /// Desired gap held fixed; defaults to the estimate's.
    #[arg(long)]
    g_star: Option<f64>,
    #[arg(long)]
    kv_max: Option<f64>,
    #[arg(long)]
    kg_max: Option<f64>,
    #[arg(long, default_value_t = 41)]
    grid: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

/// One JSON line of `predict` output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lead_mode: Option<LeadMode>,
    #[serde(default)]
    pub degenerate: bool,
    #[serde(default)]
    pub effective_sample_size: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predict_time_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Samples>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantiles: Option<Vec<StepSummary>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Samples {
    pub thetas: Vec<[f64; 3]>,
    /// Lag positions per draw over the prediction horizon.
    pub positions: Vec<Vec<f64>>,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepSummary {
    pub mean: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorDoc {
    pub kind: String,
    pub message: String,
}

impl From<&Error> for ErrorDoc {
    fn from(e: &Error) -> Self {
        Self {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

impl Samples {
    fn from_set(set: &WeightedTrajectorySet) -> Self {
        Self {
            thetas: set.thetas.iter().map(|t| t.to_array()).collect(),
            positions: set.trajectories.iter().map(|tr| tr.iter().map(|s| s.x).collect()).collect(),
            probabilities: set.probabilities.clone(),
        }
    }

    fn to_set(&self) -> WeightedTrajectorySet {
        WeightedTrajectorySet {
            thetas: self.thetas.iter().map(|t| ControllerParams::from_array(*t)).collect(),
            trajectories: self
                .positions
                .iter()
                .map(|p| p.iter().map(|x| VehicleState::new(*x, 0.0)).collect())
                .collect(),
            probabilities: self.probabilities.clone(),
            effective_sample_size: 0.0,
            degenerate: false,
        }
    }
}

/// Weighted quantile by sorting positions at one step.
fn weighted_quantile(sorted: &[(f64, f64)], q: f64) -> f64 {
    let mut acc = 0.0;
    for (x, p) in sorted {
        acc += p;
        if acc >= q {
            return *x;
        }
    }
    sorted.last().map_or(f64::NAN, |s| s.0)
}

fn summarize(set: &WeightedTrajectorySet) -> Vec<StepSummary> {
    (0..set.horizon())
        .map(|t| {
            let mut pts: Vec<(f64, f64)> = set
                .trajectories
                .iter()
                .zip(&set.probabilities)
                .map(|(tr, p)| (tr[t].x, *p))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            StepSummary {
                mean: set.mean_position(t),
                q05: weighted_quantile(&pts, 0.05),
                q50: weighted_quantile(&pts, 0.5),
                q95: weighted_quantile(&pts, 0.95),
            }
        })
        .collect()
}

/// Keeps the last `round(observe_seconds / dt)` observations.
fn trim_observations(scenario: &Scenario, observe_seconds: f64) -> Scenario {
    let k = (observe_seconds / scenario.dt).round().max(1.0) as usize;
    let mut s = scenario.clone();
    if s.observed.len() > k {
        s.observed.drain(..s.observed.len() - k);
    }
    s
}

impl ModelArgs {
    fn prepare(&self, scenario: &Scenario) -> Result<(Scenario, Hyperparams)> {
        let s = trim_observations(scenario, self.observe_seconds);
        s.validate()?;
        let mut gamma = default_hyperparams(&s)?;
        if let Some(a) = self.alpha {
            gamma.alpha = a;
        }
        if let Some(b) = self.beta {
            gamma.beta = b;
        }
        if let Some(g) = self.g0_override {
            gamma.g0 = g;
        }
        if gamma.alpha < 0.0 || gamma.beta < 0.0 {
            return Err(Error::InvalidScenario("alpha and beta must be nonnegative".into()));
        }
        Ok((s, gamma))
    }
}

impl SampleArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            n: self.samples,
            seed: self.seed,
            lead_mode: match self.lead_mode {
                LeadModeArg::Truth => LeadMode::GroundTruth,
                LeadModeArg::Cv => LeadMode::ConstantVelocity,
            },
            ..SamplerConfig::default()
        }
    }
}

fn open_output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::BufWriter::new(std::io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(path: &Option<PathBuf>, value: &T) -> Result<()> {
    let mut out = open_output(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn cmd_extract(a: &ExtractArgs) -> Result<()> {
    let units: Units = a.units.parse()?;
    let table = parse_table(&a.input, units, 1.0 / a.dt)?;
    let config = ExtractConfig {
        ramp_lane: a.ramp_lane,
        target_lane: a.target_lane,
        observe_seconds: a.observe_seconds,
    };
    let (scenarios, skipped) = extract_merge_scenarios(&table, &config);
    log::info!("extracted {} scenarios, skipped {:?}", scenarios.len(), skipped);
    write_json(
        &a.output,
        &ScenarioManifest {
            source: a.input.display().to_string(),
            scenarios,
            skipped,
        },
    )
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let theta_star = ControllerParams::new(a.k_v, a.k_g, a.g_star);
    if !theta_star.is_nonnegative() {
        return Err(Error::InvalidScenario("controller parameters must be nonnegative".into()));
    }
    let config = SynthConfig {
        n: a.n,
        observe_steps: (a.observe_seconds / a.dt).round() as usize,
        horizon_steps: (a.horizon_seconds / a.dt).round() as usize,
        dt: a.dt,
        theta_star,
        noise_sd: a.noise_sd,
        lead_length: a.lead_length,
        seed: a.seed,
    };
    write_json(
        &a.output,
        &ScenarioManifest {
            source: format!("synth seed={} n={}", a.seed, a.n),
            scenarios: synth_scenarios(&config)?,
            skipped: Default::default(),
        },
    )
}

fn predict_one(scenario: &Scenario, model: &ModelArgs, config: &SamplerConfig) -> Result<(crate::sampler::Prediction, f64)> {
    let t0 = Instant::now();
    let (s, gamma) = model.prepare(scenario)?;
    let pred = predict(&s, &gamma, config)?;
    Ok((pred, t0.elapsed().as_secs_f64()))
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let manifest = ScenarioManifest::load(&a.manifest)?;
    let config = a.sample.config();
    if let Some(path) = &a.dump_system {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for rec in &manifest.scenarios {
            let doc = match a.model.prepare(&rec.scenario).and_then(|(s, g)| assemble_system(&s, &g)) {
                Ok(sys) => {
                    let mu_trace = solve_nonnegative(&sys).map(|r| r.mu_trace).unwrap_or_default();
                    serde_json::json!({ "id": rec.id, "system": sys.to_json(), "mu_trace": mu_trace })
                }
                Err(e) => serde_json::json!({ "id": rec.id, "error": ErrorDoc::from(&e) }),
            };
            writeln!(out, "{doc}")?;
        }
    }
    let records: Vec<PredictionRecord> = manifest
        .scenarios
        .par_iter()
        .map(|rec| match predict_one(&rec.scenario, &a.model, &config) {
            Ok((pred, secs)) => PredictionRecord {
                id: rec.id.clone(),
                error: None,
                lead_mode: Some(pred.lead_mode),
                degenerate: pred.set.degenerate,
                effective_sample_size: pred.set.effective_sample_size,
                predict_time_s: a.record_time.then_some(secs),
                samples: (!a.summary).then(|| Samples::from_set(&pred.set)),
                quantiles: a.summary.then(|| summarize(&pred.set)),
                solver: Some(pred.solver),
            },
            Err(e) => {
                log::warn!("{}: {e}", rec.id);
                PredictionRecord {
                    id: rec.id.clone(),
                    error: Some(ErrorDoc::from(&e)),
                    solver: None,
                    lead_mode: None,
                    degenerate: false,
                    effective_sample_size: 0.0,
                    predict_time_s: None,
                    samples: None,
                    quantiles: None,
                }
            }
        })
        .collect();
    let mut out = open_output(&a.output)?;
    for r in &records {
        serde_json::to_writer(&mut out, r)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvaluationDoc {
    model: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    cv: Option<MetricsReport>,
    failed: usize,
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i as u64 + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn truth_positions(scenario: &Scenario, id: &str) -> Result<Vec<f64>> {
    scenario
        .truth_lag_future
        .as_ref()
        .map(|t| t.iter().map(|s| s.x).collect())
        .ok_or_else(|| Error::InvalidScenario(format!("{id}: no ground truth")))
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let manifest = ScenarioManifest::load(&a.manifest)?;
    let predictions = read_predictions(&a.predictions)?;
    let by_id: std::collections::HashMap<&str, &Scenario> =
        manifest.scenarios.iter().map(|r| (r.id.as_str(), &r.scenario)).collect();
    let mut evals = Vec::new();
    let mut cv_evals = Vec::new();
    let mut failed = 0;
    for p in &predictions {
        let Some(samples) = &p.samples else {
            if p.error.is_none() {
                return Err(Error::InvalidScenario(format!("{}: prediction has no samples", p.id)));
            }
            failed += 1;
            continue;
        };
        let scenario = by_id
            .get(p.id.as_str())
            .ok_or_else(|| Error::InvalidScenario(format!("{}: not in manifest", p.id)))?;
        let truth = truth_positions(scenario, &p.id)?;
        let mut e = evaluate_scenario(&samples.to_set(), &truth, scenario.dt, &DEFAULT_HORIZONS_S)?;
        e.predict_time_s = p.predict_time_s;
        evals.push(e);
        if a.baseline {
            let s = trim_observations(scenario, a.observe_seconds);
            cv_evals.push(evaluate_scenario(&cv_baseline(&s)?, &truth, s.dt, &DEFAULT_HORIZONS_S)?);
        }
    }
    let doc = EvaluationDoc {
        model: aggregate(&evals, &DEFAULT_HORIZONS_S),
        cv: a.baseline.then(|| aggregate(&cv_evals, &DEFAULT_HORIZONS_S)),
        failed,
    };
    match a.format {
        Format::Json => write_json(&a.output, &doc),
        Format::Table => {
            let mut out = open_output(&a.output)?;
            write!(out, "model\n{}", doc.model.to_table())?;
            if let Some(cv) = &doc.cv {
                write!(out, "\nconstant velocity\n{}", cv.to_table())?;
            }
            if failed > 0 {
                writeln!(out, "\nfailed predictions {failed}")?;
            }
            out.flush()?;
            Ok(())
        }
    }
}

#[derive(Debug, Serialize)]
struct BenchDoc {
    scenarios: usize,
    samples: usize,
    repeat: usize,
    /// Median wall time per scenario, milliseconds.
    per_scenario_ms: Vec<f64>,
    median_ms: f64,
    p90_ms: f64,
    max_ms: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let manifest = ScenarioManifest::load(&a.manifest)?;
    let config = a.sample.config();
    let mut per_scenario = Vec::new();
    // Sequential across scenarios so timings are not contended.
    for rec in &manifest.scenarios {
        let mut times = Vec::new();
        for _ in 0..a.repeat.max(1) {
            times.push(predict_one(&rec.scenario, &a.model, &config)?.1 * 1e3);
        }
        times.sort_by(f64::total_cmp);
        per_scenario.push(percentile(&times, 0.5));
    }
    let mut sorted = per_scenario.clone();
    sorted.sort_by(f64::total_cmp);
    write_json(
        &a.output,
        &BenchDoc {
            scenarios: per_scenario.len(),
            samples: a.sample.samples,
            repeat: a.repeat.max(1),
            median_ms: percentile(&sorted, 0.5),
            p90_ms: percentile(&sorted, 0.9),
            max_ms: sorted.last().copied().unwrap_or(0.0),
            per_scenario_ms: per_scenario,
        },
    )
}

fn cmd_surface(a: &SurfaceArgs) -> Result<()> {
    let manifest = ScenarioManifest::load(&a.manifest)?;
    let rec = manifest
        .scenarios
        .get(a.index)
        .ok_or_else(|| Error::InvalidScenario(format!("index {} out of range", a.index)))?;
    let (s, gamma) = a.model.prepare(&rec.scenario)?;
    let hat = solve_nonnegative(&assemble_system(&s, &gamma)?)?.theta_hat;
    let g_star = a.g_star.unwrap_or(hat.g_star);
    let kv_max = a.kv_max.unwrap_or((2.0 * hat.k_v).max(1.0));
    let kg_max = a.kg_max.unwrap_or((2.0 * hat.k_g).max(1.0));
    let n = a.grid.max(2);
    let mut w = csv::Writer::from_writer(open_output(&a.output)?);
    w.write_record(["k_v", "k_g", "f"])?;
    for i in 0..n {
        let k_v = kv_max * i as f64 / (n - 1) as f64;
        for j in 0..n {
            let k_g = kg_max * j as f64 / (n - 1) as f64;
            let f = neg_log_likelihood(&s, &ControllerParams::new(k_v, k_g, g_star), &gamma)?.total;
            w.write_record([k_v.to_string(), k_g.to_string(), f.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Runtime failures exit with 2, malformed invocations and inputs with 1.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Unit(_) | Error::InvalidScenario(_) => 1,
        _ => 2,
    }
}

fn report(kind: &str, message: &str) {
    let doc = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{doc}");
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            report("UsageError", e.to_string().trim());
            return 1;
        }
    };
    let result = match &cli.command {
        Command::Extract(a) => cmd_extract(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Surface(a) => cmd_surface(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            report(e.kind(), &e.to_string());
            exit_code(&e)
        }
    }
}
