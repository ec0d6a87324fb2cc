//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 infeasible budget,
//! 3 input schema violation.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baseline::{mass_set_categorical, mass_set_gaussian};
use crate::bounds::{alpha_for, min_n_direct, min_n_vc, BoundKind, BoundsError, PacParams};
use crate::confset::{confidence_set, ConfidenceSet, Threshold};
use crate::estimator::{end_to_end, fit_calibration, Artifact, CalibrationMode, Example, PipelineConfig, PipelineError};
use crate::forecaster::{log_prob, Forecast, Label};
use crate::harness::{
    self, empirical_error, size_stats, sweep, top1_correct, verify_pac, EvalReport, HarnessError, PipelineFlags,
    SizeStats, SyntheticSpec,
};
use crate::io::{self, ForecastRecord, IoError, PredictionRecord, SetJson};
use crate::special::chi2_quantile;
use crate::trajectory::StepCalibrationMode;

#[derive(Debug, Parser)]
#[command(name = "pacset", version, about = "PAC confidence sets for probability forecasters")]
struct Cli {
    /// TOML file with default values for any flag; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for commands that sample.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Admissible miss count k* and budget alpha for (n, epsilon, delta).
    Alpha(BudgetArgs),
    /// Fit the temperature(s) on a calibration file.
    Calibrate(CalibrateArgs),
    /// Calibrate and select the threshold; writes the artifact JSON.
    Fit(FitArgs),
    /// Confidence sets for every record of a forecast file (JSONL).
    Predict(PredictArgs),
    /// Empirical error and set sizes on a labelled file or predictions.
    Eval(EvalArgs),
    /// Per-input (1 - epsilon)-mass sets from the raw forecasts (JSONL).
    Baseline(BaselineArgs),
    /// Monte-Carlo check of the PAC guarantee on a synthetic world.
    VerifyPac(VerifyArgs),
    /// Threshold, error, and sizes over an epsilon x delta grid (CSV).
    Sweep(SweepArgs),
    /// Per-record (and per-step) set sizes and coverage (CSV).
    Report(ReportArgs),
    /// Draw labelled forecast records from a synthetic world (JSONL).
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum StepScope {
    /// One temperature per step.
    Scalar,
    /// One temperature per step and coordinate.
    Dim,
}

#[derive(Debug, Args)]
struct BudgetArgs {
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    bound: Option<BoundKind>,
}

#[derive(Debug, Args)]
struct CalibrationFlags {
    /// Skip temperature scaling (tau = 1).
    #[arg(long)]
    no_calibrate: bool,
    /// Temperature scope for trajectory forecasts (default: scalar per step).
    #[arg(long, value_enum, num_args = 0..=1, default_missing_value = "scalar")]
    per_step_tau: Option<StepScope>,
}

#[derive(Debug, Args)]
struct OutputArg {
    /// Output file (default: stdout).
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    cal: CalibrationFlags,
    #[command(flatten)]
    out: OutputArg,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Calibration records (not needed with --no-calibrate).
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    validation: PathBuf,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    bound: Option<BoundKind>,
    #[command(flatten)]
    cal: CalibrationFlags,
    #[command(flatten)]
    out: OutputArg,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    artifact: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Add the axis-aligned bounding box of each ellipsoid.
    #[arg(long = "box")]
    with_box: bool,
    #[command(flatten)]
    out: OutputArg,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, requires = "input", conflicts_with = "predictions")]
    artifact: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    /// Prediction records from `predict` or `baseline`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Target error for the validity flag when evaluating predictions.
    #[arg(long)]
    epsilon: Option<f64>,
    #[command(flatten)]
    out: OutputArg,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long = "box")]
    with_box: bool,
    #[command(flatten)]
    out: OutputArg,
}

#[derive(Debug, Args)]
struct WorldArg {
    /// exp-score, categorical, gaussian, or dynamics (parameters from the
    /// config's [world] table).
    #[arg(long)]
    world: Option<String>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    world: WorldArg,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long)]
    trials: Option<usize>,
    /// Calibration examples drawn per trial.
    #[arg(long)]
    calibration_size: Option<usize>,
    #[command(flatten)]
    cal: CalibrationFlags,
    /// Per-trial CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    out: OutputArg,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    world: WorldArg,
    #[arg(long)]
    n: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    deltas: Option<Vec<f64>>,
    #[arg(long)]
    bound: Option<BoundKind>,
    #[arg(long)]
    calibration_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[command(flatten)]
    cal: CalibrationFlags,
    #[command(flatten)]
    out: OutputArg,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    artifact: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    out: OutputArg,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    world: WorldArg,
    #[arg(long)]
    n: Option<u64>,
    /// Id prefix.
    #[arg(long, default_value = "g")]
    tag: String,
    #[command(flatten)]
    out: OutputArg,
}

/// Values a config file may supply.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    epsilon: Option<f64>,
    delta: Option<f64>,
    n: Option<u64>,
    bound: Option<BoundKind>,
    no_calibrate: Option<bool>,
    per_step_tau: Option<StepScope>,
    seed: Option<u64>,
    #[serde(rename = "box")]
    with_box: Option<bool>,
    trials: Option<usize>,
    calibration_size: Option<usize>,
    test_size: Option<usize>,
    epsilons: Option<Vec<f64>>,
    deltas: Option<Vec<f64>>,
    world: Option<SyntheticSpec>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Infeasible(String),
    Schema(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Other(_) => 1,
            CliError::Infeasible(_) => 2,
            CliError::Schema(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Infeasible(m) | CliError::Schema(m) | CliError::Other(m) => m,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Schema { .. } => CliError::Schema(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::Bounds(BoundsError::Infeasible { .. }) => CliError::Infeasible(e.to_string()),
            PipelineError::Bounds(BoundsError::Domain(_)) => CliError::Usage(e.to_string()),
            PipelineError::Overlap(_) => CliError::Schema(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Pipeline(p) => p.into(),
            HarnessError::TooFewTrials(_) | HarnessError::InvalidWorld(_) => CliError::Usage(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

fn required<T>(flag: Option<T>, config: Option<T>, name: &str) -> Result<T, CliError> {
    flag.or(config).ok_or_else(|| CliError::Usage(format!("missing --{name} (flag or config)")))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn sink(out: &OutputArg) -> Result<Box<dyn Write>, CliError> {
    Ok(match &out.output {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::Other(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn write_json_line<T: Serialize>(w: &mut dyn Write, v: &T) -> Result<(), CliError> {
    serde_json::to_writer(&mut *w, v).map_err(|e| CliError::Other(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

fn read_examples(path: &Path) -> Result<Vec<Example>, CliError> {
    Ok(io::read_examples(open(path)?)?)
}

fn read_artifact(path: &Path) -> Result<Artifact, CliError> {
    Ok(io::read_artifact(open(path)?)?)
}

fn calibration_mode(flags: &CalibrationFlags, config: &Config, examples: &[Example]) -> CalibrationMode {
    if flags.no_calibrate || config.no_calibrate == Some(true) {
        return CalibrationMode::None;
    }
    let all_trajectories =
        !examples.is_empty() && examples.iter().all(|e| matches!(e.forecast, Forecast::Trajectory(_)));
    if all_trajectories {
        CalibrationMode::Steps(step_mode(flags, config))
    } else {
        CalibrationMode::Global
    }
}

fn step_mode(flags: &CalibrationFlags, config: &Config) -> StepCalibrationMode {
    match flags.per_step_tau.or(config.per_step_tau) {
        Some(StepScope::Dim) => StepCalibrationMode::PerStepDim,
        _ => StepCalibrationMode::PerStep,
    }
}

fn infeasible_report(bound: BoundKind, n: u64, epsilon: f64, delta: f64) -> serde_json::Value {
    json!({
        "infeasible": true,
        "bound": bound,
        "n": n,
        "epsilon": epsilon,
        "delta": delta,
        "min_n_direct": min_n_direct(epsilon, delta).ok(),
        "min_n_vc": min_n_vc(epsilon, delta).ok(),
    })
}

fn cmd_alpha(a: BudgetArgs, config: &Config) -> Result<(), CliError> {
    let n = required(a.n, config.n, "n")?;
    let epsilon = required(a.epsilon, config.epsilon, "epsilon")?;
    let delta = required(a.delta, config.delta, "delta")?;
    let bound = a.bound.or(config.bound).unwrap_or(BoundKind::Direct);
    let params = PacParams::new(epsilon, delta, n).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut out = sink(&OutputArg { output: None })?;
    match alpha_for(&params, bound) {
        Ok(b) => {
            let v = json!({
                "k_star": b.k_star,
                "alpha": b.alpha(),
                "n": n,
                "epsilon": epsilon,
                "delta": delta,
                "bound": bound,
            });
            write_json_line(out.as_mut(), &v)
        }
        Err(e @ BoundsError::Infeasible { .. }) => {
            write_json_line(out.as_mut(), &infeasible_report(bound, n, epsilon, delta))?;
            Err(CliError::Infeasible(e.to_string()))
        }
        Err(e) => Err(CliError::Usage(e.to_string())),
    }
}

fn cmd_calibrate(a: CalibrateArgs, config: &Config) -> Result<(), CliError> {
    let examples = read_examples(&a.input)?;
    let mode = calibration_mode(&a.cal, config, &examples);
    let cal = fit_calibration(&examples, mode)?;
    let mut v = json!({ "tau": cal.tau() });
    if let Some(s) = cal.step_tau() {
        v["step_tau"] = serde_json::to_value(s).map_err(|e| CliError::Other(e.to_string()))?;
    }
    let mut out = sink(&a.out)?;
    write_json_line(out.as_mut(), &v)
}

fn cmd_fit(a: FitArgs, config: &Config) -> Result<(), CliError> {
    let epsilon = required(a.epsilon, config.epsilon, "epsilon")?;
    let delta = required(a.delta, config.delta, "delta")?;
    let bound = a.bound.or(config.bound).unwrap_or(BoundKind::Direct);
    let validation = read_examples(&a.validation)?;
    let skip = a.cal.no_calibrate || config.no_calibrate == Some(true);
    let calibration = match (&a.calibration, skip) {
        (Some(p), _) => read_examples(p)?,
        (None, true) => Vec::new(),
        (None, false) => return Err(CliError::Usage("missing --calibration (or pass --no-calibrate)".into())),
    };
    let mode = calibration_mode(&a.cal, config, &validation);
    let cfg = PipelineConfig { epsilon, delta, bound, calibration: mode };
    let artifact = match end_to_end(&calibration, &validation, &cfg) {
        Ok(a) => a,
        Err(e) if e.is_infeasible() => {
            let mut out = sink(&OutputArg { output: None })?;
            write_json_line(out.as_mut(), &infeasible_report(bound, validation.len() as u64, epsilon, delta))?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    let mut out = sink(&a.out)?;
    serde_json::to_writer_pretty(&mut out, &artifact).map_err(|e| CliError::Other(e.to_string()))?;
    writeln!(out)?;
    Ok(())
}

fn prediction(
    rec: &ForecastRecord,
    set: &ConfidenceSet,
    score: Option<f64>,
    covered: Option<bool>,
    with_box: bool,
) -> PredictionRecord {
    PredictionRecord {
        id: rec.id.clone(),
        kind: rec.forecast.kind().to_string(),
        set: SetJson::new(set, with_box),
        size: set.size(),
        covered,
        correct: rec.example().as_ref().and_then(top1_correct),
        log_score: score,
    }
}

fn write_predictions(out: &mut dyn Write, preds: Vec<Result<PredictionRecord, CliError>>) -> Result<(), CliError> {
    for p in preds {
        write_json_line(out, &p?)?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_predict(a: PredictArgs, config: &Config) -> Result<(), CliError> {
    let artifact = read_artifact(&a.artifact)?;
    let records = io::read_records(open(&a.input)?)?;
    let with_box = a.with_box || config.with_box == Some(true);
    let threshold = artifact.threshold();
    let preds: Vec<Result<PredictionRecord, CliError>> = records
        .par_iter()
        .map(|rec| {
            let f = artifact.calibrated(&rec.forecast).map_err(PipelineError::from)?;
            let set = confidence_set(&f, threshold).map_err(PipelineError::from)?;
            let score = match &rec.label {
                Some(y) => Some(log_prob(&f, y).map_err(PipelineError::from)?),
                None => None,
            };
            let covered = score.map(|s| s >= threshold.log_level());
            Ok(prediction(rec, &set, score, covered, with_box))
        })
        .collect();
    let mut out = sink(&a.out)?;
    write_predictions(out.as_mut(), preds)
}

fn cmd_baseline(a: BaselineArgs, config: &Config) -> Result<(), CliError> {
    let epsilon = required(a.epsilon, config.epsilon, "epsilon")?;
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(CliError::Usage(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    let with_box = a.with_box || config.with_box == Some(true);
    let records = io::read_records(open(&a.input)?)?;
    let preds: Vec<Result<PredictionRecord, CliError>> = records
        .par_iter()
        .map(|rec| {
            let (set, threshold) = match &rec.forecast {
                Forecast::Categorical(c) => (ConfidenceSet::Labels(mass_set_categorical(c, epsilon)), None),
                Forecast::Gaussian(g) => {
                    let t = mass_set_gaussian(g, epsilon);
                    (confidence_set(&rec.forecast, t).map_err(PipelineError::from)?, Some(t))
                }
                Forecast::Trajectory(tf) => {
                    let gs = tf.step_gaussians().map_err(PipelineError::from)?;
                    let dim: usize = gs.iter().map(|g| g.dim()).sum();
                    let norm: f64 = gs.iter().map(|g| g.log_norm_const()).sum();
                    let t = Threshold(0.5 * chi2_quantile(dim, 1.0 - epsilon) + 0.5 * norm);
                    (confidence_set(&rec.forecast, t).map_err(PipelineError::from)?, Some(t))
                }
            };
            let score = match &rec.label {
                Some(y) => Some(log_prob(&rec.forecast, y).map_err(PipelineError::from)?),
                None => None,
            };
            let covered = match (&set, &rec.label, threshold) {
                (ConfidenceSet::Labels(l), Some(Label::Class(y)), _) => Some(l.contains(y)),
                (_, Some(_), Some(t)) => score.map(|s| s >= t.log_level()),
                _ => None,
            };
            Ok(prediction(rec, &set, score, covered, with_box))
        })
        .collect();
    let mut out = sink(&a.out)?;
    write_predictions(out.as_mut(), preds)
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    #[serde(flatten)]
    report: EvalReport,
    sizes: SizeStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    sizes_correct: Option<SizeStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sizes_incorrect: Option<SizeStats>,
}

fn cmd_eval(a: EvalArgs, config: &Config) -> Result<(), CliError> {
    let output = match (&a.artifact, &a.input, &a.predictions) {
        (Some(art), Some(input), None) => {
            let artifact = read_artifact(art)?;
            let test = read_examples(input)?;
            let mut report = empirical_error(&artifact, &test)?;
            if let Some(eps) = a.epsilon.or(config.epsilon) {
                report = EvalReport::from_counts(report.errors, report.n, eps)?;
            }
            let sizes = size_stats(&artifact, &test)?;
            EvalOutput { report, sizes: sizes.all, sizes_correct: sizes.correct, sizes_incorrect: sizes.incorrect }
        }
        (None, None, Some(p)) => {
            let epsilon = required(a.epsilon, config.epsilon, "epsilon")?;
            let preds = io::read_predictions(open(p)?)?;
            let mut errors = 0u64;
            for (i, pr) in preds.iter().enumerate() {
                match pr.covered {
                    Some(false) => errors += 1,
                    Some(true) => {}
                    None => {
                        return Err(CliError::Schema(format!(
                            "prediction {} (`{}`): missing field `covered`",
                            i + 1,
                            pr.id
                        )))
                    }
                }
            }
            let report = EvalReport::from_counts(errors, preds.len() as u64, epsilon)?;
            let sizes: Vec<f64> = preds.iter().map(|p| p.size).collect();
            let pick = |want: bool| {
                let s: Vec<f64> = preds.iter().filter(|p| p.correct == Some(want)).map(|p| p.size).collect();
                SizeStats::from_sizes(&s)
            };
            EvalOutput {
                report,
                sizes: SizeStats::from_sizes(&sizes).ok_or(HarnessError::EmptyInput)?,
                sizes_correct: pick(true),
                sizes_incorrect: pick(false),
            }
        }
        _ => return Err(CliError::Usage("pass either --artifact with --input, or --predictions".into())),
    };
    let mut out = sink(&a.out)?;
    write_json_line(out.as_mut(), &output)
}

fn world_spec(arg: &WorldArg, config: &Config) -> Result<SyntheticSpec, CliError> {
    match (&arg.world, config.world) {
        (Some(name), Some(spec)) => {
            let named = SyntheticSpec::named(name).ok_or_else(|| CliError::Usage(format!("unknown world `{name}`")))?;
            // same kind: keep the configured parameters
            if std::mem::discriminant(&named) == std::mem::discriminant(&spec) {
                Ok(spec)
            } else {
                Ok(named)
            }
        }
        (Some(name), None) => SyntheticSpec::named(name).ok_or_else(|| CliError::Usage(format!("unknown world `{name}`"))),
        (None, Some(spec)) => Ok(spec),
        (None, None) => Err(CliError::Usage("missing --world (flag or config [world] table)".into())),
    }
}

fn pipeline_flags(
    cal: &CalibrationFlags,
    bound: Option<BoundKind>,
    calibration_size: Option<usize>,
    config: &Config,
) -> PipelineFlags {
    let defaults = PipelineFlags::default();
    PipelineFlags {
        calibrate: !(cal.no_calibrate || config.no_calibrate == Some(true)),
        bound: bound.or(config.bound).unwrap_or(defaults.bound),
        calibration_size: calibration_size.or(config.calibration_size).unwrap_or(defaults.calibration_size),
        step_mode: step_mode(cal, config),
    }
}

fn cmd_verify(a: VerifyArgs, config: &Config, seed: u64) -> Result<(), CliError> {
    let spec = world_spec(&a.world, config)?;
    let n = required(a.budget.n, config.n, "n")?;
    let epsilon = required(a.budget.epsilon, config.epsilon, "epsilon")?;
    let delta = required(a.budget.delta, config.delta, "delta")?;
    let trials = a.trials.or(config.trials).unwrap_or(1000);
    let flags = pipeline_flags(&a.cal, a.budget.bound, a.calibration_size, config);
    let params = PacParams::new(epsilon, delta, n).map_err(|e| CliError::Usage(e.to_string()))?;
    let world = spec.build()?;
    let report = match verify_pac(world.as_ref(), &params, trials, &flags, seed) {
        Ok(r) => r,
        Err(e) if e.is_infeasible() => {
            let mut out = sink(&OutputArg { output: None })?;
            write_json_line(out.as_mut(), &infeasible_report(flags.bound, n, epsilon, delta))?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(p) = &a.csv {
        let f = File::create(p).map_err(|e| CliError::Other(format!("{}: {e}", p.display())))?;
        harness::write_csv(BufWriter::new(f), &report.records)?;
    }
    let mut v = serde_json::to_value(&report).map_err(|e| CliError::Other(e.to_string()))?;
    v["within_delta"] = json!(report.within_delta());
    v["world_spec"] = serde_json::to_value(spec).map_err(|e| CliError::Other(e.to_string()))?;
    v["trial_seed"] = json!("splitmix64(master_seed + (trial + 1) * 0x9E3779B97F4A7C15)");
    let mut out = sink(&a.out)?;
    write_json_line(out.as_mut(), &v)
}

fn cmd_sweep(a: SweepArgs, config: &Config, seed: u64) -> Result<(), CliError> {
    let spec = world_spec(&a.world, config)?;
    let n = required(a.n, config.n, "n")?;
    let epsilons = a.epsilons.or_else(|| config.epsilons.clone()).unwrap_or_else(|| vec![0.01, 0.02, 0.05, 0.1, 0.2]);
    let deltas = a.deltas.or_else(|| config.deltas.clone()).unwrap_or_else(|| vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1]);
    let test_size = a.test_size.or(config.test_size).unwrap_or(1000);
    let flags = pipeline_flags(&a.cal, a.bound, a.calibration_size, config);
    let world = spec.build()?;
    let rows = sweep(world.as_ref(), &epsilons, &deltas, n as usize, &flags, seed, test_size)?;
    let out = sink(&a.out)?;
    harness::write_csv(out, &rows)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReportRow<'a> {
    id: &'a str,
    kind: &'static str,
    /// 1-based step for trajectory rows; empty otherwise.
    step: Option<usize>,
    size: f64,
    covered: Option<bool>,
    correct: Option<bool>,
}

fn cmd_report(a: ReportArgs) -> Result<(), CliError> {
    let artifact = read_artifact(&a.artifact)?;
    let records = io::read_records(open(&a.input)?)?;
    let sets = records
        .par_iter()
        .map(|rec| {
            let set = artifact.confidence_set(&rec.forecast)?;
            let covered = rec.example().map(|e| artifact.covers(&e)).transpose()?;
            Ok((set, covered))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let mut rows = Vec::new();
    for (rec, (set, covered)) in records.iter().zip(&sets) {
        let correct = rec.example().as_ref().and_then(top1_correct);
        let kind = rec.forecast.kind();
        match set {
            ConfidenceSet::Trajectory(ts) => {
                for (t, size) in ts.step_sizes().into_iter().enumerate() {
                    rows.push(ReportRow { id: &rec.id, kind, step: Some(t + 1), size, covered: *covered, correct });
                }
            }
            other => rows.push(ReportRow { id: &rec.id, kind, step: None, size: other.size(), covered: *covered, correct }),
        }
    }
    let out = sink(&a.out)?;
    harness::write_csv(out, &rows)?;
    Ok(())
}

fn cmd_generate(a: GenerateArgs, config: &Config, seed: u64) -> Result<(), CliError> {
    let spec = world_spec(&a.world, config)?;
    let n = required(a.n, config.n, "n")?;
    let world = spec.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = world.draw(&mut rng, n as usize, &a.tag);
    let mut out = sink(&a.out)?;
    for e in examples {
        let v = io::record_json(&ForecastRecord::from(e));
        write_json_line(out.as_mut(), &v)?;
    }
    out.flush()?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    let Some(path) = path else { return Ok(Config::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let config = load_config(cli.config.as_deref())?;
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    match cli.command {
        Command::Alpha(a) => cmd_alpha(a, &config),
        Command::Calibrate(a) => cmd_calibrate(a, &config),
        Command::Fit(a) => cmd_fit(a, &config),
        Command::Predict(a) => cmd_predict(a, &config),
        Command::Eval(a) => cmd_eval(a, &config),
        Command::Baseline(a) => cmd_baseline(a, &config),
        Command::VerifyPac(a) => cmd_verify(a, &config, seed),
        Command::Sweep(a) => cmd_sweep(a, &config, seed),
        Command::Report(a) => cmd_report(a),
        Command::Generate(a) => cmd_generate(a, &config, seed),
    }
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}
