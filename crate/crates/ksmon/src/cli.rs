//! The `ksmon` command-line front end.
//!
//! Four subcommands tie the library together:
//!
//! * `calibrate` — fit a directory of historical batch CSVs and search the
//!   control limit; writes `ucl.json` and `ucl_curve.csv`.
//! * `monitor` — feed recorded batches (single-batch CSVs or a multi-step
//!   stream CSV) through a monitor state, appending to a step log and
//!   re-serializing the state after every step. Exits 2 when an alarm is
//!   raised, 0 otherwise.
//! * `simulate` — execute a study manifest (see the study module).
//! * `snr` — solve blend weights / jump heights for target SNRs.
//!
//! Settings merge in three layers: built-in defaults, then an optional TOML
//! config file (`--config`, with `[fit]` and `[calibration]` sections and
//! top-level `seed`/`workers`), then command-line flags. Every run writes
//! its fully-resolved configuration to `resolved_config.json` in the output
//! directory, and appends wall-clock timestamps only to the `run.log`
//! sidecar, so all other outputs are byte-reproducible from the seed.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::calibrate::{find_ucl, CalibrationConfig};
use crate::data::{read_batch_csv, read_batch_series_csv, ObservationBatch};
use crate::error::{Error, Result};
use crate::monitor::{
    fit_historical, HistoricalResidualScheme, MonitorState, StepLogWriter, StepOutcome,
};
use crate::sim::{
    localized_a_for_snr, mc_snr_estimate, solve_lambda_for_snr, ForcingKind, GeneratorSpec,
    InControlKind,
};
use crate::study::{run_study, StudyManifest};
use crate::tree::{FitConfig, RegressorKind};

/// Nonparametric profile monitoring: regression-tree ensembles compared by
/// a max-KS control chart.
#[derive(Debug, Parser)]
#[command(name = "ksmon", version, about)]
pub struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit historical batches and search the control limit for a target
    /// in-control ARL.
    Calibrate(CalibrateArgs),
    /// Feed recorded batches through a (new or resumed) monitor state.
    Monitor(MonitorArgs),
    /// Run a study manifest of simulated scenario cells.
    Simulate(SimulateArgs),
    /// Solve generator parameters for target signal-to-noise ratios.
    Snr(SnrArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML config file ([fit], [calibration], seed, workers).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Root RNG seed; overrides the config file and manifest.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker-pool size (default: available parallelism). Any value
    /// produces identical outputs.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Directory of historical batch CSVs (x1..xp,y), ordered by filename.
    #[arg(long, value_name = "DIR")]
    historical: PathBuf,
    /// Target in-control average run length.
    #[arg(long)]
    target_arl0: Option<f64>,
    /// Bootstrap runs per ARL0 estimate.
    #[arg(long)]
    runs: Option<usize>,
    /// Censoring horizon for a single bootstrap run.
    #[arg(long)]
    max_horizon: Option<usize>,
    /// Regressor: tree or forest.
    #[arg(long, value_parser = parse_method)]
    method: Option<RegressorKind>,
    /// Historical residual scheme: full_ensemble, leave_one_out_ensemble, or
    /// in_sample.
    #[arg(long, value_parser = parse_scheme)]
    residual_scheme: Option<HistoricalResidualScheme>,
}

#[derive(Debug, Args)]
struct MonitorArgs {
    /// Serialized monitor state to resume (also where updated state is
    /// written; default <out>/state.json).
    #[arg(long, value_name = "FILE")]
    state: Option<PathBuf>,
    /// Directory of historical batch CSVs for starting a fresh monitor.
    #[arg(long, value_name = "DIR", requires = "ucl")]
    historical: Option<PathBuf>,
    /// Control limit for a fresh monitor (from `calibrate`).
    #[arg(long)]
    ucl: Option<f64>,
    /// Single-batch CSV files (x1..xp,y), one monitoring step each.
    #[arg(long, value_name = "FILE", conflicts_with = "stream")]
    batch: Vec<PathBuf>,
    /// Multi-step CSV (t,x1..xp,y); steps already in the state are skipped.
    #[arg(long, value_name = "FILE")]
    stream: Option<PathBuf>,
    /// Regressor for a fresh monitor: tree or forest.
    #[arg(long, value_parser = parse_method)]
    method: Option<RegressorKind>,
    /// Historical residual scheme for a fresh monitor.
    #[arg(long, value_parser = parse_scheme)]
    residual_scheme: Option<HistoricalResidualScheme>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Study manifest (.toml or .json).
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
}

#[derive(Debug, Args)]
struct SnrArgs {
    /// In-control mean: linear or nonlinear.
    #[arg(long, value_parser = parse_in_control)]
    in_control: InControlKind,
    /// Forcing: sinusoidal, nondifferentiable, or localized.
    #[arg(long, value_parser = parse_forcing)]
    forcing: ForcingKind,
    /// Target SNRs (comma-separated).
    #[arg(long, value_delimiter = ',', required = true)]
    targets: Vec<f64>,
    /// Monte-Carlo draws per estimate.
    #[arg(long, default_value_t = 200_000)]
    samples: usize,
}

fn parse_method(s: &str) -> std::result::Result<RegressorKind, String> {
    match s {
        "tree" => Ok(RegressorKind::Tree),
        "forest" => Ok(RegressorKind::Forest),
        other => Err(format!("unknown method `{other}` (expected tree or forest)")),
    }
}

fn parse_scheme(s: &str) -> std::result::Result<HistoricalResidualScheme, String> {
    match s {
        "in_sample" => Ok(HistoricalResidualScheme::InSample),
        "full_ensemble" => Ok(HistoricalResidualScheme::FullEnsemble),
        "leave_one_out_ensemble" => Ok(HistoricalResidualScheme::LeaveOneOutEnsemble),
        other => Err(format!(
            "unknown residual scheme `{other}` (expected in_sample, full_ensemble, or leave_one_out_ensemble)"
        )),
    }
}

fn parse_in_control(s: &str) -> std::result::Result<InControlKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_forcing(s: &str) -> std::result::Result<ForcingKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parse the process arguments, run the selected command, and map the
/// outcome to the process exit code (0 success / no alarm, 2 alarm raised,
/// 1 error).
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(error) => {
            eprintln!("error: {error}");
            let mut source = std::error::Error::source(&error);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8> {
    let run = RunConfig::resolve(&cli.common)?;
    match cli.command {
        Command::Calibrate(args) => cmd_calibrate(run, args),
        Command::Monitor(args) => cmd_monitor(run, args),
        Command::Simulate(args) => cmd_simulate(run, args),
        Command::Snr(args) => cmd_snr(run, args),
    }
}

/// Optional config-file layer between defaults and flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    workers: Option<usize>,
    fit: Option<FitConfig>,
    calibration: Option<CalibrationSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationSection {
    target_arl0: Option<f64>,
    num_runs: Option<usize>,
    max_horizon: Option<usize>,
}

/// Fully-merged settings a command runs with.
#[derive(Debug)]
struct RunConfig {
    seed: Option<u64>,
    workers: Option<usize>,
    out: PathBuf,
    fit: FitConfig,
    calibration: CalibrationConfig,
}

impl RunConfig {
    fn resolve(common: &CommonArgs) -> Result<Self> {
        let file = match &common.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                toml::from_str::<ConfigFile>(&text)
                    .map_err(|e| Error::invalid_input(format!("config file: {e}")))?
            }
            None => ConfigFile::default(),
        };
        let fit = file.fit.unwrap_or_default();
        let section = file.calibration.unwrap_or_default();
        let defaults = CalibrationConfig::default();
        let calibration = CalibrationConfig {
            target_arl0: section.target_arl0.unwrap_or(defaults.target_arl0),
            num_runs: section.num_runs.unwrap_or(defaults.num_runs),
            max_horizon: section.max_horizon.or(defaults.max_horizon),
            rng_seed: 0,
            fit_config: fit.clone(),
        };
        Ok(RunConfig {
            seed: common.seed.or(file.seed),
            workers: common.workers.or(file.workers),
            out: common.out.clone(),
            fit,
            calibration,
        })
    }

    fn require_seed(&self, command: &str) -> Result<u64> {
        self.seed.ok_or_else(|| {
            Error::invalid_input(format!(
                "{command} requires an explicit seed (--seed or the config file)"
            ))
        })
    }
}

/// Append-only sidecar log; the only place timestamps go.
struct RunLog {
    file: std::fs::File,
}

impl RunLog {
    fn open(out: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(out.join("run.log"))?;
        Ok(RunLog { file })
    }

    fn log(&mut self, message: &str) {
        let epoch = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs();
        let _ = writeln!(self.file, "{epoch} {message}");
    }
}

fn write_resolved_config(out: &Path, resolved: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(resolved)?;
    text.push('\n');
    std::fs::write(out.join("resolved_config.json"), text)?;
    Ok(())
}

/// Read a directory of batch CSVs ordered by filename, assigning the
/// historical time indices −m+1 … 0.
fn read_historical_dir(dir: &Path) -> Result<Vec<ObservationBatch>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|entry| entry.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("csv"))
        .collect();
    if paths.is_empty() {
        return Err(Error::invalid_input(format!(
            "no .csv files in historical directory `{}`",
            dir.display()
        )));
    }
    paths.sort();
    let m = paths.len() as i64;
    paths
        .iter()
        .enumerate()
        .map(|(j, path)| read_batch_csv(path, j as i64 + 1 - m))
        .collect()
}

fn in_worker_pool<T: Send>(workers: Option<usize>, work: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        Some(count) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(count)
                .build()
                .map_err(|e| Error::invalid_state(format!("cannot build worker pool: {e}")))?;
            pool.install(work)
        }
        None => work(),
    }
}

fn write_curve_csv(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let mut text = String::from("delta,arl0\n");
    for (delta, arl0) in curve {
        text.push_str(&format!("{delta},{arl0}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_calibrate(run: RunConfig, args: CalibrateArgs) -> Result<u8> {
    let seed = run.require_seed("calibrate")?;
    std::fs::create_dir_all(&run.out)?;
    let mut log = RunLog::open(&run.out)?;

    let mut fit = FitConfig { rng_seed: seed, ..run.fit };
    if let Some(method) = args.method {
        fit.regressor_kind = method;
    }
    let calibration = CalibrationConfig {
        target_arl0: args.target_arl0.unwrap_or(run.calibration.target_arl0),
        num_runs: args.runs.unwrap_or(run.calibration.num_runs),
        max_horizon: args.max_horizon.or(run.calibration.max_horizon),
        rng_seed: seed,
        fit_config: fit.clone(),
    };
    let scheme = args.residual_scheme.unwrap_or_default();
    write_resolved_config(
        &run.out,
        &serde_json::json!({
            "command": "calibrate",
            "historical": args.historical.display().to_string(),
            "seed": seed,
            "workers": run.workers,
            "residual_scheme": scheme,
            "calibration": calibration,
        }),
    )?;

    log.log(&format!("calibrate started: historical={}", args.historical.display()));
    let batches = read_historical_dir(&args.historical)?;
    let entries = fit_historical(&batches, &fit, scheme)?;
    let result = in_worker_pool(run.workers, || find_ucl(&batches, &entries, &calibration));
    let result = match result {
        Ok(result) => result,
        Err(Error::CalibrationFailed { target, max_estimate, curve }) => {
            // leave the examined curve behind for diagnosis
            write_curve_csv(&run.out.join("ucl_curve.csv"), &curve)?;
            log.log("calibrate failed: target unreachable");
            return Err(Error::CalibrationFailed { target, max_estimate, curve });
        }
        Err(other) => return Err(other),
    };

    let mut ucl_json = serde_json::to_string_pretty(&result)?;
    ucl_json.push('\n');
    std::fs::write(run.out.join("ucl.json"), ucl_json)?;
    write_curve_csv(&run.out.join("ucl_curve.csv"), &result.curve)?;
    log.log(&format!("calibrate finished: ucl={}", result.ucl));
    println!(
        "ucl {} (estimated ARL0 {}, {} of {} runs censored)",
        result.ucl, result.estimated_arl0, result.censored_runs, calibration.num_runs
    );
    Ok(0)
}

fn cmd_monitor(run: RunConfig, args: MonitorArgs) -> Result<u8> {
    std::fs::create_dir_all(&run.out)?;
    let mut log = RunLog::open(&run.out)?;

    if args.batch.is_empty() && args.stream.is_none() {
        return Err(Error::invalid_input("nothing to monitor: pass --batch files or --stream"));
    }

    let state_path = args.state.clone().unwrap_or_else(|| run.out.join("state.json"));
    let resuming = state_path.is_file();
    let mut state = if resuming {
        MonitorState::load(&state_path)?
    } else {
        let historical = args.historical.as_ref().ok_or_else(|| {
            Error::invalid_input(
                "no saved state found: pass --historical and --ucl to start a fresh monitor",
            )
        })?;
        let ucl = args
            .ucl
            .ok_or_else(|| Error::invalid_input("a fresh monitor needs --ucl from calibration"))?;
        let mut fit = FitConfig { rng_seed: run.seed.unwrap_or(0), ..run.fit.clone() };
        if let Some(method) = args.method {
            fit.regressor_kind = method;
        }
        let batches = read_historical_dir(historical)?;
        let entries = fit_historical(&batches, &fit, args.residual_scheme.unwrap_or_default())?;
        MonitorState::new(entries, ucl, fit)?
    };

    write_resolved_config(
        &run.out,
        &serde_json::json!({
            "command": "monitor",
            "state": state_path.display().to_string(),
            "resumed": resuming,
            "ucl": state.ucl(),
            "m": state.m(),
            "starting_t": state.current_t(),
            "fit": state.fit_config(),
            "batch_files": args.batch.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "stream": args.stream.as_ref().map(|p| p.display().to_string()),
        }),
    )?;
    log.log(&format!(
        "monitor started: t={} m={} ucl={}",
        state.current_t(),
        state.m(),
        state.ucl()
    ));

    let log_path = run.out.join("steps.csv");
    let mut step_log = if resuming {
        StepLogWriter::append_to(&log_path)?
    } else {
        StepLogWriter::create(&log_path)?
    };

    let mut steps_this_run = 0usize;
    let mut alarm: Option<StepOutcome> = None;
    let process = |state: &mut MonitorState,
                       batch: &ObservationBatch,
                       step_log: &mut StepLogWriter|
     -> Result<Option<StepOutcome>> {
        let outcome = state.monitor_step(batch)?;
        step_log.append(&outcome)?;
        state.save(&state_path)?;
        Ok(Some(outcome).filter(|o| o.alarmed))
    };

    if let Some(stream) = &args.stream {
        for batch in read_batch_series_csv(stream)? {
            if batch.time_index() < state.current_t() {
                continue; // already monitored before this resume
            }
            if batch.time_index() != state.current_t() {
                return Err(Error::invalid_input(format!(
                    "stream jumps to t = {} but the monitor expects t = {}",
                    batch.time_index(),
                    state.current_t()
                )));
            }
            steps_this_run += 1;
            if let Some(outcome) = process(&mut state, &batch, &mut step_log)? {
                alarm = Some(outcome);
                break;
            }
        }
    } else {
        for path in &args.batch {
            let batch = read_batch_csv(path, state.current_t())?;
            steps_this_run += 1;
            if let Some(outcome) = process(&mut state, &batch, &mut step_log)? {
                alarm = Some(outcome);
                break;
            }
        }
    }

    match alarm {
        Some(outcome) => {
            log.log(&format!("alarm at t={} xi={}", outcome.t, outcome.xi));
            println!("alarm raised at t={} (xi {} >= ucl {})", outcome.t, outcome.xi, state.ucl());
            Ok(2)
        }
        None => {
            log.log(&format!("no alarm over {steps_this_run} steps"));
            println!("completed, no alarm ({steps_this_run} steps, monitor at t={})", state.current_t());
            Ok(0)
        }
    }
}

fn cmd_simulate(run: RunConfig, args: SimulateArgs) -> Result<u8> {
    std::fs::create_dir_all(&run.out)?;
    let mut log = RunLog::open(&run.out)?;

    let manifest = StudyManifest::load(&args.manifest)?;
    let seed = run.seed.or(manifest.seed).ok_or_else(|| {
        Error::Manifest("no seed: set `seed` in the manifest or pass --seed".into())
    })?;
    write_resolved_config(
        &run.out,
        &serde_json::json!({
            "command": "simulate",
            "manifest": args.manifest.display().to_string(),
            "seed": seed,
            "workers": run.workers,
            "resolved_manifest": manifest,
        }),
    )?;

    log.log(&format!("simulate started: manifest={}", args.manifest.display()));
    let summary = run_study(&manifest, Some(seed), run.workers, &run.out)?;
    log.log(&format!(
        "simulate finished: {} scenarios, {} failures",
        summary.scenarios.len(),
        summary.failures.len()
    ));
    println!(
        "study complete: {} scenarios, {} trial rows, {} failed cells",
        summary.scenarios.len(),
        summary.scenarios.iter().map(|s| s.n_trials).sum::<usize>(),
        summary.failures.len()
    );
    if summary.failures.is_empty() {
        Ok(0)
    } else {
        for failure in &summary.failures {
            match failure.set_id {
                Some(set) => eprintln!(
                    "failed cell: {} set {}: {}",
                    failure.scenario_id, set, failure.message
                ),
                None => eprintln!("failed cell: {}: {}", failure.scenario_id, failure.message),
            }
        }
        Ok(1)
    }
}

fn cmd_snr(run: RunConfig, args: SnrArgs) -> Result<u8> {
    std::fs::create_dir_all(&run.out)?;
    let mut log = RunLog::open(&run.out)?;
    let seed = run.seed.unwrap_or(0);

    for target in &args.targets {
        if !target.is_finite() || *target < 0.0 {
            return Err(Error::invalid_input("SNR targets must be nonnegative"));
        }
        if *target == 0.0 && args.forcing != ForcingKind::Localized {
            return Err(Error::invalid_input(
                "an SNR of 0 is only meaningful for the localized forcing (a = 0)",
            ));
        }
    }
    write_resolved_config(
        &run.out,
        &serde_json::json!({
            "command": "snr",
            "in_control": args.in_control,
            "forcing": args.forcing,
            "targets": args.targets,
            "samples": args.samples,
            "seed": seed,
        }),
    )?;
    log.log(&format!("snr: {} {} targets {:?}", args.in_control, args.forcing, args.targets));

    println!("in_control,forcing,target_snr,parameter,value,achieved_snr");
    for target in &args.targets {
        let (parameter, value, spec) = match args.forcing {
            ForcingKind::Localized => {
                let jump = localized_a_for_snr(*target, 0.1, 0.0)?;
                let spec = GeneratorSpec {
                    in_control: args.in_control,
                    forcing: args.forcing,
                    lambda: 0.0,
                    localized_jump: jump,
                    localized_volume: 0.1,
                    tau: 0,
                    n: 1,
                    rng_seed: seed,
                };
                ("jump", jump, spec)
            }
            _ => {
                let lambda =
                    solve_lambda_for_snr(args.in_control, args.forcing, *target, args.samples, seed)?;
                let spec = GeneratorSpec {
                    in_control: args.in_control,
                    forcing: args.forcing,
                    lambda,
                    localized_jump: 0.0,
                    localized_volume: 0.1,
                    tau: 0,
                    n: 1,
                    rng_seed: seed,
                };
                ("lambda", lambda, spec)
            }
        };
        let achieved = mc_snr_estimate(&spec, args.samples)?;
        println!(
            "{},{},{target},{parameter},{value},{achieved}",
            args.in_control, args.forcing
        );
    }
    Ok(0)
}
