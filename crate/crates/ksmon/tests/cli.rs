//! End-to-end tests of the `ksmon` binary: spawn the real executable,
//! check exit codes, stdout tables, and the artifacts left in `--out`.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ksmon::data::{write_batch_csv, write_batch_series_csv, ObservationBatch};
use ksmon::seed::mix;
use ksmon::sim::{generate_profile, ForcingKind, GeneratorSpec, InControlKind};

fn ksmon(out: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ksmon"));
    cmd.arg("--out").arg(out);
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("failed to spawn ksmon")
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8(output.stdout.clone()).expect("stdout is utf-8")
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8(output.stderr.clone()).expect("stderr is utf-8")
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("ksmon terminated by signal")
}

/// A generator that never leaves control (λ = 1 makes φ = f at every step).
fn null_spec(n: usize, seed: u64) -> GeneratorSpec {
    GeneratorSpec {
        in_control: InControlKind::Linear,
        forcing: ForcingKind::Sinusoidal,
        lambda: 1.0,
        localized_jump: 0.0,
        localized_volume: 0.1,
        tau: 1_000_000,
        n,
        rng_seed: seed,
    }
}

fn null_batch(n: usize, seed: u64, t: i64) -> ObservationBatch {
    let spec = null_spec(n, seed);
    generate_profile(&spec, t, mix(seed, &[0xBA7C4, t as u64])).unwrap()
}

/// Write `m` in-control historical batch CSVs into `dir`.
fn write_historical_dir(dir: &Path, m: usize, n: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    for j in 0..m {
        let t = j as i64 + 1 - m as i64;
        let batch = null_batch(n, seed, t);
        write_batch_csv(&dir.join(format!("batch_{j:02}.csv")), &batch).unwrap();
    }
}

/// An in-control monitoring stream `t = 1..=steps`, with an optional +shift
/// applied to responses from `shift_from` onward.
fn write_stream(
    path: &Path,
    steps: i64,
    n: usize,
    seed: u64,
    shift_from: Option<(i64, f64)>,
) {
    let mut batches = Vec::new();
    for t in 1..=steps {
        let mut batch = null_batch(n, seed, t);
        if let Some((from, shift)) = shift_from {
            if t >= from {
                let shifted: Vec<f64> = batch.responses().iter().map(|y| y + shift).collect();
                batch =
                    ObservationBatch::new(t, batch.p(), batch.predictors().to_vec(), shifted)
                        .unwrap();
            }
        }
        batches.push(batch);
    }
    write_batch_series_csv(path, &batches).unwrap();
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn calibrate_writes_grid_ucl_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let hist = dir.path().join("hist");
    write_historical_dir(&hist, 5, 32, 41);

    let run_once = |out: PathBuf| -> (String, String, String) {
        std::fs::create_dir_all(&out).unwrap();
        let output = run(ksmon(&out)
            .args(["calibrate", "--historical"])
            .arg(&hist)
            .args(["--seed", "7", "--target-arl0", "5", "--runs", "20"]));
        assert_eq!(exit_code(&output), 0, "stderr: {}", stderr_of(&output));
        (
            stdout_of(&output),
            read(&out.join("ucl.json")),
            read(&out.join("ucl_curve.csv")),
        )
    };

    let (stdout, ucl_json, curve_csv) = run_once(dir.path().join("a"));
    assert!(stdout.starts_with("ucl "), "stdout: {stdout}");

    let result: serde_json::Value = serde_json::from_str(&ucl_json).unwrap();
    let ucl = result["ucl"].as_f64().unwrap();
    let estimated = result["estimated_arl0"].as_f64().unwrap();
    // the searched grid is {k/n} for the shared batch size n = 32
    let k = ucl * 32.0;
    assert_eq!(k, k.round(), "ucl {ucl} is not on the 1/32 grid");
    assert!((1.0..=32.0).contains(&k));
    assert!(estimated >= 5.0, "estimated ARL0 {estimated} below target");

    // the curve CSV mirrors the JSON curve: one row per examined δ,
    // ending at the accepted one
    let rows: Vec<&str> = curve_csv.trim_end().lines().collect();
    assert_eq!(rows[0], "delta,arl0");
    assert_eq!(rows.len() - 1, k as usize);
    let last = rows.last().unwrap();
    assert_eq!(*last, format!("{ucl},{estimated}"));
    for row in &rows[1..rows.len() - 1] {
        let arl0: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!(arl0 < 5.0, "earlier grid point already reached target: {row}");
    }

    // byte-identical artifacts on a rerun with the same seed
    let (_, ucl_json_b, curve_csv_b) = run_once(dir.path().join("b"));
    assert_eq!(ucl_json, ucl_json_b);
    assert_eq!(curve_csv, curve_csv_b);
}

#[test]
fn calibrate_single_file_small_target_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let hist = dir.path().join("hist");
    write_historical_dir(&hist, 1, 24, 5);
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();

    let output = run(ksmon(&out)
        .args(["calibrate", "--historical"])
        .arg(&hist)
        .args(["--seed", "3", "--target-arl0", "2", "--runs", "12"]));
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr_of(&output));
    let result: serde_json::Value =
        serde_json::from_str(&read(&out.join("ucl.json"))).unwrap();
    let ucl = result["ucl"].as_f64().unwrap();
    assert!(ucl < 1.0, "target 2 should be reached at a small δ, got {ucl}");
}

#[test]
fn calibrate_rejects_empty_directory_and_missing_seed() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();

    let output =
        run(ksmon(&out).args(["calibrate", "--historical"]).arg(&empty).args(["--seed", "1"]));
    assert_eq!(exit_code(&output), 1);
    assert!(stderr_of(&output).contains("no .csv files"), "stderr: {}", stderr_of(&output));

    let hist = dir.path().join("hist");
    write_historical_dir(&hist, 1, 8, 2);
    let output = run(ksmon(&out).args(["calibrate", "--historical"]).arg(&hist));
    assert_eq!(exit_code(&output), 1);
    assert!(
        stderr_of(&output).contains("requires an explicit seed"),
        "stderr: {}",
        stderr_of(&output)
    );
}

#[test]
fn monitor_null_stream_completes_without_alarm() {
    let dir = tempfile::tempdir().unwrap();
    let hist = dir.path().join("hist");
    write_historical_dir(&hist, 3, 64, 11);
    let stream = dir.path().join("stream.csv");
    write_stream(&stream, 30, 64, 11, None);
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();

    let output = run(ksmon(&out)
        .args(["monitor", "--historical"])
        .arg(&hist)
        .args(["--ucl", "0.6", "--stream"])
        .arg(&stream));
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr_of(&output));
    assert!(stdout_of(&output).contains("no alarm"), "stdout: {}", stdout_of(&output));

    let steps: Vec<String> = read(&out.join("steps.csv")).lines().map(String::from).collect();
    assert_eq!(steps[0], "t,xi,alarmed,argmax_j");
    assert_eq!(steps.len(), 31, "expected 30 step rows");
    for (i, row) in steps[1..].iter().enumerate() {
        assert!(row.starts_with(&format!("{},", i + 1)), "row {row}");
        assert!(row.contains(",false,"), "unexpected alarm in {row}");
    }
    // state was re-serialized after the last step
    let state: serde_json::Value = serde_json::from_str(&read(&out.join("state.json"))).unwrap();
    assert_eq!(state["current_t"], 31);
}

#[test]
fn monitor_reports_alarm_for_shifted_stream() {
    let dir = tempfile::tempdir().unwrap();
    let hist = dir.path().join("hist");
    write_historical_dir(&hist, 3, 64, 23);
    let stream = dir.path().join("stream.csv");
    write_stream(&stream, 6, 64, 23, Some((3, 10.0)));
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();

    let output = run(ksmon(&out)
        .args(["monitor", "--historical"])
        .arg(&hist)
        .args(["--ucl", "0.6", "--stream"])
        .arg(&stream));
    assert_eq!(exit_code(&output), 2, "stderr: {}", stderr_of(&output));
    assert!(stdout_of(&output).contains("alarm raised at t=3"), "stdout: {}", stdout_of(&output));

    // processing stopped at the alarm: rows t = 1, 2, 3 only
    let steps: Vec<String> = read(&out.join("steps.csv")).lines().map(String::from).collect();
    assert_eq!(steps.len(), 4);
    assert!(steps[3].starts_with("3,"));
    assert!(steps[3].contains(",true,"));
}

#[test]
fn monitor_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let hist = dir.path().join("hist");
    write_historical_dir(&hist, 3, 48, 31);
    let full = dir.path().join("full.csv");
    write_stream(&full, 10, 48, 31, None);
    let head = dir.path().join("head.csv");
    write_stream(&head, 4, 48, 31, None);

    let uninterrupted = dir.path().join("one_shot");
    std::fs::create_dir_all(&uninterrupted).unwrap();
    let output = run(ksmon(&uninterrupted)
        .args(["monitor", "--historical"])
        .arg(&hist)
        .args(["--ucl", "0.9", "--stream"])
        .arg(&full));
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr_of(&output));

    // same stream, but interrupted after t = 4 and resumed from the saved
    // state; already-monitored steps in the file are skipped
    let resumed = dir.path().join("resumed");
    std::fs::create_dir_all(&resumed).unwrap();
    let output = run(ksmon(&resumed)
        .args(["monitor", "--historical"])
        .arg(&hist)
        .args(["--ucl", "0.9", "--stream"])
        .arg(&head));
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr_of(&output));
    let output = run(ksmon(&resumed).args(["monitor", "--stream"]).arg(&full));
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr_of(&output));
    assert!(stdout_of(&output).contains("(6 steps"), "stdout: {}", stdout_of(&output));

    assert_eq!(
        read(&uninterrupted.join("steps.csv")),
        read(&resumed.join("steps.csv")),
        "resumed step log diverged from the uninterrupted run"
    );
    assert_eq!(read(&uninterrupted.join("state.json")), read(&resumed.join("state.json")));
}

#[test]
fn monitor_rejects_gapped_stream() {
    let dir = tempfile::tempdir().unwrap();
    let hist = dir.path().join("hist");
    write_historical_dir(&hist, 2, 16, 3);

    // blocks t = 2.. while the fresh monitor expects t = 1
    let mut batches = Vec::new();
    for t in 2..=3 {
        batches.push(null_batch(16, 3, t));
    }
    let stream = dir.path().join("gapped.csv");
    write_batch_series_csv(&stream, &batches).unwrap();

    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    let output = run(ksmon(&out)
        .args(["monitor", "--historical"])
        .arg(&hist)
        .args(["--ucl", "0.9", "--stream"])
        .arg(&stream));
    assert_eq!(exit_code(&output), 1);
    assert!(stderr_of(&output).contains("expects t = 1"), "stderr: {}", stderr_of(&output));
}

#[test]
fn snr_reports_published_lambda_values() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(ksmon(dir.path()).args([
        "snr",
        "--in-control",
        "linear",
        "--forcing",
        "sinusoidal",
        "--targets",
        "3,5",
        "--seed",
        "0",
    ]));
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr_of(&output));
    let stdout = stdout_of(&output);
    let lines: Vec<&str> = stdout.trim_end().lines().collect();
    assert_eq!(lines[0], "in_control,forcing,target_snr,parameter,value,achieved_snr");
    assert_eq!(lines.len(), 3);

    let parse =
        |line: &str| -> Vec<String> { line.split(',').map(|s| s.to_string()).collect() };
    for (line, target, expected_lambda) in
        [(lines[1], "3", 0.4568), (lines[2], "5", 0.2986)]
    {
        let fields = parse(line);
        assert_eq!(&fields[..4], &["linear", "sinusoidal", target, "lambda"]);
        let lambda: f64 = fields[4].parse().unwrap();
        assert!(
            (lambda - expected_lambda).abs() < 0.01,
            "target {target}: lambda {lambda} vs published {expected_lambda}"
        );
        let achieved: f64 = fields[5].parse().unwrap();
        let target: f64 = target.parse().unwrap();
        assert!((achieved - target).abs() / target < 0.05, "achieved {achieved} off target");
    }
}

#[test]
fn snr_localized_uses_closed_form_jump() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(ksmon(dir.path()).args([
        "snr",
        "--in-control",
        "nonlinear",
        "--forcing",
        "localized",
        "--targets",
        "0,3",
    ]));
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr_of(&output));
    let stdout = stdout_of(&output);
    let lines: Vec<&str> = stdout.trim_end().lines().collect();
    assert_eq!(lines.len(), 3);

    let zero: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(zero[3], "jump");
    assert_eq!(zero[4].parse::<f64>().unwrap(), 0.0);
    assert_eq!(zero[5].parse::<f64>().unwrap(), 0.0);

    let three: Vec<&str> = lines[2].split(',').collect();
    let jump: f64 = three[4].parse().unwrap();
    assert!((jump - 5.7735).abs() < 1e-3, "jump {jump} vs published 5.7735");
    let achieved: f64 = three[5].parse().unwrap();
    assert!((achieved - 3.0).abs() / 3.0 < 0.05, "achieved {achieved} off target 3");
}

#[test]
fn snr_rejects_zero_target_for_blended_forcings() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(ksmon(dir.path()).args([
        "snr",
        "--in-control",
        "linear",
        "--forcing",
        "sinusoidal",
        "--targets",
        "0",
    ]));
    assert_eq!(exit_code(&output), 1);
    assert!(stderr_of(&output).contains("localized"), "stderr: {}", stderr_of(&output));
}

#[test]
fn simulate_fixture_manifest_replays_recorded_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("study.toml");
    std::fs::write(
        &manifest,
        r#"
schema_version = 1
seed = 1

[[scenarios]]
id = "toy"
kind = "fixture"
tau = 10
records = [
    { t = 11, false_alarms = 1 },
    { t = 11, false_alarms = 0 },
    { t = 11, false_alarms = 0 },
    { t = 11, false_alarms = 1 },
    { t = 12, false_alarms = 0 },
]
"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();

    let output = run(ksmon(&out).args(["simulate", "--manifest"]).arg(&manifest));
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr_of(&output));

    let aggregate = read(&out.join("aggregate.csv"));
    let lines: Vec<&str> = aggregate.trim_end().lines().collect();
    assert_eq!(lines[0], "scenario_id,arl1,arl1_stderr,far,n_trials");
    assert_eq!(lines.len(), 2);
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields[0], "toy");
    assert_eq!(fields[1].parse::<f64>().unwrap(), 1.2);
    assert_eq!(fields[3].parse::<f64>().unwrap(), 2.0 / 7.0);
    assert_eq!(fields[4], "5");

    let trials = read(&out.join("trials.csv"));
    assert_eq!(trials.lines().count(), 6, "header + 5 replayed trials");
}

#[test]
fn simulate_generated_cell_produces_trial_and_aggregate_rows() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("study.toml");
    std::fs::write(
        &manifest,
        r#"
schema_version = 1
seed = 29
n = 24
target_arl0 = 2.0
calibration_runs = 6
max_horizon = 30
snr_samples = 20000

[[scenarios]]
id = "lin_sin_3"
kind = "generated"
in_control = "linear"
forcing = "sinusoidal"
snr = 3.0
m = 2
tau = 0
method = "tree"
sets = 2
trials_per_set = 2
"#,
    )
    .unwrap();

    let run_with_workers = |out: PathBuf, workers: &str| -> (String, String) {
        std::fs::create_dir_all(&out).unwrap();
        let output = run(ksmon(&out)
            .args(["simulate", "--manifest"])
            .arg(&manifest)
            .args(["--workers", workers]));
        assert_eq!(exit_code(&output), 0, "stderr: {}", stderr_of(&output));
        (read(&out.join("trials.csv")), read(&out.join("aggregate.csv")))
    };

    let (trials, aggregate) = run_with_workers(dir.path().join("w1"), "1");
    assert_eq!(trials.lines().count(), 5, "header + 2 sets x 2 trials:\n{trials}");
    let lines: Vec<&str> = aggregate.trim_end().lines().collect();
    assert_eq!(lines.len(), 2, "one aggregate row:\n{aggregate}");
    assert!(lines[1].starts_with("lin_sin_3,"));

    // worker count must not change any output byte
    let (trials_w2, aggregate_w2) = run_with_workers(dir.path().join("w2"), "2");
    assert_eq!(trials, trials_w2);
    assert_eq!(aggregate, aggregate_w2);
}

#[test]
fn shipped_manifests_parse_and_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../manifests");
    let mut seen = 0;
    for entry in std::fs::read_dir(&root).expect("manifests directory in the repo root") {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        seen += 1;
        let manifest = ksmon::study::StudyManifest::load(&path)
            .unwrap_or_else(|e| panic!("{} does not load: {e}", path.display()));
        assert!(manifest.seed.is_some(), "{} must carry its own seed", path.display());
    }
    assert!(seen >= 3, "expected the shipped manifest set, found {seen}");
}

#[test]
fn simulate_rejects_duplicate_scenario_ids() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("study.toml");
    std::fs::write(
        &manifest,
        r#"
schema_version = 1
seed = 1

[[scenarios]]
id = "same"
kind = "fixture"
tau = 1
records = [{ t = 2, false_alarms = 0 }]

[[scenarios]]
id = "same"
kind = "fixture"
tau = 1
records = [{ t = 3, false_alarms = 0 }]
"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();

    let output = run(ksmon(&out).args(["simulate", "--manifest"]).arg(&manifest));
    assert_eq!(exit_code(&output), 1);
    assert!(stderr_of(&output).contains("duplicate"), "stderr: {}", stderr_of(&output));
}

#[test]
fn simulate_requires_a_seed_somewhere() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("study.toml");
    std::fs::write(
        &manifest,
        r#"
schema_version = 1

[[scenarios]]
id = "toy"
kind = "fixture"
tau = 1
records = [{ t = 2, false_alarms = 0 }]
"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();

    let output = run(ksmon(&out).args(["simulate", "--manifest"]).arg(&manifest));
    assert_eq!(exit_code(&output), 1);
    assert!(stderr_of(&output).contains("no seed"), "stderr: {}", stderr_of(&output));

    // --seed on the command line satisfies the requirement
    let output =
        run(ksmon(&out).args(["simulate", "--manifest"]).arg(&manifest).args(["--seed", "9"]));
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr_of(&output));
}
