//! Synthetic profile generators and the Phase-II trial driver.
//!
//! Profiles are generated from a mean function plus standard-normal noise
//! over uniform predictors on (0,1)³. In control the mean is `f`; after the
//! change point τ it becomes the blend `φ = λ·f + (1−λ)·g` of `f` with a
//! forcing function `g`. The signal-to-noise ratio of a scenario is
//! `Var(f − φ) = (1−λ)²·Var(f − g)` (noise variance is 1), which this
//! module estimates by Monte Carlo and inverts: [`solve_lambda_for_snr`]
//! finds the blend weight for a target SNR, and [`localized_a_for_snr`]
//! uses the closed form available for the localized (sphere-jump) change.
//!
//! [`phase2_trial`] plays one monitored trial against a generator: false
//! alarms before τ are counted (and, by default, restart the monitor while
//! the process clock keeps advancing), and the first alarm after τ ends the
//! trial. [`compute_arl1`] / [`compute_far`] aggregate trial records.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::ObservationBatch;
use crate::error::{Error, Result};
use crate::monitor::{HistoryEntry, MonitorState};
use crate::seed::{mix, rng_from_path, tag};
use crate::tree::FitConfig;

/// In-control mean functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InControlKind {
    /// `f(x) = 1 + 3x₁ + 2x₂ + x₃`
    Linear,
    /// `f(x) = (4/9)(3x₁ + 2x₂ + x₃)²`
    Nonlinear,
}

/// Out-of-control forcing functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForcingKind {
    /// `g(x) = C·sin(2π·x₁·x₂)`; the amplitude is tied to the in-control
    /// pairing (C = 5 with the linear mean, C = 1 with the nonlinear one).
    Sinusoidal,
    /// `g(x) = 25·|x₁ − ½|·e^(−x₂)·1(x₃ > ½)`
    Nondifferentiable,
    /// `g(x) = f(x) + a·1(x ∈ 𝒮)`, a jump of height `a` on the sphere 𝒮 of
    /// volume `v` centered at (½,½,½).
    Localized,
}

impl fmt::Display for InControlKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InControlKind::Linear => "linear",
            InControlKind::Nonlinear => "nonlinear",
        })
    }
}

impl FromStr for InControlKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(InControlKind::Linear),
            "nonlinear" => Ok(InControlKind::Nonlinear),
            other => Err(Error::invalid_input(format!(
                "unknown in-control function `{other}` (expected linear or nonlinear)"
            ))),
        }
    }
}

impl fmt::Display for ForcingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ForcingKind::Sinusoidal => "sinusoidal",
            ForcingKind::Nondifferentiable => "nondifferentiable",
            ForcingKind::Localized => "localized",
        })
    }
}

impl FromStr for ForcingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoidal" => Ok(ForcingKind::Sinusoidal),
            "nondifferentiable" => Ok(ForcingKind::Nondifferentiable),
            "localized" => Ok(ForcingKind::Localized),
            other => Err(Error::invalid_input(format!(
                "unknown forcing function `{other}` (expected sinusoidal, nondifferentiable, or localized)"
            ))),
        }
    }
}

/// One data-generating scenario: the in-control/out-of-control pair, the
/// blend weight, the change point, and the batch shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub in_control: InControlKind,
    pub forcing: ForcingKind,
    /// Blend weight λ ∈ [0,1] of `φ = λ·f + (1−λ)·g`.
    pub lambda: f64,
    /// Jump height `a` of the localized forcing (ignored otherwise).
    #[serde(default)]
    pub localized_jump: f64,
    /// Sphere volume `v` of the localized forcing (ignored otherwise).
    #[serde(default = "default_volume")]
    pub localized_volume: f64,
    /// Last in-control step; batches at `t ≤ tau` use `f`, later ones `φ`.
    pub tau: usize,
    /// Rows per batch.
    pub n: usize,
    pub rng_seed: u64,
}

fn default_volume() -> f64 {
    0.1
}

/// Radius of the sphere holding `volume` of the unit cube's mass:
/// `(3v / 4π)^{1/3}`.
pub fn localized_radius(volume: f64) -> f64 {
    (3.0 * volume / (4.0 * std::f64::consts::PI)).cbrt()
}

impl GeneratorSpec {
    /// Number of predictors; the generator functions are trivariate.
    pub const P: usize = 3;

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid_input("lambda must lie in [0, 1]"));
        }
        if self.n == 0 {
            return Err(Error::invalid_input("batch size n must be at least 1"));
        }
        if self.forcing == ForcingKind::Localized {
            if !(self.localized_volume > 0.0 && self.localized_volume < 1.0) {
                return Err(Error::invalid_input("localized volume must lie in (0, 1)"));
            }
            if localized_radius(self.localized_volume) >= 0.5 {
                return Err(Error::invalid_input(format!(
                    "localized volume {} puts the sphere outside the unit cube (radius ≥ 0.5)",
                    self.localized_volume
                )));
            }
            if !self.localized_jump.is_finite() {
                return Err(Error::invalid_input("localized jump must be finite"));
            }
        }
        Ok(())
    }

    /// Sinusoidal amplitude for this spec's in-control pairing.
    fn sinusoidal_amplitude(&self) -> f64 {
        match self.in_control {
            InControlKind::Linear => 5.0,
            InControlKind::Nonlinear => 1.0,
        }
    }
}

/// The in-control mean `f(x)`.
///
/// `x` must have at least 3 elements (extras are ignored).
pub fn eval_in_control(kind: InControlKind, x: &[f64]) -> f64 {
    let s = 3.0 * x[0] + 2.0 * x[1] + x[2];
    match kind {
        InControlKind::Linear => 1.0 + s,
        InControlKind::Nonlinear => (4.0 / 9.0) * s * s,
    }
}

/// The forcing function `g(x)` of the spec.
pub fn eval_forcing(spec: &GeneratorSpec, x: &[f64]) -> f64 {
    match spec.forcing {
        ForcingKind::Sinusoidal => {
            spec.sinusoidal_amplitude() * (2.0 * std::f64::consts::PI * x[0] * x[1]).sin()
        }
        ForcingKind::Nondifferentiable => {
            if x[2] > 0.5 {
                25.0 * (x[0] - 0.5).abs() * (-x[1]).exp()
            } else {
                0.0
            }
        }
        ForcingKind::Localized => {
            let r = localized_radius(spec.localized_volume);
            let d2 = (x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2) + (x[2] - 0.5).powi(2);
            let jump = if d2 <= r * r { spec.localized_jump } else { 0.0 };
            eval_in_control(spec.in_control, x) + jump
        }
    }
}

/// The out-of-control mean `φ(x) = λ·f(x) + (1−λ)·g(x)`.
pub fn eval_phi(spec: &GeneratorSpec, x: &[f64]) -> f64 {
    spec.lambda * eval_in_control(spec.in_control, x)
        + (1.0 - spec.lambda) * eval_forcing(spec, x)
}

/// Variance with `1/S` normalization (two-pass).
pub(crate) fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Monte-Carlo SNR estimate: the `1/S`-normalized variance of
/// `f(x) − φ(x)` over `samples` uniform draws seeded from `spec.rng_seed`.
pub fn mc_snr_estimate(spec: &GeneratorSpec, samples: usize) -> Result<f64> {
    spec.validate()?;
    if samples < 2 {
        return Err(Error::invalid_input("SNR estimation needs at least 2 samples"));
    }
    let mut rng = rng_from_path(spec.rng_seed, &[tag::SNR_DRAW]);
    let mut diffs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let x = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        diffs.push(eval_in_control(spec.in_control, &x) - eval_phi(spec, &x));
    }
    Ok(population_variance(&diffs))
}

/// Solve for the blend weight λ giving `target_snr` under a fixed-seed MC
/// objective.
///
/// `Var(f − φ) = (1−λ)²·Var(f − g)`, so the objective factorizes over one
/// cached set of draws and bisection in λ is exact up to the MC error of
/// `Var(f − g)`. Errors: the localized forcing (its λ is fixed at 0 and the
/// jump height carries the SNR — see [`localized_a_for_snr`]), a target
/// above the λ = 0 SNR, and a degenerate `g = f`.
pub fn solve_lambda_for_snr(
    in_control: InControlKind,
    forcing: ForcingKind,
    target_snr: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if forcing == ForcingKind::Localized {
        return Err(Error::invalid_input(
            "the localized forcing fixes lambda = 0; solve the jump height instead",
        ));
    }
    if !target_snr.is_finite() || target_snr <= 0.0 {
        return Err(Error::invalid_input("target SNR must be positive"));
    }
    if samples < 2 {
        return Err(Error::invalid_input("SNR estimation needs at least 2 samples"));
    }
    let spec = GeneratorSpec {
        in_control,
        forcing,
        lambda: 0.0,
        localized_jump: 0.0,
        localized_volume: default_volume(),
        tau: 0,
        n: 1,
        rng_seed: seed,
    };
    let mut rng = rng_from_path(seed, &[tag::SNR_DRAW]);
    let mut diffs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let x = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        diffs.push(eval_in_control(in_control, &x) - eval_forcing(&spec, &x));
    }
    let base_variance = population_variance(&diffs);
    if base_variance == 0.0 {
        return Err(Error::NoSolution(
            "the forcing equals the in-control function; the SNR is 0 for every lambda".into(),
        ));
    }
    if target_snr > base_variance {
        return Err(Error::NoSolution(format!(
            "target SNR {target_snr} exceeds the lambda = 0 maximum {base_variance:.4}"
        )));
    }
    // SNR(λ) = (1−λ)²·Var(f−g) decreases from the maximum to 0 on [0,1]
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if (1.0 - mid) * (1.0 - mid) * base_variance >= target_snr {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Jump height for a localized change of sphere volume `v` at blend weight
/// `lambda`, from the closed form `SNR = (1−λ)²·a²·v·(1−v)`.
pub fn localized_a_for_snr(target_snr: f64, v: f64, lambda: f64) -> Result<f64> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::invalid_input("sphere volume must lie in (0, 1)"));
    }
    if !lambda.is_finite() || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid_input("lambda must lie in [0, 1]"));
    }
    if lambda == 1.0 {
        return Err(Error::invalid_input(
            "lambda = 1 erases the forcing; no jump height can reach a positive SNR",
        ));
    }
    if !target_snr.is_finite() || target_snr < 0.0 {
        return Err(Error::invalid_input("target SNR must be nonnegative"));
    }
    Ok((target_snr / ((1.0 - lambda) * (1.0 - lambda) * v * (1.0 - v))).sqrt())
}

/// Generate the batch observed at process time `t`: `n` rows of uniform
/// predictors with `y = f(x) + ε` while `t ≤ τ` and `y = φ(x) + ε` after.
pub fn generate_profile(spec: &GeneratorSpec, t: i64, seed: u64) -> Result<ObservationBatch> {
    generate_profile_impl(spec, t, seed, false)
}

/// `zero_noise` draws (and discards) the noise stream so the predictors
/// match the noisy batch from the same seed, but sets every ε to 0.
fn generate_profile_impl(
    spec: &GeneratorSpec,
    t: i64,
    seed: u64,
    zero_noise: bool,
) -> Result<ObservationBatch> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let in_control = t <= spec.tau as i64;
    let mut xs = Vec::with_capacity(spec.n * GeneratorSpec::P);
    let mut ys = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let x = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let noise: f64 = rng.sample(StandardNormal);
        let noise = if zero_noise { 0.0 } else { noise };
        let mean = if in_control {
            eval_in_control(spec.in_control, &x)
        } else {
            eval_phi(spec, &x)
        };
        xs.extend_from_slice(&x);
        ys.push(mean + noise);
    }
    ObservationBatch::new(t, GeneratorSpec::P, xs, ys)
}

/// What a false alarm before τ does to the monitor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestartPolicy {
    /// Drop everything monitored so far and restart from the historical
    /// profiles (monitoring is restarted; the process keeps running).
    #[default]
    TruncateToHistorical,
    /// Keep the accumulated history and carry on.
    KeepHistory,
}

/// Tuning for one Phase-II trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialConfig {
    /// Control limit δ (from calibration).
    pub delta: f64,
    /// Process-step budget; a trial that never alarms after τ is censored
    /// here.
    pub max_horizon: usize,
    #[serde(default)]
    pub restart_policy: RestartPolicy,
    pub fit_config: FitConfig,
}

/// Outcome of one Phase-II trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    /// First alarm time after τ (the horizon if censored); always > τ.
    pub run_length: usize,
    /// Alarms at `t ≤ τ`.
    pub false_alarms: usize,
    /// Whether the trial hit the horizon without a post-τ alarm.
    pub censored: bool,
}

/// Aggregates of one scenario cell's trials.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub trials: Vec<TrialRecord>,
    /// Mean detection delay `(1/N)·Σ(Tⱼ − τ)`.
    pub arl1: f64,
    /// MC standard error of [`StudyReport::arl1`] (0 for a single trial).
    pub arl1_stderr: f64,
    /// `N_FA / (N + N_FA)`.
    pub far: f64,
}

impl StudyReport {
    pub fn from_trials(trials: Vec<TrialRecord>, tau: usize) -> Result<Self> {
        let arl1 = compute_arl1(&trials, tau)?;
        let far = compute_far(&trials)?;
        let n = trials.len();
        let arl1_stderr = if n < 2 {
            0.0
        } else {
            let sq_dev: f64 = trials
                .iter()
                .map(|tr| {
                    let delay = (tr.run_length - tau) as f64;
                    (delay - arl1) * (delay - arl1)
                })
                .sum();
            (sq_dev / (n - 1) as f64 / n as f64).sqrt()
        };
        Ok(StudyReport { trials, arl1, arl1_stderr, far })
    }
}

/// Play one monitored trial against the generator.
///
/// The monitor starts from `prefitted` history with `config.delta` as its
/// limit. Batches are generated at process times 1, 2, … — alarms at
/// `t ≤ τ` count as false alarms (and apply the restart policy, the process
/// clock continuing toward τ); the first alarm at `t > τ` ends the trial.
/// Reaching `config.max_horizon` without one censors the trial.
pub fn phase2_trial(
    spec: &GeneratorSpec,
    prefitted: &Arc<Vec<HistoryEntry>>,
    config: &TrialConfig,
    seed: u64,
) -> Result<TrialRecord> {
    spec.validate()?;
    if config.max_horizon <= spec.tau {
        return Err(Error::invalid_input(format!(
            "max_horizon {} leaves no room after the change point tau = {}",
            config.max_horizon, spec.tau
        )));
    }
    let trial_fit = FitConfig { rng_seed: seed, ..config.fit_config.clone() };
    let mut state = MonitorState::with_shared_prefix(Arc::clone(prefitted), config.delta, trial_fit)?;
    let mut false_alarms = 0usize;
    for process_t in 1..=config.max_horizon {
        let batch_seed = mix(seed, &[tag::PROFILE, process_t as u64]);
        let batch = generate_profile(spec, process_t as i64, batch_seed)?;
        let outcome = state.monitor_step(&batch)?;
        if outcome.alarmed {
            if process_t <= spec.tau {
                false_alarms += 1;
                if config.restart_policy == RestartPolicy::TruncateToHistorical {
                    state.monitor_restart();
                }
            } else {
                return Ok(TrialRecord { run_length: process_t, false_alarms, censored: false });
            }
        }
    }
    Ok(TrialRecord { run_length: config.max_horizon, false_alarms, censored: true })
}

/// Mean detection delay `(1/N)·Σ(Tⱼ − τ)` over the trials.
pub fn compute_arl1(trials: &[TrialRecord], tau: usize) -> Result<f64> {
    if trials.is_empty() {
        return Err(Error::invalid_input("ARL1 needs at least one trial"));
    }
    let mut total = 0.0;
    for trial in trials {
        if trial.run_length <= tau {
            return Err(Error::invalid_input(format!(
                "trial run length {} is not past the change point tau = {tau}",
                trial.run_length
            )));
        }
        total += (trial.run_length - tau) as f64;
    }
    Ok(total / trials.len() as f64)
}

/// False-alarm rate `N_FA / (N + N_FA)`, `N_FA` totaled across trials.
pub fn compute_far(trials: &[TrialRecord]) -> Result<f64> {
    if trials.is_empty() {
        return Err(Error::invalid_input("FAR needs at least one trial"));
    }
    let n = trials.len() as f64;
    let n_fa: usize = trials.iter().map(|t| t.false_alarms).sum();
    Ok(n_fa as f64 / (n + n_fa as f64))
}
