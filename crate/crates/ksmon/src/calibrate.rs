//! Control-limit calibration by bootstrap run-length simulation.
//!
//! The control limit δ is chosen so that the in-control average run length
//! (ARL₀) meets a target: pool the rows of the historical batches, simulate
//! monitoring runs whose step batches are size-`n` resamples of the pool,
//! and pick the smallest δ on the grid `{k/n : k = 1..n}` whose estimated
//! ARL₀ reaches the target. Equal-size ECDF comparisons only produce KS
//! values on that grid, so nothing finer is distinguishable.
//!
//! All grid points are evaluated with common random numbers: each simulated
//! run keeps one trajectory of running-max ξ records, lazily extended as
//! larger δ values are probed. A trajectory is never re-simulated, so its
//! randomness cannot depend on δ, and the recorded running maxima yield the
//! exact first-passage time for every threshold retroactively.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ObservationBatch;
use crate::error::{Error, Result};
use crate::monitor::{HistoryEntry, MonitorState};
use crate::seed::{mix, tag};
use crate::tree::FitConfig;

/// A control limit above the KS range, so the probing monitor never alarms
/// on its own.
const INERT_UCL: f64 = 2.0;

/// Tuning for the calibration search.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    /// Desired in-control average run length.
    pub target_arl0: f64,
    /// Number of bootstrap runs behind each ARL₀ estimate.
    pub num_runs: usize,
    /// Step budget per run; a run that never alarms is censored at this
    /// horizon and contributes the horizon to the ARL₀ mean. `None` means
    /// 20× the target.
    pub max_horizon: Option<usize>,
    /// Root seed; run `r` derives its own stream from it.
    pub rng_seed: u64,
    /// Regressor configuration used for the per-step fits inside each run.
    pub fit_config: FitConfig,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            target_arl0: 200.0,
            num_runs: 500,
            max_horizon: None,
            rng_seed: 0,
            fit_config: FitConfig::tree(),
        }
    }
}

impl CalibrationConfig {
    /// The run-length censoring horizon (defaults to 20× the target).
    pub fn effective_horizon(&self) -> usize {
        self.max_horizon
            .unwrap_or_else(|| (20.0 * self.target_arl0).ceil() as usize)
            .max(1)
    }

    fn validate(&self) -> Result<()> {
        if !self.target_arl0.is_finite() || self.target_arl0 < 1.0 {
            return Err(Error::invalid_input("target_arl0 must be finite and at least 1"));
        }
        if self.num_runs == 0 {
            return Err(Error::invalid_input("num_runs must be at least 1"));
        }
        Ok(())
    }
}

/// Outcome of one simulated run at a fixed threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunLength {
    /// First step `t ≥ 1` with ξᵗ ≥ δ.
    Alarm(usize),
    /// No alarm within the horizon.
    Censored,
}

/// ARL₀ estimate at one threshold.
#[derive(Debug, Clone, Copy)]
pub struct Arl0Estimate {
    /// Mean run length, censored runs contributing the horizon.
    pub arl0: f64,
    pub censored_runs: usize,
}

/// Result of the control-limit search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UclResult {
    /// Smallest grid threshold whose estimated ARL₀ reached the target.
    pub ucl: f64,
    /// The ARL₀ estimate at [`UclResult::ucl`].
    pub estimated_arl0: f64,
    /// Every `(δ, estimated ARL₀)` pair probed, in grid order.
    pub curve: Vec<(f64, f64)>,
    /// Censored runs at [`UclResult::ucl`].
    pub censored_runs: usize,
}

/// The pooled rows of the historical batches, the resampling source for
/// bootstrap runs.
pub(crate) struct PooledRows {
    p: usize,
    batch_n: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl PooledRows {
    pub(crate) fn from_batches(batches: &[ObservationBatch]) -> Result<Self> {
        let first = batches
            .first()
            .ok_or_else(|| Error::invalid_input("need at least one historical batch to pool"))?;
        let (p, batch_n) = (first.p(), first.n());
        let mut xs = Vec::with_capacity(batches.len() * batch_n * p);
        let mut ys = Vec::with_capacity(batches.len() * batch_n);
        for batch in batches {
            if batch.p() != p || batch.n() != batch_n {
                return Err(Error::invalid_input(format!(
                    "historical batches must share one shape; found {}x{} after {}x{}",
                    batch.n(),
                    batch.p(),
                    batch_n,
                    p
                )));
            }
            xs.extend_from_slice(batch.predictors());
            ys.extend_from_slice(batch.responses());
        }
        Ok(PooledRows { p, batch_n, xs, ys })
    }

    pub(crate) fn p(&self) -> usize {
        self.p
    }

    pub(crate) fn batch_n(&self) -> usize {
        self.batch_n
    }

    /// Draw a size-`n` batch of rows with replacement.
    pub(crate) fn resample(&self, time_index: i64, rng: &mut ChaCha8Rng) -> ObservationBatch {
        let total = self.ys.len();
        let mut xs = Vec::with_capacity(self.batch_n * self.p);
        let mut ys = Vec::with_capacity(self.batch_n);
        for _ in 0..self.batch_n {
            let row = rng.random_range(0..total);
            xs.extend_from_slice(&self.xs[row * self.p..(row + 1) * self.p]);
            ys.push(self.ys[row]);
        }
        ObservationBatch::new(time_index, self.p, xs, ys)
            .expect("pooled rows were validated when the pool was built")
    }
}

/// One bootstrap run's lazily-extended trajectory.
///
/// `records` holds `(t, running max of ξ up to t)` at each strict increase,
/// so the first record at or above any δ is that δ's first-passage time.
struct NullRun {
    state: MonitorState,
    rng: ChaCha8Rng,
    records: Vec<(usize, f64)>,
    steps_taken: usize,
    horizon: usize,
}

impl NullRun {
    fn new(
        prefix: &Arc<Vec<HistoryEntry>>,
        run_seed: u64,
        horizon: usize,
        fit_config: &FitConfig,
    ) -> Result<Self> {
        let run_fit = FitConfig { rng_seed: run_seed, ..fit_config.clone() };
        Ok(NullRun {
            state: MonitorState::with_shared_prefix(Arc::clone(prefix), INERT_UCL, run_fit)?,
            rng: ChaCha8Rng::seed_from_u64(run_seed),
            records: Vec::new(),
            steps_taken: 0,
            horizon,
        })
    }

    fn running_max_reached(&self, delta: f64) -> bool {
        self.records.last().is_some_and(|(_, xi)| *xi >= delta)
    }

    /// Extend the trajectory until its running max reaches `delta` or the
    /// horizon is exhausted.
    fn advance_past(&mut self, delta: f64, pool: &PooledRows) -> Result<()> {
        while !self.running_max_reached(delta) && self.steps_taken < self.horizon {
            let batch = pool.resample(self.state.current_t(), &mut self.rng);
            let outcome = self.state.monitor_step(&batch)?;
            self.steps_taken += 1;
            if self.records.last().is_none_or(|(_, xi)| outcome.xi > *xi) {
                self.records.push((self.steps_taken, outcome.xi));
            }
        }
        Ok(())
    }

    /// First-passage time of the recorded trajectory over `delta`.
    ///
    /// Exact for any `delta` the trajectory was advanced past.
    fn first_passage(&self, delta: f64) -> RunLength {
        match self.records.iter().find(|(_, xi)| *xi >= delta) {
            Some((t, _)) => RunLength::Alarm(*t),
            None => RunLength::Censored,
        }
    }
}

/// Simulate one bootstrap monitoring run at threshold `delta`.
///
/// Steps resample `historical`'s pooled rows; the monitor starts from the
/// `prefitted` history. Runs longer than `max_horizon` are censored.
pub fn bootstrap_run_length(
    historical: &[ObservationBatch],
    prefitted: &[HistoryEntry],
    delta: f64,
    seed: u64,
    max_horizon: usize,
    fit_config: &FitConfig,
) -> Result<RunLength> {
    if !(0.0..=2.0).contains(&delta) {
        return Err(Error::invalid_input("delta must lie in [0, 2]"));
    }
    if max_horizon == 0 {
        return Err(Error::invalid_input("max_horizon must be at least 1"));
    }
    let pool = PooledRows::from_batches(historical)?;
    let prefix = Arc::new(prefitted.to_vec());
    let mut run = NullRun::new(&prefix, seed, max_horizon, fit_config)?;
    run.advance_past(delta, &pool)?;
    Ok(run.first_passage(delta))
}

/// Estimate ARL₀ at a fixed threshold with `config.num_runs` independent
/// bootstrap runs.
pub fn estimate_arl0(
    historical: &[ObservationBatch],
    prefitted: &[HistoryEntry],
    delta: f64,
    config: &CalibrationConfig,
) -> Result<Arl0Estimate> {
    config.validate()?;
    let horizon = config.effective_horizon();
    let lengths: Vec<RunLength> = (0..config.num_runs)
        .into_par_iter()
        .map(|r| {
            let run_seed = mix(config.rng_seed, &[tag::CALIB_RUN, r as u64]);
            bootstrap_run_length(historical, prefitted, delta, run_seed, horizon, &config.fit_config)
        })
        .collect::<Result<_>>()?;
    Ok(summarize(&lengths, horizon))
}

/// Mean run length (censored runs contribute the horizon), summed in run
/// order so the estimate is independent of the parallel schedule.
fn summarize(lengths: &[RunLength], horizon: usize) -> Arl0Estimate {
    let mut censored_runs = 0usize;
    let mut total = 0.0;
    for length in lengths {
        total += match length {
            RunLength::Alarm(t) => *t as f64,
            RunLength::Censored => {
                censored_runs += 1;
                horizon as f64
            }
        };
    }
    Arl0Estimate { arl0: total / lengths.len() as f64, censored_runs }
}

/// Walk the `{k/n}` grid upward and return at the first threshold whose
/// estimate reaches `target`; fail with the full curve if none does.
pub(crate) fn ascend_grid(
    n: usize,
    target: f64,
    mut estimate_at: impl FnMut(f64) -> Result<Arl0Estimate>,
) -> Result<UclResult> {
    let mut curve = Vec::new();
    for k in 1..=n {
        let delta = k as f64 / n as f64;
        let estimate = estimate_at(delta)?;
        curve.push((delta, estimate.arl0));
        if estimate.arl0 >= target {
            return Ok(UclResult {
                ucl: delta,
                estimated_arl0: estimate.arl0,
                curve,
                censored_runs: estimate.censored_runs,
            });
        }
    }
    let max_estimate = curve.iter().map(|(_, a)| *a).fold(f64::NEG_INFINITY, f64::max);
    Err(Error::CalibrationFailed { target, max_estimate, curve })
}

/// Find the smallest control limit on the `{k/n}` grid whose bootstrap
/// ARL₀ estimate reaches `config.target_arl0`.
///
/// One batch of `num_runs` trajectories is shared across every probed
/// threshold (common random numbers), so successive grid points reuse, and
/// only extend, the same simulations.
pub fn find_ucl(
    historical: &[ObservationBatch],
    prefitted: &[HistoryEntry],
    config: &CalibrationConfig,
) -> Result<UclResult> {
    config.validate()?;
    let pool = PooledRows::from_batches(historical)?;
    if prefitted.is_empty() {
        return Err(Error::invalid_input("need at least one prefitted history entry"));
    }
    if let Some(bad) = prefitted.iter().find(|e| e.regressor.p() != pool.p()) {
        return Err(Error::DimensionMismatch { expected: pool.p(), got: bad.regressor.p() });
    }
    let horizon = config.effective_horizon();
    let prefix = Arc::new(prefitted.to_vec());
    let mut runs: Vec<NullRun> = (0..config.num_runs)
        .map(|r| {
            let run_seed = mix(config.rng_seed, &[tag::CALIB_RUN, r as u64]);
            NullRun::new(&prefix, run_seed, horizon, &config.fit_config)
        })
        .collect::<Result<_>>()?;

    ascend_grid(pool.batch_n(), config.target_arl0, |delta| {
        runs.par_iter_mut().try_for_each(|run| run.advance_past(delta, &pool))?;
        let lengths: Vec<RunLength> = runs.iter().map(|run| run.first_passage(delta)).collect();
        Ok(summarize(&lengths, horizon))
    })
}
