//! The Phase-II monitoring engine.
//!
//! At each step `t` the monitor predicts the incoming batch with the
//! equally-weighted ensemble of every regressor fitted so far (the `m`
//! historical ones plus the `t − 1` already-monitored steps), reduces the
//! prediction residuals to an ECDF, and scores the batch with
//! `ξᵗ = max_j KS(F̂ₑᵗ, F̂ₑʲ)` over all history ECDFs
//! (`j = −m+1, …, t−1`). The step alarms when `ξᵗ ≥ δ`. Win or lose, the
//! batch's own regressor and ECDF are appended to the history — whether an
//! alarm should truncate the history is the caller's policy, applied via
//! [`MonitorState::monitor_restart`].
//!
//! The KS distance between two ECDFs is computed exactly: the supremum of a
//! piecewise-constant difference is attained at a jump point, so a merge of
//! the two sorted samples visits every candidate. Distances are accumulated
//! in integer numerators (`|i·n_b − j·n_a|`), which keeps equal-size
//! comparisons on the exact `1/n` grid that calibration searches.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{ecdf_build, Ecdf, ObservationBatch, ResidualSample};
use crate::error::{Error, Result};
use crate::regressor::FittedRegressor;
use crate::seed::{mix, tag};
use crate::tree::FitConfig;

/// Schema version of the serialized monitor-state document.
pub const MONITOR_STATE_SCHEMA_VERSION: u32 = 1;

/// One history slot: the regressor fitted on a batch and the residual ECDF
/// that batch produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub regressor: FittedRegressor,
    pub ecdf: Ecdf,
}

/// How residual ECDFs for the `m` historical batches are produced during
/// Phase-I setup.
///
/// The monitoring procedure needs a residual ECDF per historical batch but
/// its definition is a setup-time choice:
/// * `InSample` — residuals of each batch against its own regressor.
/// * `FullEnsemble` — residuals of each batch against the mean of all `m`
///   historical regressors (the batch's own regressor included). This is the
///   same ensemble that predicts the first monitored batch, applied to the
///   historical batches themselves.
/// * `LeaveOneOutEnsemble` — residuals of each batch against the mean of
///   the other `m − 1` historical regressors, mirroring how monitored
///   batches are always predicted by models that never saw them. With
///   `m = 1` there is no "other" model and the in-sample residuals are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoricalResidualScheme {
    InSample,
    #[default]
    FullEnsemble,
    LeaveOneOutEnsemble,
}

/// Result of one monitoring step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// The step's time index (the monitor clock, starting at 1).
    pub t: i64,
    /// The monitoring statistic ξᵗ.
    pub xi: f64,
    /// Whether ξᵗ reached the control limit.
    pub alarmed: bool,
    /// Residuals of the batch against the ensemble prediction.
    pub residuals: ResidualSample,
    /// Time index of the history ECDF attaining the max (smallest on ties);
    /// historical batches sit at `−m+1 … 0`, monitored steps at `1 … t−1`.
    pub argmax_j: i64,
}

/// Exact two-sample Kolmogorov-Smirnov distance between two ECDFs.
///
/// `sup_z |F̂ₐ(z) − F̂_b(z)|`, evaluated at every jump of the pooled sample.
pub fn ks_distance(a: &Ecdf, b: &Ecdf) -> f64 {
    let av = a.sorted_values();
    let bv = b.sorted_values();
    let (na, nb) = (av.len() as u64, bv.len() as u64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut best_numerator = 0u64;
    while i < av.len() || j < bv.len() {
        let z = match (av.get(i), bv.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!("loop guard ensures one side remains"),
        };
        while i < av.len() && av[i] == z {
            i += 1;
        }
        while j < bv.len() && bv[j] == z {
            j += 1;
        }
        // F̂ₐ(z) = i/na and F̂_b(z) = j/nb; compare via the integer
        // numerator of their difference over the common denominator na·nb.
        best_numerator = best_numerator.max((i as u64 * nb).abs_diff(j as u64 * na));
    }
    best_numerator as f64 / (na * nb) as f64
}

/// The monitoring statistic: the largest KS distance between `current` and
/// any history ECDF, with the index of the first maximizer.
///
/// Errors with an invalid-state error when the history is empty.
pub fn monitoring_statistic<'a, I>(current: &Ecdf, history: I) -> Result<(f64, usize)>
where
    I: IntoIterator<Item = &'a Ecdf>,
{
    let mut best: Option<(f64, usize)> = None;
    for (idx, ecdf) in history.into_iter().enumerate() {
        let d = ks_distance(current, ecdf);
        if best.as_ref().is_none_or(|(b, _)| d > *b) {
            best = Some((d, idx));
        }
    }
    best.ok_or_else(|| Error::invalid_state("monitoring statistic over an empty history"))
}

/// The online detector: history of fitted regressors/ECDFs plus the control
/// limit.
///
/// The first `m` history entries (the Phase-I historical profiles) are the
/// restart snapshot and are never evicted; entries appended by monitoring
/// steps form the extension that [`MonitorState::monitor_restart`] clears.
#[derive(Debug, Clone)]
pub struct MonitorState {
    p: usize,
    ucl: f64,
    current_t: i64,
    fit_config: FitConfig,
    prefix: Arc<Vec<HistoryEntry>>,
    extension: Vec<HistoryEntry>,
}

impl MonitorState {
    /// Create a monitor from `m ≥ 1` historical entries.
    ///
    /// `fit_config` is used to fit the per-step regressor 𝒯ᵗ; its seed is
    /// re-derived per step from `rng_seed` and `t`.
    pub fn new(historical: Vec<HistoryEntry>, ucl: f64, fit_config: FitConfig) -> Result<Self> {
        Self::with_shared_prefix(Arc::new(historical), ucl, fit_config)
    }

    /// As [`MonitorState::new`], but sharing one prefix allocation across
    /// many states (the calibration and trial drivers spawn thousands).
    pub(crate) fn with_shared_prefix(
        prefix: Arc<Vec<HistoryEntry>>,
        ucl: f64,
        fit_config: FitConfig,
    ) -> Result<Self> {
        let first = prefix
            .first()
            .ok_or_else(|| Error::invalid_input("monitor needs at least one historical entry"))?;
        let p = first.regressor.p();
        if let Some(bad) = prefix.iter().find(|e| e.regressor.p() != p) {
            return Err(Error::invalid_input(format!(
                "historical regressors disagree on p: {} vs {}",
                p,
                bad.regressor.p()
            )));
        }
        if !ucl.is_finite() || ucl <= 0.0 {
            return Err(Error::invalid_input("ucl must be finite and positive"));
        }
        fit_config.validate(p)?;
        Ok(MonitorState { p, ucl, current_t: 1, fit_config, prefix, extension: Vec::new() })
    }

    /// Number of historical (never-evicted) entries.
    pub fn m(&self) -> usize {
        self.prefix.len()
    }

    /// The restart snapshot boundary; equal to [`MonitorState::m`].
    pub fn historical_prefix_len(&self) -> usize {
        self.prefix.len()
    }

    /// Total history length (`m + current_t − 1`).
    pub fn history_len(&self) -> usize {
        self.prefix.len() + self.extension.len()
    }

    /// The next step's time index (starts at 1).
    pub fn current_t(&self) -> i64 {
        self.current_t
    }

    pub fn ucl(&self) -> f64 {
        self.ucl
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn fit_config(&self) -> &FitConfig {
        &self.fit_config
    }

    fn entries(&self) -> impl Iterator<Item = &HistoryEntry> {
        self.prefix.iter().chain(self.extension.iter())
    }

    /// Process the batch observed at the monitor's current time.
    ///
    /// Runs the four statistic steps (ensemble prediction, residuals, ECDF,
    /// max-KS), then fits the batch's own regressor and appends it to the
    /// history — the time-t regressor never participates in its own step's
    /// prediction. Advances the clock by one.
    pub fn monitor_step(&mut self, batch: &ObservationBatch) -> Result<StepOutcome> {
        if batch.p() != self.p {
            return Err(Error::DimensionMismatch { expected: self.p, got: batch.p() });
        }
        let n = batch.n();
        let count = self.history_len() as f64;
        let mut predictions = vec![0.0; n];
        for entry in self.entries() {
            entry.regressor.accumulate_predictions(batch.predictors(), &mut predictions, 1.0);
        }
        let residuals: Vec<f64> = batch
            .responses()
            .iter()
            .zip(&predictions)
            .map(|(y, sum)| y - sum / count)
            .collect();
        let residuals = ResidualSample { time_index: self.current_t, values: residuals };
        let ecdf = ecdf_build(&residuals)?;
        let (xi, argmax_idx) = monitoring_statistic(&ecdf, self.entries().map(|e| &e.ecdf))?;

        let step_seed = mix(self.fit_config.rng_seed, &[tag::STEP_FIT, self.current_t as u64]);
        let step_config = FitConfig { rng_seed: step_seed, ..self.fit_config.clone() };
        let regressor = FittedRegressor::fit(batch, &step_config)?;
        self.extension.push(HistoryEntry { regressor, ecdf });

        let outcome = StepOutcome {
            t: self.current_t,
            xi,
            alarmed: xi >= self.ucl,
            residuals,
            argmax_j: argmax_idx as i64 - (self.m() as i64 - 1),
        };
        self.current_t += 1;
        Ok(outcome)
    }

    /// Truncate the history back to the `m` historical entries and reset
    /// the clock to 1. The control limit is unchanged.
    pub fn monitor_restart(&mut self) {
        self.extension.clear();
        self.current_t = 1;
    }

    /// Serialize to the versioned JSON document.
    pub fn to_json(&self) -> Result<String> {
        let doc = MonitorStateDoc {
            schema_version: MONITOR_STATE_SCHEMA_VERSION,
            p: self.p,
            m: self.prefix.len(),
            ucl: self.ucl,
            current_t: self.current_t,
            fit_config: self.fit_config.clone(),
            history: self.entries().cloned().collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    /// Parse a state from its versioned JSON document, validating schema
    /// version, shapes, and the history-length invariant.
    pub fn from_json(json: &str) -> Result<Self> {
        let doc: MonitorStateDoc = serde_json::from_str(json)?;
        if doc.schema_version != MONITOR_STATE_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: doc.schema_version,
                supported: MONITOR_STATE_SCHEMA_VERSION,
            });
        }
        if doc.m == 0 || doc.m > doc.history.len() {
            return Err(Error::malformed(format!(
                "state declares m = {} but has {} history entries",
                doc.m,
                doc.history.len()
            )));
        }
        if doc.current_t < 1 {
            return Err(Error::malformed("current_t must be at least 1"));
        }
        let expected_len = doc.m as i64 + doc.current_t - 1;
        if doc.history.len() as i64 != expected_len {
            return Err(Error::malformed(format!(
                "history length {} does not equal m + current_t - 1 = {}",
                doc.history.len(),
                expected_len
            )));
        }
        if doc.history.iter().any(|e| e.regressor.p() != doc.p) {
            return Err(Error::malformed("a history regressor disagrees with the declared p"));
        }
        let mut history = doc.history;
        let extension = history.split_off(doc.m);
        let mut state = MonitorState::with_shared_prefix(Arc::new(history), doc.ucl, doc.fit_config)?;
        state.extension = extension;
        state.current_t = doc.current_t;
        Ok(state)
    }

    /// Write the state JSON to a file.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Load a state from a JSON file.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct MonitorStateDoc {
    schema_version: u32,
    p: usize,
    m: usize,
    ucl: f64,
    current_t: i64,
    fit_config: FitConfig,
    /// All history entries; the first `m` are the historical prefix.
    history: Vec<HistoryEntry>,
}

/// Fit the Phase-I history: one regressor per historical batch plus its
/// residual ECDF under `scheme`.
///
/// Per-batch fit seeds are derived from `config.rng_seed` and the batch's
/// position, so the whole setup is reproducible from one seed.
pub fn fit_historical(
    batches: &[ObservationBatch],
    config: &FitConfig,
    scheme: HistoricalResidualScheme,
) -> Result<Vec<HistoryEntry>> {
    if batches.is_empty() {
        return Err(Error::invalid_input("need at least one historical batch"));
    }
    let p = batches[0].p();
    if let Some(bad) = batches.iter().find(|b| b.p() != p) {
        return Err(Error::invalid_input(format!(
            "historical batches disagree on p: {} vs {}",
            p,
            bad.p()
        )));
    }
    config.validate(p)?;
    let regressors: Vec<FittedRegressor> = batches
        .iter()
        .enumerate()
        .map(|(j, b)| {
            let seed = mix(config.rng_seed, &[tag::HISTORICAL_FIT, j as u64]);
            FittedRegressor::fit(b, &FitConfig { rng_seed: seed, ..config.clone() })
        })
        .collect::<Result<_>>()?;

    let m = batches.len();
    let mut ecdfs = Vec::with_capacity(m);
    for (j, batch) in batches.iter().enumerate() {
        let n = batch.n();
        let mut predictions = vec![0.0; n];
        let divisor = match scheme {
            HistoricalResidualScheme::FullEnsemble => {
                for regressor in &regressors {
                    regressor.accumulate_predictions(batch.predictors(), &mut predictions, 1.0);
                }
                m as f64
            }
            HistoricalResidualScheme::LeaveOneOutEnsemble if m > 1 => {
                for (k, regressor) in regressors.iter().enumerate() {
                    if k != j {
                        regressor.accumulate_predictions(batch.predictors(), &mut predictions, 1.0);
                    }
                }
                (m - 1) as f64
            }
            _ => {
                regressors[j].accumulate_predictions(batch.predictors(), &mut predictions, 1.0);
                1.0
            }
        };
        let values: Vec<f64> = batch
            .responses()
            .iter()
            .zip(&predictions)
            .map(|(y, sum)| y - sum / divisor)
            .collect();
        let sample = ResidualSample { time_index: batch.time_index(), values };
        ecdfs.push(ecdf_build(&sample)?);
    }
    Ok(regressors
        .into_iter()
        .zip(ecdfs)
        .map(|(regressor, ecdf)| HistoryEntry { regressor, ecdf })
        .collect())
}

/// Append-only CSV log of step outcomes (`t,xi,alarmed,argmax_j`).
pub struct StepLogWriter {
    writer: BufWriter<File>,
}

impl StepLogWriter {
    /// Create the log (truncating any existing file) and write the header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = BufWriter::new(File::create(path)?);
        writeln!(writer, "t,xi,alarmed,argmax_j")?;
        Ok(StepLogWriter { writer })
    }

    /// Open a log for appending; writes the header only when the file is
    /// new or empty.
    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let needs_header = file.metadata()?.len() == 0;
        let mut writer = BufWriter::new(file);
        if needs_header {
            writeln!(writer, "t,xi,alarmed,argmax_j")?;
        }
        Ok(StepLogWriter { writer })
    }

    /// Append one outcome row and flush it to disk.
    pub fn append(&mut self, outcome: &StepOutcome) -> Result<()> {
        writeln!(
            self.writer,
            "{},{},{},{}",
            outcome.t, outcome.xi, outcome.alarmed, outcome.argmax_j
        )?;
        self.writer.flush()?;
        Ok(())
    }
}
