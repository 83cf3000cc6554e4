//! Core data carriers: observation batches, residual samples, and empirical
//! CDFs, plus the CSV formats used to move batches in and out of the CLI.
//!
//! A batch is one profile: `n` observations of `p` predictors and one
//! response, all sharing a time index. Residual samples and ECDFs are the
//! downstream shapes the monitor works with; the ECDF is kept as a sorted
//! vector so evaluation is a binary search and distribution comparisons can
//! walk two sorted lists.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One profile: `n` rows of `p` predictors plus a response each, observed at
/// a common time index.
///
/// Predictors are stored row-major in a single flat vector. All values are
/// required to be finite at construction, so downstream numerics never see
/// NaN or infinities.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch {
    time_index: i64,
    n: usize,
    p: usize,
    predictors: Vec<f64>,
    responses: Vec<f64>,
}

impl ObservationBatch {
    /// Build a batch from a flat row-major predictor matrix and a response
    /// vector.
    ///
    /// Errors if `n == 0`, `p == 0`, the matrix length is not `n * p`
    /// (with `n = responses.len()`), or any value is non-finite.
    pub fn new(time_index: i64, p: usize, predictors: Vec<f64>, responses: Vec<f64>) -> Result<Self> {
        let n = responses.len();
        if n == 0 {
            return Err(Error::invalid_input("batch must contain at least one observation"));
        }
        if p == 0 {
            return Err(Error::invalid_input("batch must have at least one predictor"));
        }
        if predictors.len() != n * p {
            return Err(Error::invalid_input(format!(
                "predictor matrix has {} values, expected n*p = {}*{} = {}",
                predictors.len(),
                n,
                p,
                n * p
            )));
        }
        if let Some(bad) = predictors.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid_input(format!(
                "predictor value at row {}, column {} is not finite",
                bad / p,
                bad % p
            )));
        }
        if let Some(bad) = responses.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid_input(format!("response at row {bad} is not finite")));
        }
        Ok(ObservationBatch { time_index, n, p, predictors, responses })
    }

    pub fn time_index(&self) -> i64 {
        self.time_index
    }

    pub fn set_time_index(&mut self, t: i64) {
        self.time_index = t;
    }

    /// Number of observations.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of predictors per observation.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Predictor row `i` as a `p`-length slice.
    pub fn predictor_row(&self, i: usize) -> &[f64] {
        &self.predictors[i * self.p..(i + 1) * self.p]
    }

    /// The whole predictor matrix, row-major.
    pub fn predictors(&self) -> &[f64] {
        &self.predictors
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }
}

/// Residuals of one batch against some fitted model, tagged with the batch's
/// time index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSample {
    pub time_index: i64,
    pub values: Vec<f64>,
}

/// An empirical CDF: the defining sample, sorted ascending.
///
/// Construction guarantees the sample is non-empty, finite, and sorted, so
/// evaluation and two-sample comparisons can rely on those invariants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<f64>", try_from = "Vec<f64>")]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    /// Sort a sample into an ECDF. Errors on an empty sample or any
    /// non-finite value.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid_input("cannot build an ECDF from an empty sample"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_input("cannot build an ECDF from non-finite values"));
        }
        let mut sorted = values.to_vec();
        sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values compare totally"));
        Ok(Ecdf { sorted })
    }

    /// Sample size.
    pub fn n(&self) -> usize {
        self.sorted.len()
    }

    /// The defining sample, ascending.
    pub fn sorted_values(&self) -> &[f64] {
        &self.sorted
    }

    /// F(z): the fraction of the sample that is `<= z`.
    ///
    /// Right-continuous step function; 0 below the minimum, 1 at and above
    /// the maximum. A NaN query counts no points and evaluates to 0.
    pub fn eval(&self, z: f64) -> f64 {
        let count = self.sorted.partition_point(|v| *v <= z);
        count as f64 / self.sorted.len() as f64
    }
}

impl From<Ecdf> for Vec<f64> {
    fn from(e: Ecdf) -> Vec<f64> {
        e.sorted
    }
}

impl TryFrom<Vec<f64>> for Ecdf {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::malformed("ECDF sample is empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::malformed("ECDF sample contains non-finite values"));
        }
        if values.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::malformed("ECDF sample is not sorted ascending"));
        }
        Ok(Ecdf { sorted: values })
    }
}

/// Build the ECDF of a residual sample. Errors if the sample is empty or
/// contains non-finite values.
pub fn ecdf_build(sample: &ResidualSample) -> Result<Ecdf> {
    Ecdf::from_values(&sample.values)
}

/// Evaluate `ecdf` at `z`. Plain function form of [`Ecdf::eval`].
pub fn ecdf_eval(ecdf: &Ecdf, z: f64) -> f64 {
    ecdf.eval(z)
}

fn expected_headers(p: usize, with_time: bool) -> Vec<String> {
    let mut h = Vec::with_capacity(p + 2);
    if with_time {
        h.push("t".to_string());
    }
    for i in 1..=p {
        h.push(format!("x{i}"));
    }
    h.push("y".to_string());
    h
}

fn check_header(actual: &csv::StringRecord, with_time: bool, path: &Path) -> Result<usize> {
    let min_cols = if with_time { 3 } else { 2 };
    if actual.len() < min_cols {
        return Err(Error::invalid_input(format!(
            "{}: header has {} columns, need at least {}",
            path.display(),
            actual.len(),
            min_cols
        )));
    }
    let p = actual.len() - if with_time { 2 } else { 1 };
    let expected = expected_headers(p, with_time);
    for (i, want) in expected.iter().enumerate() {
        let got = actual.get(i).unwrap_or("");
        if got != want {
            return Err(Error::invalid_input(format!(
                "{}: header column {} is {:?}, expected {:?}",
                path.display(),
                i + 1,
                got,
                want
            )));
        }
    }
    Ok(p)
}

fn parse_field(raw: &str, path: &Path, row: usize, col: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| {
        Error::invalid_input(format!(
            "{}: row {}: column {} value {:?} is not a number",
            path.display(),
            row,
            col,
            raw
        ))
    })
}

/// Read one batch from a CSV file with header `x1,...,xp,y`, assigning it
/// the given time index.
pub fn read_batch_csv(path: &Path, time_index: i64) -> Result<ObservationBatch> {
    let mut reader = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let p = check_header(reader.headers()?, false, path)?;
    let mut predictors = Vec::new();
    let mut responses = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != p + 1 {
            return Err(Error::invalid_input(format!(
                "{}: row {}: has {} fields, expected {}",
                path.display(),
                i + 1,
                record.len(),
                p + 1
            )));
        }
        for j in 0..p {
            predictors.push(parse_field(&record[j], path, i + 1, &format!("x{}", j + 1))?);
        }
        responses.push(parse_field(&record[p], path, i + 1, "y")?);
    }
    ObservationBatch::new(time_index, p, predictors, responses)
        .map_err(|e| Error::invalid_input(format!("{}: {}", path.display(), e)))
}

/// Write one batch as `x1,...,xp,y` rows.
pub fn write_batch_csv(path: &Path, batch: &ObservationBatch) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", expected_headers(batch.p(), false).join(","))?;
    for i in 0..batch.n() {
        for v in batch.predictor_row(i) {
            write!(w, "{v},")?;
        }
        writeln!(w, "{}", batch.responses()[i])?;
    }
    w.flush()?;
    Ok(())
}

/// Read a sequence of batches from a CSV file with header `t,x1,...,xp,y`.
///
/// Rows sharing a `t` value must be contiguous; each contiguous block
/// becomes one batch with that time index. A `t` value reappearing after a
/// different one is rejected, since it would silently merge two profiles.
pub fn read_batch_series_csv(path: &Path) -> Result<Vec<ObservationBatch>> {
    let mut reader = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let p = check_header(reader.headers()?, true, path)?;
    let mut batches: Vec<ObservationBatch> = Vec::new();
    let mut seen: Vec<i64> = Vec::new();
    let mut cur_t: Option<i64> = None;
    let mut predictors = Vec::new();
    let mut responses = Vec::new();

    let flush = |t: i64, predictors: &mut Vec<f64>, responses: &mut Vec<f64>, batches: &mut Vec<ObservationBatch>| -> Result<()> {
        let batch = ObservationBatch::new(t, p, std::mem::take(predictors), std::mem::take(responses))
            .map_err(|e| Error::invalid_input(format!("{}: block t={}: {}", path.display(), t, e)))?;
        batches.push(batch);
        Ok(())
    };

    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != p + 2 {
            return Err(Error::invalid_input(format!(
                "{}: row {}: has {} fields, expected {}",
                path.display(),
                i + 1,
                record.len(),
                p + 2
            )));
        }
        let t: i64 = record[0].trim().parse().map_err(|_| {
            Error::invalid_input(format!(
                "{}: row {}: time index {:?} is not an integer",
                path.display(),
                i + 1,
                &record[0]
            ))
        })?;
        if cur_t != Some(t) {
            if let Some(prev) = cur_t {
                flush(prev, &mut predictors, &mut responses, &mut batches)?;
            }
            if seen.contains(&t) {
                return Err(Error::invalid_input(format!(
                    "{}: row {}: time index {} appears in two separate blocks",
                    path.display(),
                    i + 1,
                    t
                )));
            }
            seen.push(t);
            cur_t = Some(t);
        }
        for j in 0..p {
            predictors.push(parse_field(&record[j + 1], path, i + 1, &format!("x{}", j + 1))?);
        }
        responses.push(parse_field(&record[p + 1], path, i + 1, "y")?);
    }
    if let Some(prev) = cur_t {
        flush(prev, &mut predictors, &mut responses, &mut batches)?;
    }
    if batches.is_empty() {
        return Err(Error::invalid_input(format!("{}: no data rows", path.display())));
    }
    Ok(batches)
}

/// Write a sequence of batches as `t,x1,...,xp,y` rows, one block per batch.
pub fn write_batch_series_csv(path: &Path, batches: &[ObservationBatch]) -> Result<()> {
    let first = batches
        .first()
        .ok_or_else(|| Error::invalid_input("cannot write an empty batch series"))?;
    let p = first.p();
    if let Some(bad) = batches.iter().find(|b| b.p() != p) {
        return Err(Error::invalid_input(format!(
            "batch at t={} has p={}, expected {}",
            bad.time_index(),
            bad.p(),
            p
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", expected_headers(p, true).join(","))?;
    for batch in batches {
        for i in 0..batch.n() {
            write!(w, "{},", batch.time_index())?;
            for v in batch.predictor_row(i) {
                write!(w, "{v},")?;
            }
            writeln!(w, "{}", batch.responses()[i])?;
        }
    }
    w.flush()?;
    Ok(())
}
