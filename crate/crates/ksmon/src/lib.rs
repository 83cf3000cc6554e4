//! Nonparametric profile monitoring with regression-tree ensembles.
//!
//! This crate watches a stream of profiles — batches of (predictors,
//! response) observations arriving at discrete times — and raises an alarm
//! when the newest batch stops looking like the ones before it. No
//! functional form is assumed for the profile: each incoming batch is
//! predicted by the ensemble of all previously fitted regressors (single
//! CART trees or random forests), the prediction residuals are reduced to an
//! empirical CDF, and the batch's monitoring statistic is the largest
//! two-sample Kolmogorov-Smirnov distance between that ECDF and every
//! earlier one. The statistic is compared against a control limit chosen by
//! bootstrap so that false alarms occur at a configured average run length.
//!
//! The main entry points are:
//! * [`monitor::MonitorState`] — the online detector,
//! * [`calibrate::find_ucl`] — bootstrap calibration of the control limit,
//! * [`sim`] and [`study`] — synthetic-profile generators and the
//!   Monte-Carlo study harness around them,
//! * the `ksmon` binary — `calibrate`, `monitor`, `simulate`, and `snr`
//!   subcommands over CSV/JSON artifacts.

pub mod calibrate;
pub mod cli;
pub mod data;
pub mod error;
pub mod forest;
pub mod monitor;
pub mod regressor;
pub mod seed;
pub mod sim;
pub mod study;
pub mod tree;

pub use error::{Error, Result};
