//! Experiment harness for the fibershape toolkit: scenario configuration,
//! seeded launch-power sweeps, EGN calibration and PMF-optimization
//! pipelines, AWGN cross-checks, and CSV emission for plotting.
//!
//! The harness layers on top of [`fibershape_core`]:
//!
//! * [`scenario`] — structured-text scenario files binding a modulation, a
//!   WDM signal plan, a link, and a launch-power grid under one seed.
//! * [`sweep`] — the power-sweep driver: one split-step simulation per
//!   (input PMF, launch power) cell, scored into [`sweep::ResultRow`]s, with
//!   a quadratic sub-grid fit for the optimal launch power.
//! * [`pipeline`] — the end-to-end shaping study: uniform sweep, linear MB
//!   shaping at the measured SNR, EGN calibration, EGN-aware optimization,
//!   optional simulation-in-the-loop shaping, and a final comparative sweep,
//!   emitted as a file bundle.
//! * [`awgn_check`] — quadrature AWGN cross-check of a PMF set against the
//!   per-SNR Maxwell-Boltzmann envelope, including the shaping-gap table.
//!
//! Every simulation the harness schedules is deterministic given the
//! scenario seed; parallel sweep cells are merged by sort key, so rerunning
//! a command reproduces its output files byte for byte.

pub mod awgn_check;
pub mod pipeline;
pub mod scenario;
pub mod sweep;

use std::path::PathBuf;

use thiserror::Error;

/// Errors from harness orchestration.
///
/// Simulation and scoring failures carry the sweep cell or pipeline stage
/// they occurred in, so a failed run names the offending work unit instead
/// of surfacing a bare numeric error.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("scenario file {path}: {message}")]
    Scenario { path: PathBuf, message: String },
    #[error("unsupported modulation {0:?} (expected square QAM such as \"16QAM\", \"64QAM\", \"256QAM\")")]
    UnknownModulation(String),
    #[error("sweep needs at least one input PMF")]
    NoPmfs,
    #[error("sweep power grid is empty")]
    EmptyPowerGrid,
    #[error("sweep power grid step must be positive, got {0}")]
    BadPowerStep(f64),
    #[error("sweep cell (method {method}, {p_total_dbm} dBm): {source}")]
    SweepCell {
        method: String,
        p_total_dbm: f64,
        source: Box<HarnessError>,
    },
    #[error("pipeline stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        source: Box<HarnessError>,
    },
    #[error(
        "the effective-SNR maximum sits on the sweep grid edge at {p_total_dbm} dBm; \
         widen the power grid so the peak is bracketed"
    )]
    PeakNotBracketed { p_total_dbm: f64 },
    #[error("need at least {need} sweep rows for {what}, got {got}")]
    TooFewRows {
        what: &'static str,
        need: usize,
        got: usize,
    },
    #[error("effective SNR at {p_total_dbm} dBm is above the measurement ceiling; the scenario has no resolvable noise")]
    SnrAboveCeiling { p_total_dbm: f64 },
    #[error("CSV file {path} has schema header {got:?}, expected {want:?}")]
    CsvSchema {
        path: PathBuf,
        got: String,
        want: String,
    },
    #[error("CSV error in {path}: {source}")]
    Csv {
        path: PathBuf,
        source: csv::Error,
    },
    #[error("PMF file {path} holds a {got}-point constellation, scenario expects {want}")]
    PmfMismatch {
        path: PathBuf,
        got: usize,
        want: usize,
    },
    #[error(transparent)]
    Constellation(#[from] fibershape_core::constellation::ConstellationError),
    #[error(transparent)]
    Metrics(#[from] fibershape_core::metrics::MetricsError),
    #[error(transparent)]
    Egn(#[from] fibershape_core::egn::EgnError),
    #[error(transparent)]
    Ssfm(#[from] fibershape_core::ssfm::SsfmError),
    #[error(transparent)]
    Optimize(#[from] fibershape_core::optimize::OptimizeError),
}

/// Convenience alias used across the harness modules.
pub type Result<T> = std::result::Result<T, HarnessError>;
