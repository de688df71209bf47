//! Performance metrics for shaped transmission: effective SNR, the
//! mismatched-decoding achievable information rate (AIR), quadrature AWGN
//! mutual information, and the shaping-gap figure of merit.
//!
//! # Conventions
//!
//! All rates are per 2D (one polarization, one complex symbol) in bits; the
//! harness doubles them for 4D reporting. SNRs are in dB. Monte-Carlo
//! reductions use the fixed-tree summation of [`crate::sums`], so a given
//! record set always scores to bit-identical values.
//!
//! # The estimator pair
//!
//! The receiver-side estimators work on [`SymbolRecord`]s — ideally
//! least-squares normalized by [`normalize_records`] first:
//!
//! 1. [`per_point_stats`] fits an empirical mean and variance to the received
//!    cloud of every constellation point.
//! 2. [`effective_snr`] forms `Σ P_i·|μ_i|² / Σ P_i·σ_i²`, the standard
//!    effective-SNR estimate under a circular-Gaussian auxiliary channel.
//! 3. [`air_mismatched`] scores the records against the auxiliary channel
//!    `q(y|x_i) = exp(−|y−x_i|²/σ_i²)/(π σ_i²)` with means fixed at the ideal
//!    points and the fitted variances: a true lower bound on the achievable
//!    rate regardless of the real channel statistics.

use std::collections::HashMap;
use std::io::{Read as _, Write as _};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use thiserror::Error;

use crate::constellation::{Constellation, ConstellationError, Pmf};
use crate::sums;

/// Gauss-Hermite order per axis used by default; accuracy is far below the
/// 1e-3-bit tolerances used anywhere in the toolkit.
pub const GH_ORDER: usize = 20;
/// Floor applied to fitted per-point variances in the auxiliary channel.
pub const VARIANCE_FLOOR: f64 = 1e-12;
/// Bisection tolerance of [`snr_needed`] in dB.
pub const SNR_BISECT_TOL_DB: f64 = 1e-3;
/// Mixture terms more than this far (in nats) below the leading exponent are
/// dropped; exp(−45) ≈ 3e-20 is invisible next to 1 in f64.
const EXP_CUTOFF: f64 = 45.0;
/// Max tolerated deviation when detecting I/Q-product structure.
const PRODUCT_TOL: f64 = 1e-13;

/// Errors from metric estimation.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no records to score")]
    EmptyRecords,
    #[error("record {record} has tx index {index}, constellation size {size}")]
    IndexOutOfRange {
        record: usize,
        index: usize,
        size: usize,
    },
    #[error("constellation point {index} has probability {prob} but only {count} records; need at least 2")]
    InsufficientCount {
        index: usize,
        prob: f64,
        count: usize,
    },
    #[error("record {record} transmitted point {index} which has zero probability")]
    TxProbZero { record: usize, index: usize },
    #[error("target rate {target} bits is not reachable: entropy is {entropy} bits")]
    TargetAboveEntropy { target: f64, entropy: f64 },
    #[error("snr bisection could not bracket target {target} bits within [{lo}, {hi}] dB")]
    BracketFailed { target: f64, lo: f64, hi: f64 },
    #[error("records have zero transmit energy; cannot normalize")]
    DegenerateNormalization,
    #[error(transparent)]
    Constellation(#[from] ConstellationError),
    #[error("records file {path}: {reason}")]
    FileFormat { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, MetricsError>;

// ---------------------------------------------------------------------------
// Symbol records
// ---------------------------------------------------------------------------

/// One scored symbol: the transmitted constellation index and the received
/// complex sample after matched filtering and downsampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymbolRecord {
    pub tx_index: u16,
    pub rx: Complex64,
}

/// Metadata stored in the records-file header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordsHeader {
    /// Bits per symbol of the constellation the indices refer to.
    pub bits: u32,
    /// Master seed of the run that produced the records.
    pub seed: u64,
    /// Hash of the producing configuration (hex string, any length).
    pub config_hash: String,
}

/// Write records in the binary dump format: one text header line
/// `fibershape-records v1 m=<bits> seed=<seed> config=<hash> n=<count>`,
/// then per record a little-endian `u16` tx index and two little-endian
/// `f64`s (re, im).
pub fn write_records(path: &Path, header: &RecordsHeader, records: &[SymbolRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "fibershape-records v1 m={} seed={} config={} n={}",
        header.bits,
        header.seed,
        header.config_hash,
        records.len()
    )?;
    for r in records {
        out.write_all(&r.tx_index.to_le_bytes())?;
        out.write_all(&r.rx.re.to_le_bytes())?;
        out.write_all(&r.rx.im.to_le_bytes())?;
    }
    Ok(())
}

/// Read a records file written by [`write_records`].
pub fn read_records(path: &Path) -> Result<(RecordsHeader, Vec<SymbolRecord>)> {
    let fail = |reason: String| MetricsError::FileFormat {
        path: path.display().to_string(),
        reason,
    };
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header_line = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        file.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        header_line.push(byte[0]);
        if header_line.len() > 4096 {
            return Err(fail("header line too long".into()));
        }
    }
    let header_text =
        String::from_utf8(header_line).map_err(|e| fail(format!("header not utf-8: {e}")))?;
    let mut fields = header_text.split_whitespace();
    if fields.next() != Some("fibershape-records") || fields.next() != Some("v1") {
        return Err(fail(format!("bad magic: {header_text:?}")));
    }
    let mut bits = None;
    let mut seed = None;
    let mut config = None;
    let mut n = None;
    for field in fields {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| fail(format!("bad header field {field:?}")))?;
        match key {
            "m" => bits = Some(value.parse::<u32>().map_err(|e| fail(e.to_string()))?),
            "seed" => seed = Some(value.parse::<u64>().map_err(|e| fail(e.to_string()))?),
            "config" => config = Some(value.to_string()),
            "n" => n = Some(value.parse::<usize>().map_err(|e| fail(e.to_string()))?),
            other => return Err(fail(format!("unknown header key {other:?}"))),
        }
    }
    let header = RecordsHeader {
        bits: bits.ok_or_else(|| fail("missing m".into()))?,
        seed: seed.ok_or_else(|| fail("missing seed".into()))?,
        config_hash: config.ok_or_else(|| fail("missing config".into()))?,
    };
    let n = n.ok_or_else(|| fail("missing n".into()))?;
    let mut records = Vec::with_capacity(n);
    let mut buf = [0u8; 18];
    for _ in 0..n {
        file.read_exact(&mut buf)
            .map_err(|_| fail("truncated record section".into()))?;
        let tx_index = u16::from_le_bytes([buf[0], buf[1]]);
        let re = f64::from_le_bytes(buf[2..10].try_into().expect("slice length"));
        let im = f64::from_le_bytes(buf[10..18].try_into().expect("slice length"));
        records.push(SymbolRecord {
            tx_index,
            rx: Complex64::new(re, im),
        });
    }
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(fail("trailing bytes after records".into()));
    }
    Ok((header, records))
}

/// Remove the global complex scale/rotation between the received samples and
/// the ideal points by a least-squares fit of `rx ≈ a·x_tx`, returning the
/// corrected records and the fitted `a`.
pub fn normalize_records(
    records: &[SymbolRecord],
    c: &Constellation,
) -> Result<(Vec<SymbolRecord>, Complex64)> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let points = c.points();
    let mut num = Complex64::new(0.0, 0.0);
    let mut den = 0.0;
    for (k, r) in records.iter().enumerate() {
        let i = r.tx_index as usize;
        if i >= points.len() {
            return Err(MetricsError::IndexOutOfRange {
                record: k,
                index: i,
                size: points.len(),
            });
        }
        num += points[i].conj() * r.rx;
        den += points[i].norm_sqr();
    }
    if den <= 0.0 || num.norm_sqr() == 0.0 {
        return Err(MetricsError::DegenerateNormalization);
    }
    let a = num / den;
    let corrected = records
        .iter()
        .map(|r| SymbolRecord {
            tx_index: r.tx_index,
            rx: r.rx / a,
        })
        .collect();
    Ok((corrected, a))
}

// ---------------------------------------------------------------------------
// Per-point statistics and effective SNR
// ---------------------------------------------------------------------------

/// Empirical per-constellation-point statistics of a record set.
#[derive(Debug, Clone)]
pub struct PerPointStats {
    /// Empirical mean of the received samples per point (NaN if unobserved).
    pub means: Vec<Complex64>,
    /// Empirical variance `E|rx − μ_i|²` per point (population convention).
    pub vars: Vec<f64>,
    /// Number of records observed per point.
    pub counts: Vec<usize>,
}

impl PerPointStats {
    /// Points with at least two observations carry a usable variance.
    pub fn is_usable(&self, i: usize) -> bool {
        self.counts[i] >= 2
    }
}

/// Fit per-point means and variances over a record set (two passes, exact for
/// noiseless data). `m` is the constellation size.
pub fn per_point_stats(records: &[SymbolRecord], m: usize) -> Result<PerPointStats> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let mut sums = vec![Complex64::new(0.0, 0.0); m];
    let mut counts = vec![0usize; m];
    for (k, r) in records.iter().enumerate() {
        let i = r.tx_index as usize;
        if i >= m {
            return Err(MetricsError::IndexOutOfRange {
                record: k,
                index: i,
                size: m,
            });
        }
        sums[i] += r.rx;
        counts[i] += 1;
    }
    let means: Vec<Complex64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| {
            if n > 0 {
                s / n as f64
            } else {
                Complex64::new(f64::NAN, f64::NAN)
            }
        })
        .collect();
    let mut sq = vec![0.0; m];
    for r in records {
        let i = r.tx_index as usize;
        sq[i] += (r.rx - means[i]).norm_sqr();
    }
    let vars = sq
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| if n > 0 { s / n as f64 } else { f64::NAN })
        .collect();
    Ok(PerPointStats {
        means,
        vars,
        counts,
    })
}

/// Effective SNR of a record set, or a sentinel when the measurement floor is
/// reached (zero fitted noise, e.g. a noiseless loopback).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnrEstimate {
    /// Estimated effective SNR in dB.
    Db(f64),
    /// The fitted noise variance vanished; the true SNR is above anything the
    /// record set can resolve.
    AboveMeasurementCeiling,
}

impl SnrEstimate {
    /// The dB value, if the estimate is finite.
    pub fn db(self) -> Option<f64> {
        match self {
            SnrEstimate::Db(v) => Some(v),
            SnrEstimate::AboveMeasurementCeiling => None,
        }
    }
}

/// SNRs above this are reported as [`SnrEstimate::AboveMeasurementCeiling`]:
/// the fitted noise is indistinguishable from accumulation rounding.
pub const SNR_CEILING_DB: f64 = 200.0;

/// A point whose expected record count `p_i·n` is at least this must actually
/// be observed (≥ 2 records); below it, an unobserved point is treated as an
/// unobservable tail and skipped rather than failing the whole estimate.
pub const OBSERVABILITY_MIN_EXPECTED: f64 = 10.0;

/// Effective SNR `Σ P_i|μ_i|² / Σ P_i σ_i²` over the occupied points.
///
/// Every occupied point we could reasonably expect to observe (expected count
/// `p_i·n ≥` [`OBSERVABILITY_MIN_EXPECTED`]) must have at least two records;
/// otherwise its variance is not estimable and this errors. Occupied points
/// in the deep tail (expected count below the threshold — strongly shaped
/// PMFs put probabilities like 1e-20 on corner points) are excluded from the
/// mixture; their weight bounds the bias at a negligible level. A vanishing
/// denominator (noiseless records, up to float rounding — anything above
/// [`SNR_CEILING_DB`]) yields the ceiling sentinel rather than a number.
pub fn effective_snr(stats: &PerPointStats, pmf: &Pmf) -> Result<SnrEstimate> {
    if stats.means.len() != pmf.len() {
        return Err(MetricsError::Constellation(
            ConstellationError::LengthMismatch {
                got: pmf.len(),
                want: stats.means.len(),
            },
        ));
    }
    let n_total: usize = stats.counts.iter().sum();
    let mut sig = 0.0;
    let mut noise = 0.0;
    for (i, &p) in pmf.probs().iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        if !stats.is_usable(i) {
            if p * n_total as f64 >= OBSERVABILITY_MIN_EXPECTED {
                return Err(MetricsError::InsufficientCount {
                    index: i,
                    prob: p,
                    count: stats.counts[i],
                });
            }
            continue; // unobservable tail point
        }
        sig += p * stats.means[i].norm_sqr();
        noise += p * stats.vars[i];
    }
    if noise <= 0.0 || sig / noise > crate::units::db_to_lin(SNR_CEILING_DB) {
        return Ok(SnrEstimate::AboveMeasurementCeiling);
    }
    Ok(SnrEstimate::Db(crate::units::lin_to_db(sig / noise)))
}

// ---------------------------------------------------------------------------
// Mismatched-decoding AIR
// ---------------------------------------------------------------------------

/// Options for [`air_mismatched`].
#[derive(Debug, Clone, Copy)]
pub struct AirOptions {
    /// Lower clamp on auxiliary-channel variances.
    pub variance_floor: f64,
}

impl Default for AirOptions {
    fn default() -> Self {
        Self {
            variance_floor: VARIANCE_FLOOR,
        }
    }
}

/// A scored AIR with its Monte-Carlo uncertainty.
#[derive(Debug, Clone, Copy)]
pub struct AirReport {
    /// Achievable information rate, bits per 2D symbol.
    pub air_2d_bits: f64,
    /// Standard error of the estimate (sample std / sqrt(n)).
    pub std_err_bits: f64,
    /// Number of records scored.
    pub n_scored: usize,
}

/// Mismatched-decoding AIR of `records` against the auxiliary channel built
/// from the ideal points of `c` and the fitted per-point variances in
/// `stats` (floored at `opts.variance_floor`):
///
/// `AIR = (1/N) Σ_k log2 [ q(y_k|x_{tx_k}) / Σ_j P_j q(y_k|x_j) ]`.
///
/// This is a valid lower bound on the mutual information of the true channel
/// for any variance choice, which is what makes it an honest comparison
/// metric between shaping strategies.
pub fn air_mismatched(
    records: &[SymbolRecord],
    c: &Constellation,
    p: &Pmf,
    stats: &PerPointStats,
    opts: AirOptions,
) -> Result<AirReport> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let m = c.len();
    if p.len() != m || stats.means.len() != m {
        return Err(MetricsError::Constellation(
            ConstellationError::LengthMismatch {
                got: p.len(),
                want: m,
            },
        ));
    }
    // Pre-floor variances and collect the active mixture components. Occupied
    // points without a usable variance estimate (unobservable tails of a
    // strongly shaped PMF) get the record-weighted average variance imputed;
    // their prior weight keeps their influence on the mixture negligible.
    let mut var_sum = 0.0;
    let mut var_cnt = 0usize;
    for i in 0..m {
        if stats.is_usable(i) {
            var_sum += stats.vars[i] * stats.counts[i] as f64;
            var_cnt += stats.counts[i];
        }
    }
    if var_cnt == 0 {
        let first_active = (0..m).find(|&i| p.probs()[i] > 0.0).unwrap_or(0);
        return Err(MetricsError::InsufficientCount {
            index: first_active,
            prob: p.probs()[first_active],
            count: stats.counts[first_active],
        });
    }
    let avg_var = var_sum / var_cnt as f64;
    let floors: Vec<f64> = (0..m)
        .map(|i| {
            if p.probs()[i] <= 0.0 {
                f64::NAN // unused
            } else if stats.is_usable(i) {
                stats.vars[i].max(opts.variance_floor)
            } else {
                avg_var.max(opts.variance_floor)
            }
        })
        .collect();
    let active: Vec<usize> = (0..m).filter(|&i| p.probs()[i] > 0.0).collect();
    if active.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let ln_pi_var: Vec<f64> = (0..m)
        .map(|i| {
            if p.probs()[i] > 0.0 {
                (core::f64::consts::PI * floors[i]).ln()
            } else {
                f64::NAN
            }
        })
        .collect();
    let ln_prior: Vec<f64> = p
        .probs()
        .iter()
        .map(|&v| if v > 0.0 { v.ln() } else { f64::NAN })
        .collect();
    let points = c.points();

    let mut terms = Vec::with_capacity(records.len());
    let mut exps = vec![0.0f64; active.len()];
    for (k, r) in records.iter().enumerate() {
        let tx = r.tx_index as usize;
        if tx >= m {
            return Err(MetricsError::IndexOutOfRange {
                record: k,
                index: tx,
                size: m,
            });
        }
        if p.probs()[tx] <= 0.0 {
            return Err(MetricsError::TxProbZero {
                record: k,
                index: tx,
            });
        }
        // ln q(y|x_tx)
        let num = -ln_pi_var[tx] - (r.rx - points[tx]).norm_sqr() / floors[tx];
        // ln Σ_j P_j q(y|x_j) via logsumexp
        let mut max_e = f64::NEG_INFINITY;
        for (slot, &j) in active.iter().enumerate() {
            let e = ln_prior[j] - ln_pi_var[j] - (r.rx - points[j]).norm_sqr() / floors[j];
            exps[slot] = e;
            if e > max_e {
                max_e = e;
            }
        }
        let mut acc = 0.0;
        for &e in &exps {
            if e - max_e > -EXP_CUTOFF {
                acc += (e - max_e).exp();
            }
        }
        let den = max_e + acc.ln();
        terms.push((num - den) / core::f64::consts::LN_2);
    }
    let (mean, var) = sums::mean_and_variance(&terms);
    Ok(AirReport {
        air_2d_bits: mean,
        std_err_bits: (var / terms.len() as f64).sqrt(),
        n_scored: terms.len(),
    })
}

/// How the auxiliary-channel statistics are fitted before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FitMode {
    /// Fit statistics on all records and score the same records (default;
    /// the bias is negligible at the record counts used here).
    #[default]
    Joint,
    /// Fit on the first half, score the second half: a strictly fair
    /// auxiliary channel at half the scoring statistics.
    Holdout,
}

/// Everything the harness wants from one record set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub snr: SnrEstimate,
    pub air: AirReport,
    pub stats: PerPointStats,
    /// Least-squares normalization that was removed from the records.
    pub scale: Complex64,
}

/// Normalize, fit, and score a record set in one call.
pub fn evaluate_records(
    records: &[SymbolRecord],
    c: &Constellation,
    p: &Pmf,
    mode: FitMode,
    opts: AirOptions,
) -> Result<Evaluation> {
    let cn = c.normalized_for(p)?;
    let (normed, scale) = normalize_records(records, &cn)?;
    match mode {
        FitMode::Joint => {
            let stats = per_point_stats(&normed, cn.len())?;
            let snr = effective_snr(&stats, p)?;
            let air = air_mismatched(&normed, &cn, p, &stats, opts)?;
            Ok(Evaluation {
                snr,
                air,
                stats,
                scale,
            })
        }
        FitMode::Holdout => {
            let half = normed.len() / 2;
            if half == 0 {
                return Err(MetricsError::EmptyRecords);
            }
            let stats = per_point_stats(&normed[..half], cn.len())?;
            let snr = effective_snr(&stats, p)?;
            let air = air_mismatched(&normed[half..], &cn, p, &stats, opts)?;
            Ok(Evaluation {
                snr,
                air,
                stats,
                scale,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Gauss-Hermite machinery
// ---------------------------------------------------------------------------

/// Cached Gauss-Hermite nodes/weights for ∫exp(−t²)f(t)dt.
fn gauss_hermite(order: usize) -> Arc<(Vec<f64>, Vec<f64>)> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<(Vec<f64>, Vec<f64>)>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().expect("gh cache poisoned");
    map.entry(order)
        .or_insert_with(|| {
            let rule = gauss_quad::GaussHermite::new(order)
                .expect("Gauss-Hermite order must be at least 2");
            let (nodes, weights): (Vec<f64>, Vec<f64>) =
                rule.as_node_weight_pairs().iter().copied().unzip();
            Arc::new((nodes, weights))
        })
        .clone()
}

/// A memoryless channel whose outputs are circular Gaussians per input point.
#[derive(Debug, Clone)]
pub struct GaussianChannel {
    /// Output mean per constellation point.
    pub means: Vec<Complex64>,
    /// Total complex output variance per point (both quadratures combined).
    pub vars: Vec<f64>,
}

impl GaussianChannel {
    /// The matched AWGN channel on the points of `c` with total noise
    /// variance `var`.
    pub fn awgn(c: &Constellation, var: f64) -> Self {
        Self {
            means: c.points().to_vec(),
            vars: vec![var; c.len()],
        }
    }
}

/// Per-point relative-entropy integrals `D_i = ∫ W_i log2(W_i / Σ_j p_j W_j)`
/// for a Gaussian-output channel, by tensor Gauss-Hermite quadrature of the
/// given order. Returns `(Σ_i p_i D_i, D)`; `D_i` is evaluated for every
/// point (also zero-probability ones, which the mixture simply omits — their
/// `D_i` is what a reassigned unit of mass would earn, which is exactly what
/// the optimizers need).
pub fn mixture_mi_terms(
    ch: &GaussianChannel,
    probs: &[f64],
    order: usize,
) -> Result<(f64, Vec<f64>)> {
    let m = ch.means.len();
    if probs.len() != m || ch.vars.len() != m {
        return Err(MetricsError::Constellation(
            ConstellationError::LengthMismatch {
                got: probs.len(),
                want: m,
            },
        ));
    }
    let gh = gauss_hermite(order);
    let (nodes, weights) = (&gh.0, &gh.1);
    let active: Vec<usize> = (0..m).filter(|&j| probs[j] > 0.0).collect();
    if active.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    // Precompute per-active-component constants: ln p_j − ln(π v_j), 1/v_j.
    let comp: Vec<(Complex64, f64, f64)> = active
        .iter()
        .map(|&j| {
            let v = ch.vars[j];
            (
                ch.means[j],
                probs[j].ln() - (core::f64::consts::PI * v).ln(),
                1.0 / v,
            )
        })
        .collect();
    let inv_pi = core::f64::consts::FRAC_1_PI;
    let mut d = vec![0.0f64; m];
    let mut exps = vec![0.0f64; comp.len()];
    for i in 0..m {
        let vi = ch.vars[i];
        let si = vi.sqrt();
        let ln_wi_const = -(core::f64::consts::PI * vi).ln();
        let mut acc_i = 0.0;
        for (k, (&tk, &wk)) in nodes.iter().zip(weights).enumerate() {
            let _ = k;
            for (&tl, &wl) in nodes.iter().zip(weights) {
                let y = ch.means[i] + Complex64::new(tk * si, tl * si);
                let t2 = tk * tk + tl * tl;
                let ln_num = ln_wi_const - t2;
                let mut max_e = f64::NEG_INFINITY;
                for (slot, &(mean, ln_c, inv_v)) in comp.iter().enumerate() {
                    let e = ln_c - (y - mean).norm_sqr() * inv_v;
                    exps[slot] = e;
                    if e > max_e {
                        max_e = e;
                    }
                }
                let mut s = 0.0;
                for &e in &exps {
                    if e - max_e > -EXP_CUTOFF {
                        s += (e - max_e).exp();
                    }
                }
                let ln_den = max_e + s.ln();
                acc_i += wk * wl * (ln_num - ln_den);
            }
        }
        d[i] = acc_i * inv_pi / core::f64::consts::LN_2;
    }
    let mi = d
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&di, &p)| p * di)
        .sum();
    Ok((mi, d))
}

// ---------------------------------------------------------------------------
// AWGN mutual information
// ---------------------------------------------------------------------------

/// Mutual information of `(c, p)` over the matched AWGN channel at `snr_db`,
/// in bits per 2D symbol, with the default quadrature order.
///
/// The pair is normalized to unit energy internally, so `snr_db` is the
/// actual Es/N0. PMFs with exact I/Q-product structure (uniform, any
/// Maxwell-Boltzmann) are decomposed into two PAM problems, which is both
/// faster and slightly more accurate; the general path does full 2D tensor
/// quadrature.
pub fn awgn_mi(c: &Constellation, p: &Pmf, snr_db: f64) -> Result<f64> {
    awgn_mi_order(c, p, snr_db, GH_ORDER)
}

/// [`awgn_mi`] at an explicit quadrature order.
pub fn awgn_mi_order(c: &Constellation, p: &Pmf, snr_db: f64, order: usize) -> Result<f64> {
    let cn = c.normalized_for(p)?;
    let var = crate::units::db_to_lin(-snr_db);
    if let Some((row, col)) = product_marginals(&cn, p) {
        let side = cn.grid_side();
        // Column levels are the real parts along the first row; row levels
        // the imaginary parts down the first column.
        let re_levels: Vec<f64> = (0..side).map(|cc| cn.points()[cc].re).collect();
        let im_levels: Vec<f64> = (0..side).map(|r| cn.points()[r * side].im).collect();
        let v_axis = var / 2.0;
        return Ok(pam_mi(&re_levels, &col, v_axis, order)
            + pam_mi(&im_levels, &row, v_axis, order));
    }
    let ch = GaussianChannel::awgn(&cn, var);
    Ok(mixture_mi_terms(&ch, p.probs(), order)?.0)
}

/// Like [`awgn_mi`] but always 2D, returning the per-point terms `D_i` needed
/// by the gradient- and BA-based optimizers. `c` must already be at the scale
/// matching `var_total` (no internal normalization).
pub fn awgn_mi_terms(
    c: &Constellation,
    p: &Pmf,
    var_total: f64,
    order: usize,
) -> Result<(f64, Vec<f64>)> {
    let ch = GaussianChannel::awgn(c, var_total);
    mixture_mi_terms(&ch, p.probs(), order)
}

/// Row/column marginals if `p` factorizes over the grid axes of `c` (to
/// [`PRODUCT_TOL`]); `None` otherwise.
fn product_marginals(c: &Constellation, p: &Pmf) -> Option<(Vec<f64>, Vec<f64>)> {
    if p.len() != c.len() {
        return None;
    }
    let side = c.grid_side();
    let mut row = vec![0.0; side];
    let mut col = vec![0.0; side];
    for r in 0..side {
        for cc in 0..side {
            let v = p.probs()[r * side + cc];
            row[r] += v;
            col[cc] += v;
        }
    }
    for r in 0..side {
        for cc in 0..side {
            if (p.probs()[r * side + cc] - row[r] * col[cc]).abs() > PRODUCT_TOL {
                return None;
            }
        }
    }
    Some((row, col))
}

/// MI of a real PAM constellation over real AWGN with per-axis variance
/// `v_axis`, in bits.
fn pam_mi(levels: &[f64], probs: &[f64], v_axis: f64, order: usize) -> f64 {
    let gh = gauss_hermite(order);
    let (nodes, weights) = (&gh.0, &gh.1);
    let active: Vec<(f64, f64)> = levels
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&x, &p)| (x, p.ln()))
        .collect();
    let inv_2v = 1.0 / (2.0 * v_axis);
    let spread = (2.0 * v_axis).sqrt();
    let inv_sqrt_pi = 1.0 / core::f64::consts::PI.sqrt();
    let mut mi = 0.0;
    let mut exps = vec![0.0f64; active.len()];
    for (&xi, &pi) in levels.iter().zip(probs) {
        if pi <= 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for (&t, &w) in nodes.iter().zip(weights) {
            let y = xi + spread * t;
            let ln_num = -t * t;
            let mut max_e = f64::NEG_INFINITY;
            for (slot, &(xj, ln_pj)) in active.iter().enumerate() {
                let d = y - xj;
                let e = ln_pj - d * d * inv_2v;
                exps[slot] = e;
                if e > max_e {
                    max_e = e;
                }
            }
            let mut s = 0.0;
            for &e in &exps {
                if e - max_e > -EXP_CUTOFF {
                    s += (e - max_e).exp();
                }
            }
            acc += w * (ln_num - (max_e + s.ln()));
        }
        mi += pi * acc * inv_sqrt_pi / core::f64::consts::LN_2;
    }
    mi
}

// ---------------------------------------------------------------------------
// SNR inversion and the shaping gap
// ---------------------------------------------------------------------------

/// The SNR (dB) at which `(c, p)` achieves `target_mi` bits over AWGN, by
/// bisection to [`SNR_BISECT_TOL_DB`]. Errors when the target is at or above
/// the PMF entropy (unreachable at any SNR).
pub fn snr_needed(c: &Constellation, p: &Pmf, target_mi: f64) -> Result<f64> {
    let entropy = p.entropy_bits();
    if target_mi >= entropy - 1e-9 {
        return Err(MetricsError::TargetAboveEntropy {
            target: target_mi,
            entropy,
        });
    }
    bisect_snr(target_mi, |snr| awgn_mi(c, p, snr), -30.0, 40.0)
}

fn bisect_snr(
    target: f64,
    mut mi: impl FnMut(f64) -> Result<f64>,
    mut lo: f64,
    mut hi: f64,
) -> Result<f64> {
    // Expand the bracket until it contains the target.
    let mut grow = 0;
    while mi(lo)? > target {
        lo -= 15.0;
        grow += 1;
        if grow > 6 {
            return Err(MetricsError::BracketFailed {
                target,
                lo,
                hi,
            });
        }
    }
    let mut grow = 0;
    while mi(hi)? < target {
        hi += 10.0;
        grow += 1;
        if grow > 6 {
            return Err(MetricsError::BracketFailed {
                target,
                lo,
                hi,
            });
        }
    }
    while hi - lo > SNR_BISECT_TOL_DB {
        let mid = 0.5 * (lo + hi);
        if mi(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// The per-SNR Maxwell-Boltzmann envelope of a constellation: at each SNR,
/// the best MB member and its MI. Golden-section over the fixed-scale tilt λ
/// (the smooth search coordinate of the family) with warm-started brackets;
/// results are cached, so repeated gap evaluations on the same constellation
/// are cheap.
#[derive(Debug, Clone)]
pub struct MbEnvelope {
    c: Constellation,
    /// (snr_db, optimal lambda) pairs from previous queries, for warm starts.
    cache: Vec<(f64, f64)>,
}

impl MbEnvelope {
    pub fn new(c: &Constellation) -> Self {
        Self {
            c: c.clone(),
            cache: Vec::new(),
        }
    }

    /// Envelope MI at `snr_db`: `max_λ I(MB(λ); snr)`, plus the argmax λ
    /// (convert with [`crate::constellation::mb_lambda_to_nu`] if the
    /// self-normalized parameter is wanted).
    pub fn mi(&mut self, snr_db: f64) -> Result<(f64, f64)> {
        let f = |lam: f64| -> Result<f64> {
            let p = mb_lambda_cached(&self.c, lam)?;
            awgn_mi(&self.c, &p, snr_db)
        };
        // Warm start from the cached λ of the nearest previously solved SNR.
        let guess = self
            .cache
            .iter()
            .min_by(|a, b| {
                (a.0 - snr_db)
                    .abs()
                    .partial_cmp(&(b.0 - snr_db).abs())
                    .expect("finite snrs")
            })
            .map(|&(_, lam)| lam)
            .unwrap_or(1.0);
        // Bracket [0, hi] with an interior maximum: expand hi until the MI at
        // hi drops below the best interior value seen.
        let mut hi = (2.0 * guess).max(0.5);
        let mut f_hi = f(hi)?;
        let mut expansions = 0;
        loop {
            let probe = hi * 0.618;
            let f_probe = f(probe)?;
            if f_probe >= f_hi || expansions >= 40 {
                break;
            }
            hi *= 2.0;
            f_hi = f(hi)?;
            expansions += 1;
        }
        let (lam_opt, mi_opt) = golden_max(&f, 0.0, hi, 1e-5 * (1.0 + guess))?;
        self.cache.push((snr_db, lam_opt));
        if self.cache.len() > 256 {
            self.cache.remove(0);
        }
        Ok((mi_opt, lam_opt))
    }

    /// SNR (dB) at which the envelope reaches `target_mi` bits.
    pub fn snr_needed(&mut self, target_mi: f64) -> Result<f64> {
        let max_rate = self.c.bits_per_symbol() as f64;
        if target_mi >= max_rate - 1e-9 {
            return Err(MetricsError::TargetAboveEntropy {
                target: target_mi,
                entropy: max_rate,
            });
        }
        bisect_snr(target_mi, |snr| Ok(self.mi(snr)?.0), -30.0, 40.0)
    }
}

/// Memoized MB members keyed by (constellation identity, λ bits). The
/// envelope hammers the same λ values during bisection; the tilt is
/// deterministic so caching is transparent.
fn mb_lambda_cached(c: &Constellation, lam: f64) -> Result<Pmf> {
    thread_local! {
        static CACHE: std::cell::RefCell<HashMap<(u32, u64, u64), Pmf>> =
            std::cell::RefCell::new(HashMap::new());
    }
    let key = (
        c.bits_per_symbol(),
        c.points()[0].re.to_bits(),
        lam.to_bits(),
    );
    CACHE.with(|cell| {
        if let Some(hit) = cell.borrow().get(&key) {
            return Ok(hit.clone());
        }
        let p = crate::constellation::mb_pmf_lambda(c, lam)?;
        let mut map = cell.borrow_mut();
        if map.len() > 8192 {
            map.clear();
        }
        map.insert(key, p.clone());
        Ok(p)
    })
}

/// Golden-section maximization of `f` on `[lo, hi]` to argument tolerance
/// `tol`; returns `(argmax, max)`.
fn golden_max(
    f: &impl Fn(f64) -> Result<f64>,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
) -> Result<(f64, f64)> {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2)?;
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1)?;
        }
    }
    let xm = 0.5 * (lo + hi);
    Ok((xm, f(xm)?))
}

/// Shaping gap δ_SNR of `(c, p)` at a target rate: the extra SNR `p` needs
/// over the per-SNR Opt-MB envelope to reach `target_mi` bits.
///
/// `env` must have been built for the same constellation; passing it in lets
/// callers amortize the envelope across many PMFs and targets.
pub fn shaping_gap_db(
    c: &Constellation,
    p: &Pmf,
    target_mi: f64,
    env: &mut MbEnvelope,
) -> Result<f64> {
    let need = snr_needed(c, p, target_mi)?;
    let need_env = env.snr_needed(target_mi)?;
    Ok(need - need_env)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constellation::{mb_pmf, Constellation, Pmf};
    use crate::rng::stream_rng;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::Rng as _;
    use rand_distr::{Distribution as _, StandardNormal, WeightedIndex};

    fn qam(bits: u32) -> Constellation {
        Constellation::square_qam(bits).unwrap()
    }

    /// Synthetic AWGN records at a given SNR on the unit-energy pair.
    fn awgn_records(
        c: &Constellation,
        p: &Pmf,
        snr_db: f64,
        n: usize,
        seed: u64,
    ) -> Vec<SymbolRecord> {
        let cn = c.normalized_for(p).unwrap();
        let sigma_axis = (crate::units::db_to_lin(-snr_db) / 2.0).sqrt();
        let mut rng = stream_rng(seed, "awgn-records", 0);
        let dist = WeightedIndex::new(p.probs()).unwrap();
        (0..n)
            .map(|_| {
                let i = dist.sample(&mut rng);
                let nr: f64 = StandardNormal.sample(&mut rng);
                let ni: f64 = StandardNormal.sample(&mut rng);
                SymbolRecord {
                    tx_index: i as u16,
                    rx: cn.points()[i] + Complex64::new(nr * sigma_axis, ni * sigma_axis),
                }
            })
            .collect()
    }

    #[test]
    fn stats_and_snr_recover_construction() {
        let c = qam(4);
        let p = Pmf::uniform(16);
        let snr_db = 14.0;
        let records = awgn_records(&c, &p, snr_db, 200_000, 7);
        let stats = per_point_stats(&records, 16).unwrap();
        let snr = effective_snr(&stats, &p).unwrap().db().unwrap();
        assert_abs_diff_eq!(snr, snr_db, epsilon = 0.05);
    }

    #[test]
    fn noiseless_records_hit_the_ceiling() {
        let c = qam(2);
        let p = Pmf::uniform(4);
        let records: Vec<SymbolRecord> = (0..32)
            .map(|k| SymbolRecord {
                tx_index: (k % 4) as u16,
                rx: c.points()[k % 4],
            })
            .collect();
        let stats = per_point_stats(&records, 4).unwrap();
        assert_eq!(
            effective_snr(&stats, &p).unwrap(),
            SnrEstimate::AboveMeasurementCeiling
        );
    }

    #[test]
    fn snr_errors_on_unobserved_occupied_point() {
        let c = qam(2);
        let p = Pmf::uniform(4);
        // 100 records, none on point 3: expected count 25 ≫ the
        // observability threshold, so silence there is a hard error.
        let records: Vec<SymbolRecord> = (0..100)
            .map(|k| SymbolRecord {
                tx_index: (k % 3) as u16, // never transmit point 3
                rx: c.points()[k % 3],
            })
            .collect();
        let stats = per_point_stats(&records, 4).unwrap();
        assert!(matches!(
            effective_snr(&stats, &p),
            Err(MetricsError::InsufficientCount { index: 3, .. })
        ));
    }

    #[test]
    fn snr_skips_unobservable_tail_points() {
        // A point carrying 1e-20 probability cannot be observed in any run;
        // the estimate must proceed without it instead of erroring.
        let c = qam(2);
        let tail = 1e-20;
        let p = Pmf::new(vec![0.5 - tail, 0.25, 0.25, tail]).unwrap();
        let mut rng = stream_rng(5150, "tail-skip", 0);
        let sigma = 0.05;
        let records: Vec<SymbolRecord> = (0..3000)
            .map(|k| {
                let i = k % 3;
                let nr: f64 = StandardNormal.sample(&mut rng);
                let ni: f64 = StandardNormal.sample(&mut rng);
                SymbolRecord {
                    tx_index: i as u16,
                    rx: c.points()[i] + Complex64::new(nr * sigma, ni * sigma),
                }
            })
            .collect();
        let stats = per_point_stats(&records, 4).unwrap();
        let snr = effective_snr(&stats, &p).unwrap().db().unwrap();
        let expect = crate::units::lin_to_db(1.0 / (2.0 * sigma * sigma));
        assert_abs_diff_eq!(snr, expect, epsilon = 0.3);
        // The AIR path also scores, imputing the tail point's variance.
        let air = air_mismatched(&records, &c, &p, &stats, AirOptions::default()).unwrap();
        assert!(air.air_2d_bits > 0.0 && air.air_2d_bits <= 2.0);
    }

    #[test]
    fn air_degenerates_to_entropy_on_perfect_records() {
        // Constructed composition: every point exactly twice, rx = tx.
        let c = qam(4);
        let p = Pmf::uniform(16);
        let mut records = Vec::new();
        for i in 0..16u16 {
            for _ in 0..2 {
                records.push(SymbolRecord {
                    tx_index: i,
                    rx: c.points()[i as usize],
                });
            }
        }
        let stats = per_point_stats(&records, 16).unwrap();
        let air = air_mismatched(&records, &c, &p, &stats, AirOptions::default()).unwrap();
        assert_abs_diff_eq!(air.air_2d_bits, 4.0, epsilon = 1e-6);
    }

    #[test]
    fn air_vanishes_under_huge_variance() {
        let c = qam(2);
        let p = Pmf::uniform(4);
        let records = awgn_records(&c, &p, 10.0, 4096, 3);
        let stats = per_point_stats(&records, 4).unwrap();
        let huge = PerPointStats {
            means: stats.means.clone(),
            vars: vec![1e9; 4],
            counts: stats.counts.clone(),
        };
        let air = air_mismatched(&records, &c, &p, &huge, AirOptions::default()).unwrap();
        assert_abs_diff_eq!(air.air_2d_bits, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn air_is_nonnegative_and_below_matched_mi() {
        let c = qam(6);
        let p = mb_pmf(&c, 0.8).unwrap();
        let snr_db = 12.0;
        let records = awgn_records(&c, &p, snr_db, 100_000, 11);
        let eval =
            evaluate_records(&records, &c, &p, FitMode::Joint, AirOptions::default()).unwrap();
        let matched = awgn_mi(&c, &p, snr_db).unwrap();
        let tol = 3.0 * eval.air.std_err_bits;
        assert!(eval.air.air_2d_bits >= -tol);
        assert!(
            eval.air.air_2d_bits <= matched + tol,
            "AIR {} must lower-bound matched MI {} (tol {tol})",
            eval.air.air_2d_bits,
            matched
        );
        // And the mismatched bound is tight for a truly AWGN channel.
        assert_abs_diff_eq!(eval.air.air_2d_bits, matched, epsilon = 0.02);
    }

    #[test]
    fn holdout_agrees_with_joint_on_awgn() {
        let c = qam(4);
        let p = Pmf::uniform(16);
        let records = awgn_records(&c, &p, 13.0, 120_000, 21);
        let joint =
            evaluate_records(&records, &c, &p, FitMode::Joint, AirOptions::default()).unwrap();
        let holdout =
            evaluate_records(&records, &c, &p, FitMode::Holdout, AirOptions::default()).unwrap();
        assert_abs_diff_eq!(
            joint.air.air_2d_bits,
            holdout.air.air_2d_bits,
            epsilon = 0.01
        );
    }

    #[test]
    fn normalization_undoes_phase_and_scale() {
        let c = qam(4);
        let p = Pmf::uniform(16);
        let rot = Complex64::from_polar(1.7, 0.6);
        let records: Vec<SymbolRecord> = awgn_records(&c, &p, 25.0, 20_000, 5)
            .into_iter()
            .map(|r| SymbolRecord {
                tx_index: r.tx_index,
                rx: r.rx * rot,
            })
            .collect();
        let (normed, a) = normalize_records(&records, &c).unwrap();
        assert_abs_diff_eq!(a.re, rot.re, epsilon = 0.02);
        assert_abs_diff_eq!(a.im, rot.im, epsilon = 0.02);
        let stats = per_point_stats(&normed, 16).unwrap();
        let snr = effective_snr(&stats, &p).unwrap().db().unwrap();
        assert_abs_diff_eq!(snr, 25.0, epsilon = 0.1);
    }

    #[test]
    fn records_file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.bin");
        let mut rng = stream_rng(9, "recio", 0);
        let records: Vec<SymbolRecord> = (0..1000)
            .map(|_| SymbolRecord {
                tx_index: rng.gen_range(0..64),
                rx: Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5),
            })
            .collect();
        let header = RecordsHeader {
            bits: 6,
            seed: 0xdead_beef,
            config_hash: "a1b2c3".into(),
        };
        write_records(&path, &header, &records).unwrap();
        let (h2, r2) = read_records(&path).unwrap();
        assert_eq!(h2, header);
        assert_eq!(r2.len(), records.len());
        for (a, b) in r2.iter().zip(&records) {
            assert_eq!(a.tx_index, b.tx_index);
            assert_eq!(a.rx.re.to_bits(), b.rx.re.to_bits());
            assert_eq!(a.rx.im.to_bits(), b.rx.im.to_bits());
        }
    }

    #[test]
    fn awgn_mi_limits() {
        let c = qam(6);
        let u = Pmf::uniform(64);
        // High SNR: MI -> entropy.
        assert_abs_diff_eq!(awgn_mi(&c, &u, 60.0).unwrap(), 6.0, epsilon = 1e-9);
        // Shaped: MI -> shaped entropy.
        let p = mb_pmf(&c, 1.0).unwrap();
        assert_abs_diff_eq!(
            awgn_mi(&c, &p, 60.0).unwrap(),
            p.entropy_bits(),
            epsilon = 1e-9
        );
        // Low SNR: MI ≈ snr·log2(e) for any unit-energy input.
        let snr_lin = crate::units::db_to_lin(-30.0);
        let mi = awgn_mi(&c, &u, -30.0).unwrap();
        assert_relative_eq!(mi, snr_lin * core::f64::consts::LOG2_E, max_relative = 0.02);
    }

    #[test]
    fn awgn_mi_respects_capacity_bound() {
        let c = qam(8);
        let u = Pmf::uniform(256);
        for snr_db in [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0] {
            let mi = awgn_mi(&c, &u, snr_db).unwrap();
            let cap = (1.0 + crate::units::db_to_lin(snr_db)).log2();
            assert!(mi <= cap + 1e-9, "MI {mi} > capacity {cap} at {snr_db} dB");
            assert!(mi >= 0.0);
        }
    }

    #[test]
    fn product_path_matches_full_2d_quadrature() {
        let c = qam(6);
        for (p, snr) in [
            (Pmf::uniform(64), 8.0),
            (mb_pmf(&c, 0.7).unwrap(), 14.0),
            (mb_pmf(&c, 2.0).unwrap(), 20.0),
        ] {
            let fast = awgn_mi(&c, &p, snr).unwrap();
            let cn = c.normalized_for(&p).unwrap();
            let var = crate::units::db_to_lin(-snr);
            let (full, _) = awgn_mi_terms(&cn, &p, var, GH_ORDER).unwrap();
            assert_abs_diff_eq!(fast, full, epsilon = 2e-7);
        }
    }

    #[test]
    fn quadrature_agrees_with_monte_carlo() {
        let c = qam(4);
        let p = Pmf::uniform(16);
        let snr_db = 9.0;
        let records = awgn_records(&c, &p, snr_db, 150_000, 17);
        // Score with the TRUE channel statistics: matched decoding.
        let cn = c.normalized_for(&p).unwrap();
        let var = crate::units::db_to_lin(-snr_db);
        let stats = PerPointStats {
            means: cn.points().to_vec(),
            vars: vec![var; 16],
            counts: vec![2; 16],
        };
        let air = air_mismatched(&records, &cn, &p, &stats, AirOptions::default()).unwrap();
        let mi = awgn_mi(&c, &p, snr_db).unwrap();
        assert_abs_diff_eq!(air.air_2d_bits, mi, epsilon = 4.0 * air.std_err_bits.max(0.003));
    }

    #[test]
    fn mixture_terms_reduce_to_mi() {
        let c = qam(4);
        let p = mb_pmf(&c, 0.5).unwrap();
        let cn = c.normalized_for(&p).unwrap();
        let var = crate::units::db_to_lin(-10.0);
        let (mi, d) = awgn_mi_terms(&cn, &p, var, GH_ORDER).unwrap();
        let manual: f64 = d.iter().zip(p.probs()).map(|(&di, &pi)| di * pi).sum();
        assert_relative_eq!(mi, manual, max_relative = 1e-12);
        assert_eq!(d.len(), 16);
    }

    #[test]
    fn snr_needed_inverts_mi() {
        let c = qam(6);
        let p = Pmf::uniform(64);
        let target = 4.0;
        let snr = snr_needed(&c, &p, target).unwrap();
        let back = awgn_mi(&c, &p, snr).unwrap();
        assert_abs_diff_eq!(back, target, epsilon = 2e-3);
        // Monotone consistency: more SNR, more MI.
        assert!(awgn_mi(&c, &p, snr + 0.5).unwrap() > target);
        assert!(awgn_mi(&c, &p, snr - 0.5).unwrap() < target);
    }

    #[test]
    fn snr_needed_rejects_unreachable_targets() {
        let c = qam(4);
        let p = Pmf::uniform(16);
        assert!(matches!(
            snr_needed(&c, &p, 4.2),
            Err(MetricsError::TargetAboveEntropy { .. })
        ));
    }

    #[test]
    fn envelope_dominates_every_mb_and_uniform() {
        let c = qam(6);
        let mut env = MbEnvelope::new(&c);
        for snr in [6.0, 10.0, 14.0, 18.0] {
            let (env_mi, lam) = env.mi(snr).unwrap();
            assert!(lam >= 0.0);
            for test_nu in [0.0, 0.3, 0.9, 1.8] {
                let p = mb_pmf(&c, test_nu).unwrap();
                let mi = awgn_mi(&c, &p, snr).unwrap();
                assert!(
                    env_mi >= mi - 1e-6,
                    "envelope {env_mi} below MB(nu={test_nu}) {mi} at {snr} dB"
                );
            }
        }
    }

    #[test]
    fn shaping_gap_of_envelope_member_is_small_and_uniform_gap_positive() {
        let c = qam(6);
        let mut env = MbEnvelope::new(&c);
        // The envelope's own optimizer output at some SNR has ~zero gap at
        // the rate it achieves there.
        let snr = 13.0;
        let (mi_env, lam) = env.mi(snr).unwrap();
        let p_opt = crate::constellation::mb_pmf_lambda(&c, lam).unwrap();
        let gap = shaping_gap_db(&c, &p_opt, mi_env, &mut env).unwrap();
        assert_abs_diff_eq!(gap, 0.0, epsilon = 5e-3);
        // Uniform must pay a positive gap at mid rates.
        let u = Pmf::uniform(64);
        let gap_u = shaping_gap_db(&c, &u, mi_env, &mut env).unwrap();
        assert!(gap_u > 0.1, "uniform 64QAM gap should be sizeable, got {gap_u}");
        assert!(gap_u < 1.53 + 1e-6, "gap can never exceed the ultimate limit");
    }

    #[test]
    fn records_reject_zero_prob_transmissions() {
        let c = qam(2);
        let p = Pmf::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let records = vec![SymbolRecord {
            tx_index: 3,
            rx: c.points()[3],
        }];
        let stats = PerPointStats {
            means: c.points().to_vec(),
            vars: vec![0.1; 4],
            counts: vec![2; 4],
        };
        assert!(matches!(
            air_mismatched(&records, &c, &p, &stats, AirOptions::default()),
            Err(MetricsError::TxProbZero { .. })
        ));
    }
}
