//! Launch-power sweeps: the workhorse that turns (input PMF, launch power)
//! cells into scored result rows, plus the quadratic sub-grid fit that
//! locates the optimal launch power from a sweep.
//!
//! Determinism contract: every cell derives its ASE stream from the scenario
//! seed and the *power-grid index only*, so all PMFs at one launch power see
//! identical amplifier noise (common random numbers). Cells run in parallel
//! but are merged in job order and sorted by `(method, power)`, so the CSV
//! emitted for a sweep is byte-identical across reruns and thread counts.

use std::path::Path;

use fibershape_core::constellation::{self, Constellation, Pmf};
use fibershape_core::egn::LinkConfig;
use fibershape_core::metrics::{self, AirOptions, FitMode};
use fibershape_core::rng::derive_seed;
use fibershape_core::ssfm::{self, SignalConfig};
use fibershape_core::units::dbm_to_watt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{HarnessError, Result};

/// Method tag used for the unshaped input distribution.
pub const UNIFORM_TAG: &str = "UNIFORM";

/// Schema line written as the first line of every sweep CSV.
pub const SWEEP_SCHEMA: &str = "# fibershape-sweep v1";

/// One labeled input distribution for a sweep.
#[derive(Debug, Clone)]
pub struct PmfEntry {
    /// Method tag for the CSV (`UNIFORM`, `LIN_MB`, `EGN_2D`, …).
    pub tag: String,
    /// The input distribution.
    pub pmf: Pmf,
}

impl PmfEntry {
    pub fn new(tag: impl Into<String>, pmf: Pmf) -> Self {
        Self {
            tag: tag.into(),
            pmf,
        }
    }

    /// The uniform baseline entry for an `m`-point constellation.
    pub fn uniform(m: usize) -> Self {
        Self::new(UNIFORM_TAG, Pmf::uniform(m))
    }
}

/// Everything one sweep needs.
#[derive(Debug, Clone)]
pub struct SweepSpec<'a> {
    pub c: &'a Constellation,
    /// Signal plan with the run seed already injected.
    pub cfg: SignalConfig,
    pub link: LinkConfig,
    /// Total launch powers, dBm.
    pub powers_dbm: &'a [f64],
    pub entries: &'a [PmfEntry],
}

/// One scored sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    /// Method tag of the input distribution.
    pub method: String,
    /// Total launch power, dBm.
    pub p_total_dbm: f64,
    /// Effective SNR of the center channel, dB.
    pub snr_eff_db: f64,
    /// Mismatched-decoding AIR, bits per 2D symbol.
    pub air_2d_bits: f64,
    /// AIR per dual-polarization 4D symbol (2 × 2D; the two tributaries are
    /// independent and identically shaped).
    pub air_4d_bits: f64,
    /// Monte-Carlo standard error of `air_2d_bits`.
    pub air_std_err_bits: f64,
    /// Fourth standardized moment of the input distribution.
    pub mu4: f64,
    /// Sixth standardized moment of the input distribution.
    pub mu6: f64,
    /// Input entropy, bits per 2D symbol.
    pub entropy_bits: f64,
    /// Records scored after edge discard.
    pub n_scored: usize,
}

/// Result of one simulated cell before row assembly.
#[derive(Debug, Clone, Copy)]
pub struct CellOutcome {
    pub snr_eff_db: f64,
    pub air_2d_bits: f64,
    pub air_std_err_bits: f64,
    pub n_scored: usize,
}

/// Simulate one (PMF, launch power) cell end to end: generate the WDM block,
/// propagate it at `p_total_dbm` with the given ASE stream, detect the center
/// channel, and score it.
pub fn simulate_cell(
    c: &Constellation,
    cfg: &SignalConfig,
    link: &LinkConfig,
    pmf: &Pmf,
    p_total_dbm: f64,
    noise_seed: u64,
) -> Result<CellOutcome> {
    let p_total_w = dbm_to_watt(p_total_dbm);
    let per_channel = p_total_w / cfg.n_wdm as f64;
    let tx = ssfm::tx_generate(cfg, c, pmf, per_channel)?;
    let rx = ssfm::propagate(&tx.grid, link, p_total_w, noise_seed)?;
    let center = cfg.center_channel();
    let cn = c.normalized_for(pmf)?;
    let records = ssfm::rx_detect(&rx, cfg, link, center, &tx.symbols[center], &cn)?;
    let ev = metrics::evaluate_records(&records, c, pmf, FitMode::Joint, AirOptions::default())?;
    let snr_eff_db = ev
        .snr
        .db()
        .ok_or(HarnessError::SnrAboveCeiling { p_total_dbm })?;
    Ok(CellOutcome {
        snr_eff_db,
        air_2d_bits: ev.air.air_2d_bits,
        air_std_err_bits: ev.air.std_err_bits,
        n_scored: ev.air.n_scored,
    })
}

/// Run the full sweep grid. Cells run in parallel; rows come back sorted by
/// `(method, launch power)` and the first failing cell (in deterministic job
/// order) aborts the sweep with its cell identity attached.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<ResultRow>> {
    if spec.entries.is_empty() {
        return Err(HarnessError::NoPmfs);
    }
    if spec.powers_dbm.is_empty() {
        return Err(HarnessError::EmptyPowerGrid);
    }
    // Precompute per-entry PMF descriptors once.
    let mut descriptors = Vec::with_capacity(spec.entries.len());
    for e in spec.entries {
        let (mu4, mu6) = constellation::moments_raw(spec.c, &e.pmf)?;
        descriptors.push((mu4, mu6, e.pmf.entropy_bits()));
    }

    let jobs: Vec<(usize, usize)> = (0..spec.entries.len())
        .flat_map(|ei| (0..spec.powers_dbm.len()).map(move |pi| (ei, pi)))
        .collect();

    let cells: Vec<Result<ResultRow>> = jobs
        .par_iter()
        .map(|&(ei, pi)| {
            let entry = &spec.entries[ei];
            let p_total_dbm = spec.powers_dbm[pi];
            // Common random numbers: the ASE stream depends on the power
            // index only, never on the PMF.
            let noise_seed = derive_seed(spec.cfg.seed, "sweep-ase", pi as u64);
            let outcome =
                simulate_cell(spec.c, &spec.cfg, &spec.link, &entry.pmf, p_total_dbm, noise_seed)
                    .map_err(|source| HarnessError::SweepCell {
                        method: entry.tag.clone(),
                        p_total_dbm,
                        source: Box::new(source),
                    })?;
            let (mu4, mu6, entropy_bits) = descriptors[ei];
            Ok(ResultRow {
                method: entry.tag.clone(),
                p_total_dbm,
                snr_eff_db: outcome.snr_eff_db,
                air_2d_bits: outcome.air_2d_bits,
                air_4d_bits: 2.0 * outcome.air_2d_bits,
                air_std_err_bits: outcome.air_std_err_bits,
                mu4,
                mu6,
                entropy_bits,
                n_scored: outcome.n_scored,
            })
        })
        .collect();

    let mut rows = cells.into_iter().collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.p_total_dbm.total_cmp(&b.p_total_dbm))
    });
    Ok(rows)
}

/// The rows of one method, sorted by launch power.
pub fn rows_for_method(rows: &[ResultRow], method: &str) -> Vec<ResultRow> {
    let mut out: Vec<ResultRow> = rows.iter().filter(|r| r.method == method).cloned().collect();
    out.sort_by(|a, b| a.p_total_dbm.total_cmp(&b.p_total_dbm));
    out
}

/// A fitted launch-power optimum.
#[derive(Debug, Clone, Copy)]
pub struct PowerFit {
    /// Fitted optimal total launch power, dBm.
    pub p_opt_dbm: f64,
    /// Fitted effective SNR at the optimum, dB.
    pub snr_at_opt_db: f64,
    /// `true` when the quadratic vertex was used; `false` when the fit
    /// degenerated and the best grid point was returned instead.
    pub from_vertex: bool,
}

/// Locate the optimal launch power of one method's rows by a quadratic fit
/// through the best grid point and its two neighbors.
///
/// The SNR peak must be strictly inside the grid; a peak on the first or
/// last grid point means the sweep window missed the optimum and is an
/// error, not a fit. If the three points are locally non-concave (flat
/// curve, Monte-Carlo wiggle) the best grid point itself is returned.
pub fn fit_p_opt(rows: &[ResultRow]) -> Result<PowerFit> {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.p_total_dbm.total_cmp(&b.p_total_dbm));
    if sorted.len() < 3 {
        return Err(HarnessError::TooFewRows {
            what: "the launch-power fit",
            need: 3,
            got: sorted.len(),
        });
    }
    let best = sorted
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.snr_eff_db.total_cmp(&b.1.snr_eff_db))
        .map(|(i, _)| i)
        .expect("non-empty");
    if best == 0 || best == sorted.len() - 1 {
        return Err(HarnessError::PeakNotBracketed {
            p_total_dbm: sorted[best].p_total_dbm,
        });
    }
    let (x0, y0) = (sorted[best - 1].p_total_dbm, sorted[best - 1].snr_eff_db);
    let (x1, y1) = (sorted[best].p_total_dbm, sorted[best].snr_eff_db);
    let (x2, y2) = (sorted[best + 1].p_total_dbm, sorted[best + 1].snr_eff_db);
    let d1 = (y1 - y0) / (x1 - x0);
    let d2 = (y2 - y1) / (x2 - x1);
    let a = (d2 - d1) / (x2 - x0);
    if !(a < 0.0) {
        return Ok(PowerFit {
            p_opt_dbm: x1,
            snr_at_opt_db: y1,
            from_vertex: false,
        });
    }
    // Newton form y = y0 + d1·(x−x0) + a·(x−x0)(x−x1); stationary point:
    let xv = 0.5 * (x0 + x1) - d1 / (2.0 * a);
    if !(x0 < xv && xv < x2) {
        return Ok(PowerFit {
            p_opt_dbm: x1,
            snr_at_opt_db: y1,
            from_vertex: false,
        });
    }
    let yv = y0 + d1 * (xv - x0) + a * (xv - x0) * (xv - x1);
    Ok(PowerFit {
        p_opt_dbm: xv,
        snr_at_opt_db: yv,
        from_vertex: true,
    })
}

/// Write sweep rows as CSV, prefixed by the [`SWEEP_SCHEMA`] line.
pub fn write_rows_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for row in rows {
        wtr.serialize(row).map_err(|source| HarnessError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    }
    let body = wtr
        .into_inner()
        .expect("in-memory CSV writer cannot fail to flush");
    let mut out = Vec::with_capacity(body.len() + SWEEP_SCHEMA.len() + 1);
    out.extend_from_slice(SWEEP_SCHEMA.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&body);
    std::fs::write(path, out).map_err(|source| HarnessError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Read sweep rows written by [`write_rows_csv`], verifying the schema line.
pub fn read_rows_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let (first, rest) = text.split_once('\n').unwrap_or((text.as_str(), ""));
    if first.trim_end() != SWEEP_SCHEMA {
        return Err(HarnessError::CsvSchema {
            path: path.to_path_buf(),
            got: first.trim_end().to_string(),
            want: SWEEP_SCHEMA.to_string(),
        });
    }
    let mut rdr = csv::Reader::from_reader(rest.as_bytes());
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<ResultRow>() {
        rows.push(rec.map_err(|source| HarnessError::Csv {
            path: path.to_path_buf(),
            source,
        })?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fibershape_core::constellation::Constellation;

    fn tiny_cfg(seed: u64) -> SignalConfig {
        SignalConfig {
            symbol_rate: 10e9,
            rolloff: 0.5,
            n_wdm: 3,
            wdm_spacing: 25e9,
            n_sym: 256,
            rrc_span: 16,
            oversampling: 8,
            seed,
        }
    }

    fn tiny_link() -> LinkConfig {
        LinkConfig {
            gamma: 1.3,
            dispersion: 17.0,
            alpha: 0.2,
            noise_figure: 5.0,
            wavelength: 1.55e-6,
            n_span: 1,
            span_length: 40.0,
            step_size: 4.0,
        }
    }

    fn synthetic_rows(powers: &[f64], snrs: &[f64]) -> Vec<ResultRow> {
        powers
            .iter()
            .zip(snrs)
            .map(|(&p, &s)| ResultRow {
                method: "UNIFORM".into(),
                p_total_dbm: p,
                snr_eff_db: s,
                air_2d_bits: 3.0,
                air_4d_bits: 6.0,
                air_std_err_bits: 0.01,
                mu4: 1.32,
                mu6: 1.96,
                entropy_bits: 4.0,
                n_scored: 100,
            })
            .collect()
    }

    #[test]
    fn sweep_rows_are_sorted_consistent_and_reproducible() {
        let c = Constellation::square_qam(4).unwrap();
        let entries = vec![
            PmfEntry::uniform(16),
            PmfEntry::new("LIN_MB", constellation::mb_pmf_lambda(&c, 0.8).unwrap()),
        ];
        let spec = SweepSpec {
            c: &c,
            cfg: tiny_cfg(5),
            link: tiny_link(),
            powers_dbm: &[8.0, 11.0, 14.0],
            entries: &entries,
        };
        let rows = run_sweep(&spec).unwrap();
        assert_eq!(rows.len(), 6);
        // Sorted by method then power; LIN_MB < UNIFORM lexicographically.
        assert!(rows[..3].iter().all(|r| r.method == "LIN_MB"));
        assert!(rows[3..].iter().all(|r| r.method == "UNIFORM"));
        for w in rows[..3].windows(2) {
            assert!(w[0].p_total_dbm < w[1].p_total_dbm);
        }
        for r in &rows {
            assert_eq!(r.air_4d_bits, 2.0 * r.air_2d_bits);
            assert!(r.snr_eff_db.is_finite());
            assert!(r.n_scored > 0);
            // At saturation the AIR estimate tracks the *empirical* symbol
            // entropy, which fluctuates around H at small block sizes.
            assert!(r.air_2d_bits > 0.0 && r.air_2d_bits <= r.entropy_bits + 0.1);
        }
        let rows2 = run_sweep(&spec).unwrap();
        assert_eq!(rows, rows2, "sweep must be bit-reproducible");
    }

    #[test]
    fn moment_columns_describe_the_input_pmf() {
        let c = Constellation::square_qam(4).unwrap();
        let shaped = constellation::mb_pmf_lambda(&c, 0.8).unwrap();
        let (mu4, mu6) = constellation::moments_raw(&c, &shaped).unwrap();
        let entries = vec![PmfEntry::new("LIN_MB", shaped.clone())];
        let spec = SweepSpec {
            c: &c,
            cfg: tiny_cfg(5),
            link: tiny_link(),
            powers_dbm: &[10.0],
            entries: &entries,
        };
        let rows = run_sweep(&spec).unwrap();
        assert_eq!(rows[0].mu4, mu4);
        assert_eq!(rows[0].mu6, mu6);
        assert_eq!(rows[0].entropy_bits, shaped.entropy_bits());
    }

    #[test]
    fn quadratic_fit_recovers_an_exact_parabola_vertex() {
        let powers = [10.0, 11.0, 12.0, 13.0, 14.0];
        let snrs: Vec<f64> = powers
            .iter()
            .map(|&p: &f64| 20.0 - 0.4 * (p - 12.3).powi(2))
            .collect();
        let rows = synthetic_rows(&powers, &snrs);
        let fit = fit_p_opt(&rows).unwrap();
        assert!(fit.from_vertex);
        assert!((fit.p_opt_dbm - 12.3).abs() < 1e-9, "{}", fit.p_opt_dbm);
        assert!((fit.snr_at_opt_db - 20.0).abs() < 1e-9);
    }

    #[test]
    fn fit_rejects_a_peak_on_the_grid_edge() {
        let powers = [10.0, 11.0, 12.0];
        let rows = synthetic_rows(&powers, &[1.0, 2.0, 3.0]);
        match fit_p_opt(&rows) {
            Err(HarnessError::PeakNotBracketed { p_total_dbm }) => {
                assert_eq!(p_total_dbm, 12.0)
            }
            other => panic!("expected PeakNotBracketed, got {other:?}"),
        }
    }

    #[test]
    fn a_two_point_plateau_resolves_to_its_midpoint() {
        let powers = [10.0, 11.0, 12.0, 13.0];
        // Ties pick the later grid point, whose bracket [11, 12, 13] sees
        // the drop on the right; the symmetric data put the vertex at 11.5.
        let rows = synthetic_rows(&powers, &[1.0, 2.0, 2.0, 1.0]);
        let fit = fit_p_opt(&rows).unwrap();
        assert!(fit.from_vertex);
        assert!((fit.p_opt_dbm - 11.5).abs() < 1e-12, "{}", fit.p_opt_dbm);
    }

    #[test]
    fn csv_round_trip_is_lossless_and_schema_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        let rows = synthetic_rows(&[10.0, 11.0], &[17.123456789012345, 18.0]);
        write_rows_csv(&path, &rows).unwrap();
        let back = read_rows_csv(&path).unwrap();
        assert_eq!(rows, back);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "# other-schema v9\nmethod\n").unwrap();
        assert!(matches!(
            read_rows_csv(&bad),
            Err(HarnessError::CsvSchema { .. })
        ));
    }
}
