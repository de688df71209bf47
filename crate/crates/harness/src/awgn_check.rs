//! Quadrature AWGN cross-check: evaluates a labeled PMF set against the
//! per-SNR optimized Maxwell-Boltzmann envelope on a pure AWGN channel.
//!
//! This is the sanity layer under the fiber results. Two artifacts come out:
//!
//! * an MI-versus-SNR table (one column per PMF plus the `OPT_MB` envelope
//!   column), and
//! * a shaping-gap table at one reference SNR: for each PMF, the horizontal
//!   SNR distance `δ_SNR = s_ref − s_env(I_p(s_ref))` between the PMF's
//!   rate curve and the envelope, i.e. how many dB of SNR the envelope could
//!   give back at the rate the PMF actually achieves at `s_ref`.

use std::path::Path;

use fibershape_core::constellation::{self, Constellation};
use fibershape_core::metrics::{self, MbEnvelope};
use serde::{Deserialize, Serialize};

use crate::sweep::PmfEntry;
use crate::{HarnessError, Result};

/// Schema line of the MI-curve CSV.
pub const AWGN_MI_SCHEMA: &str = "# fibershape-awgn-mi v1";
/// Schema line of the shaping-gap CSV.
pub const AWGN_DELTA_SCHEMA: &str = "# fibershape-awgn-delta v1";
/// Column name of the Maxwell-Boltzmann envelope in the MI-curve CSV.
pub const ENVELOPE_TAG: &str = "OPT_MB";

/// Shaping-gap row for one PMF at the reference SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub method: String,
    pub mu4: f64,
    pub mu6: f64,
    pub entropy_bits: f64,
    /// AWGN MI of the PMF at the reference SNR, bits per 2D symbol.
    pub mi_at_ref_2d_bits: f64,
    /// SNR gap to the Maxwell-Boltzmann envelope at that rate, dB (≥ 0 up
    /// to bisection tolerance; 0 means the PMF is envelope-optimal there).
    pub delta_snr_db: f64,
}

/// Result of [`awgn_crosscheck`].
#[derive(Debug, Clone)]
pub struct AwgnReport {
    /// SNR grid of the MI table, dB.
    pub snr_grid_db: Vec<f64>,
    /// PMF column tags, in input order.
    pub tags: Vec<String>,
    /// Envelope MI per grid SNR.
    pub envelope_mi: Vec<f64>,
    /// MI per tag (outer) and grid SNR (inner).
    pub mi: Vec<Vec<f64>>,
    /// Reference SNR of the gap table, dB.
    pub ref_snr_db: f64,
    /// Gap table, one row per PMF in input order.
    pub deltas: Vec<DeltaRow>,
}

/// Evaluate MI curves and shaping gaps for a PMF set on AWGN.
pub fn awgn_crosscheck(
    c: &Constellation,
    entries: &[PmfEntry],
    snr_grid_db: &[f64],
    ref_snr_db: f64,
) -> Result<AwgnReport> {
    if entries.is_empty() {
        return Err(HarnessError::NoPmfs);
    }
    let mut env = MbEnvelope::new(c);
    let mut envelope_mi = Vec::with_capacity(snr_grid_db.len());
    for &s in snr_grid_db {
        envelope_mi.push(env.mi(s)?.0);
    }
    let mut mi = Vec::with_capacity(entries.len());
    for e in entries {
        let mut col = Vec::with_capacity(snr_grid_db.len());
        for &s in snr_grid_db {
            col.push(metrics::awgn_mi(c, &e.pmf, s)?);
        }
        mi.push(col);
    }
    let mut deltas = Vec::with_capacity(entries.len());
    // Deep into saturation, quadrature roundoff can leave an MI a few ULP
    // above the exact rate ceiling; clamp the inversion target into the
    // envelope's domain.
    let rate_cap = c.bits_per_symbol() as f64 - 1e-6;
    for e in entries {
        let (mu4, mu6) = constellation::moments_raw(c, &e.pmf)?;
        let mi_at_ref = metrics::awgn_mi(c, &e.pmf, ref_snr_db)?;
        let delta_snr_db = ref_snr_db - env.snr_needed(mi_at_ref.min(rate_cap))?;
        deltas.push(DeltaRow {
            method: e.tag.clone(),
            mu4,
            mu6,
            entropy_bits: e.pmf.entropy_bits(),
            mi_at_ref_2d_bits: mi_at_ref,
            delta_snr_db,
        });
    }
    Ok(AwgnReport {
        snr_grid_db: snr_grid_db.to_vec(),
        tags: entries.iter().map(|e| e.tag.clone()).collect(),
        envelope_mi,
        mi,
        ref_snr_db,
        deltas,
    })
}

/// Write the MI-curve table: `snr_db, OPT_MB, <tag>…` per grid point.
pub fn write_mi_csv(path: &Path, report: &AwgnReport) -> Result<()> {
    let csv_err = |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["snr_db".to_string(), ENVELOPE_TAG.to_string()];
    header.extend(report.tags.iter().cloned());
    wtr.write_record(&header).map_err(csv_err)?;
    for (k, &s) in report.snr_grid_db.iter().enumerate() {
        let mut rec = vec![format_f64(s), format_f64(report.envelope_mi[k])];
        for col in &report.mi {
            rec.push(format_f64(col[k]));
        }
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    let body = wtr.into_inner().expect("in-memory CSV writer cannot fail");
    write_with_schema(path, AWGN_MI_SCHEMA, &body)
}

/// Write the shaping-gap table.
pub fn write_delta_csv(path: &Path, report: &AwgnReport) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for row in &report.deltas {
        wtr.serialize(row).map_err(|source| HarnessError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    }
    let body = wtr.into_inner().expect("in-memory CSV writer cannot fail");
    write_with_schema(path, AWGN_DELTA_SCHEMA, &body)
}

/// Aligned text rendering of the gap table, for logs and the bundle summary.
pub fn delta_table_text(report: &AwgnReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "shaping gaps vs optimized-MB envelope at {:.3} dB reference SNR\n",
        report.ref_snr_db
    ));
    s.push_str(&format!(
        "{:<10} {:>8} {:>8} {:>9} {:>10} {:>10}\n",
        "method", "mu4", "mu6", "H_bits", "MI_2D", "dSNR_dB"
    ));
    for r in &report.deltas {
        s.push_str(&format!(
            "{:<10} {:>8.4} {:>8.4} {:>9.4} {:>10.4} {:>10.3}\n",
            r.method, r.mu4, r.mu6, r.entropy_bits, r.mi_at_ref_2d_bits, r.delta_snr_db
        ));
    }
    s
}

// Rust's `{}` for f64 is shortest-round-trip, matching what the serde-based
// CSV writers emit elsewhere.
fn format_f64(v: f64) -> String {
    format!("{v}")
}

fn write_with_schema(path: &Path, schema: &str, body: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(body.len() + schema.len() + 1);
    out.extend_from_slice(schema.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(body);
    std::fs::write(path, out).map_err(|source| HarnessError::Write {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use fibershape_core::constellation::{Constellation, Pmf};

    fn entries_16qam(c: &Constellation) -> Vec<PmfEntry> {
        vec![
            PmfEntry::uniform(16),
            PmfEntry::new("MB_A", constellation::mb_pmf_lambda(c, 0.4).unwrap()),
            PmfEntry::new("MB_B", constellation::mb_pmf_lambda(c, 1.1).unwrap()),
            PmfEntry::new(
                "RND",
                Pmf::from_weights((1..=16).map(|k| k as f64).collect())
                    .unwrap()
                    .symmetrized(c)
                    .unwrap(),
            ),
        ]
    }

    #[test]
    fn envelope_dominates_every_pmf_and_gaps_are_nonnegative() {
        let c = Constellation::square_qam(4).unwrap();
        let entries = entries_16qam(&c);
        let grid = [4.0, 8.0, 12.0, 16.0];
        let report = awgn_crosscheck(&c, &entries, &grid, 10.0).unwrap();
        for (k, &env) in report.envelope_mi.iter().enumerate() {
            for col in &report.mi {
                assert!(
                    env >= col[k] - 1e-9,
                    "envelope {env} below a member {} at {} dB",
                    col[k],
                    grid[k]
                );
            }
        }
        for r in &report.deltas {
            // Bisection tolerance can leave a hair of negative gap for a PMF
            // that *is* the envelope argmax at the reference SNR.
            assert!(r.delta_snr_db >= -2e-3, "{}: {}", r.method, r.delta_snr_db);
        }
        // Uniform is strictly suboptimal at mid SNR.
        let uni = report
            .deltas
            .iter()
            .find(|r| r.method == crate::sweep::UNIFORM_TAG)
            .unwrap();
        assert!(uni.delta_snr_db > 0.05, "{}", uni.delta_snr_db);
    }

    #[test]
    fn mi_columns_increase_with_snr() {
        let c = Constellation::square_qam(4).unwrap();
        let entries = entries_16qam(&c);
        let grid = [2.0, 6.0, 10.0, 14.0, 18.0];
        let report = awgn_crosscheck(&c, &entries, &grid, 10.0).unwrap();
        for col in std::iter::once(&report.envelope_mi).chain(report.mi.iter()) {
            for w in col.windows(2) {
                assert!(w[0] < w[1]);
            }
        }
    }

    #[test]
    fn csv_files_carry_schema_and_columns() {
        let c = Constellation::square_qam(4).unwrap();
        let entries = entries_16qam(&c);
        let report = awgn_crosscheck(&c, &entries, &[8.0, 12.0], 10.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mi_path = dir.path().join("mi.csv");
        let delta_path = dir.path().join("delta.csv");
        write_mi_csv(&mi_path, &report).unwrap();
        write_delta_csv(&delta_path, &report).unwrap();

        let mi_text = std::fs::read_to_string(&mi_path).unwrap();
        let mut lines = mi_text.lines();
        assert_eq!(lines.next().unwrap(), AWGN_MI_SCHEMA);
        assert_eq!(
            lines.next().unwrap(),
            "snr_db,OPT_MB,UNIFORM,MB_A,MB_B,RND"
        );
        assert_eq!(lines.count(), 2);

        let delta_text = std::fs::read_to_string(&delta_path).unwrap();
        assert!(delta_text.starts_with(AWGN_DELTA_SCHEMA));
        assert!(delta_text.contains("delta_snr_db"));

        let table = delta_table_text(&report);
        assert!(table.contains("UNIFORM"));
        assert!(table.contains("dSNR_dB"));
    }
}
