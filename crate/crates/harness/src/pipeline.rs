//! The end-to-end shaping study for one scenario, emitted as a file bundle.
//!
//! Stages, in order:
//!
//! 1. **uniform-sweep** — sweep the uniform input over the scenario's
//!    launch-power grid; locate the optimal total launch power `P_opt` by
//!    quadratic fit.
//! 2. **operating-point** — one dedicated run at `P_opt` to measure the
//!    reference effective SNR `s_ref` of the unshaped system.
//! 3. **lin-mb** — Maxwell-Boltzmann shaping against linear AWGN at `s_ref`
//!    (the classic linear-design baseline).
//! 4. **calibrate** — probe the link with moment-diverse PMFs around
//!    `P_opt` and fit the χ block of the modulation-dependent NLI model.
//! 5. **egn-optimize** — Maxwell-Boltzmann and full-2D PMF optimization
//!    against the fitted model at the fixed per-channel power `P_opt/N`.
//! 6. **ssfm-ba** (optional) — simulation-in-the-loop shaping at `P_opt`.
//! 7. **final-sweep** — all candidate PMFs over the grid plus `P_opt`
//!    itself, under common random numbers.
//! 8. **report** — AWGN cross-check, per-method summary table, and the
//!    headline gain comparison.
//!
//! Every artifact is written as soon as its stage completes, so a failed
//! stage leaves a usable partial bundle behind. All randomness derives from
//! the scenario seed; rerunning a pipeline reproduces the bundle byte for
//! byte.

use std::path::{Path, PathBuf};
use std::time::Instant;

use fibershape_core::constellation::{self, Constellation, Pmf};
use fibershape_core::egn::{self, CalibrationSample, EgnCoefficients, LinkConfig};
use fibershape_core::optimize::{self, LaunchPolicy, OptimizerReport};
use fibershape_core::rng::derive_seed;
use fibershape_core::ssfm::SignalConfig;
use fibershape_core::units::dbm_to_watt;
use serde::{Deserialize, Serialize};

use crate::awgn_check::{self, AwgnReport};
use crate::scenario::Scenario;
use crate::sweep::{
    self, fit_p_opt, run_sweep, simulate_cell, PmfEntry, PowerFit, ResultRow, SweepSpec,
    UNIFORM_TAG,
};
use crate::{HarnessError, Result};

/// Schema line of the calibration-sample CSV.
pub const CAL_SCHEMA: &str = "# fibershape-calibration v1";

/// Calibration probe powers relative to the fitted optimum, dB. The model's
/// κ is power-independent, so sampling at and *above* the optimum — where
/// the NLI stands well clear of the ASE floor — costs no generality and
/// buys a much better-conditioned κ observation (below the optimum the
/// extracted NLI is a small difference of noisy numbers).
pub const CAL_POWER_OFFSETS_DB: [f64; 3] = [0.0, 2.0, 4.0];

/// Options for [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    /// Bundle directory (created if missing).
    pub out_dir: PathBuf,
    /// Override the scenario's simulation-in-the-loop switch.
    pub ssfm_ba: Option<bool>,
    /// Override the scenario seed.
    pub seed: Option<u64>,
}

/// One probe observation of the calibration stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalRow {
    pub probe: String,
    pub p_total_dbm: f64,
    pub p_ch_w: f64,
    pub mu4: f64,
    pub mu6: f64,
    pub snr_eff_db: f64,
}

/// Per-method line of the final summary table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mu4: f64,
    pub mu6: f64,
    pub entropy_bits: f64,
    /// AWGN shaping gap versus the optimized-MB envelope at `s_ref`, dB.
    pub delta_snr_db: f64,
    /// Measured effective SNR at the uniform-optimal launch power, dB.
    pub snr_at_popt_db: f64,
    /// Measured AIR at that power, bits per 4D symbol.
    pub air_4d_at_popt_bits: f64,
    /// AIR advantage over the uniform input at that power, bits per 4D.
    pub gain_4d_bits: f64,
}

/// Everything [`run_pipeline`] produces (all of it is also on disk).
#[derive(Debug)]
pub struct PipelineOutcome {
    pub out_dir: PathBuf,
    pub scenario_name: String,
    pub seed: u64,
    /// Fitted optimal total launch power of the uniform input, dBm.
    pub p_opt: PowerFit,
    /// Reference effective SNR at `P_opt`, dB.
    pub ref_snr_db: f64,
    /// Fitted NLI model.
    pub chi: EgnCoefficients,
    /// The candidate set that was swept (uniform first).
    pub entries: Vec<PmfEntry>,
    /// Optimizer reports by method tag.
    pub reports: Vec<(String, OptimizerReport)>,
    /// Final comparative sweep rows.
    pub rows_final: Vec<ResultRow>,
    /// AWGN cross-check of the candidate set.
    pub awgn: AwgnReport,
    /// Per-method summary, ordered by increasing μ̂4.
    pub summaries: Vec<MethodSummary>,
    /// `(gain_EGN_2D − gain_LIN_MB) / gain_LIN_MB` at `P_opt`, when both
    /// methods are present and the baseline gain is meaningfully positive.
    pub relative_gain_vs_linmb: Option<f64>,
}

fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|source| HarnessError::Stage {
        stage: name,
        source: Box::new(source),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| HarnessError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// `"LIN_MB"` → `"lin-mb"` for file names.
pub fn file_slug(tag: &str) -> String {
    tag.to_ascii_lowercase().replace('_', "-")
}

/// The moment-diverse probe set used to calibrate the χ block.
///
/// The regression features are `[1, u, u², μ̂6]` with `u = μ̂4 − 2`, and all
/// Maxwell-Boltzmann members lie on one curve in the `(μ̂4, μ̂6)` plane — a
/// probe set drawn from that family alone leaves the fit nearly rank-3 and
/// lets noise explode along the unconstrained direction. This set therefore
/// brackets the uniform point from three directions: MB tilts (μ̂4 up along
/// the MB curve), a mid-ring ensemble (μ̂4 down, toward constant modulus),
/// and a barbell ensemble (μ̂4 up but *below* the MB μ̂6 curve).
pub fn calibration_probes(c: &Constellation) -> Result<Vec<PmfEntry>> {
    Ok(vec![
        PmfEntry::uniform(c.len()),
        PmfEntry::new("MB_LIGHT", constellation::mb_pmf_lambda(c, 0.35)?),
        PmfEntry::new("MB_HEAVY", constellation::mb_pmf_lambda(c, 0.9)?),
        PmfEntry::new("RING", ring_pmf(c, 3.0, 0.8)?),
        PmfEntry::new("BARBELL", barbell_pmf(c)?),
    ])
}

/// Quadrant-symmetric ensemble concentrated on a mid-energy ring:
/// `w_i ∝ exp(−β(ê_i − r)²)` with `ê` the point energies scaled so the
/// uniform ensemble has unit mean energy. Pushing mass toward one modulus
/// ring drives μ̂4 *below* the uniform value — the opposite direction from
/// every Maxwell-Boltzmann member.
pub fn ring_pmf(c: &Constellation, beta: f64, ring_energy: f64) -> Result<Pmf> {
    let uniform = Pmf::uniform(c.len());
    let mean_energy = c.energy(&uniform)?;
    let weights: Vec<f64> = c
        .energies()
        .iter()
        .map(|&e| {
            let ehat = e / mean_energy;
            (-beta * (ehat - ring_energy).powi(2)).exp()
        })
        .collect();
    Ok(Pmf::from_weights(weights)?)
}

/// Quadrant-symmetric ensemble with half the mass spread over the
/// lowest-energy quarter of the points (by whole orbits) and half over the
/// highest-energy quarter. The resulting μ̂4 sits above the uniform value
/// while μ̂6 stays *below* the Maxwell-Boltzmann member of equal μ̂4, which
/// is exactly the off-curve leverage the χ regression needs.
pub fn barbell_pmf(c: &Constellation) -> Result<Pmf> {
    let energies = c.energies();
    let mut orbits = c.quadrant_orbits();
    orbits.sort_by(|a, b| energies[a[0]].total_cmp(&energies[b[0]]));
    let quarter_points = c.len() / 4;
    let mut weights = vec![0.0; c.len()];
    let mut assign = |orbit_list: &[[usize; 4]]| {
        let mut taken = 0usize;
        let mut members: Vec<usize> = Vec::new();
        for orbit in orbit_list {
            if taken >= quarter_points {
                break;
            }
            members.extend_from_slice(orbit);
            taken += orbit.len();
        }
        let w = 0.5 / members.len() as f64;
        for i in members {
            weights[i] += w;
        }
    };
    assign(&orbits);
    let top: Vec<[usize; 4]> = orbits.iter().rev().copied().collect();
    assign(&top);
    Ok(Pmf::from_weights(weights)?)
}

/// Simulate the probe grid and fit the χ block.
///
/// Each (probe, power) cell runs with an independent ASE stream (lane =
/// cell index), so fit residuals reflect genuine Monte-Carlo scatter rather
/// than shared noise.
pub fn run_calibration(
    c: &Constellation,
    cfg: &SignalConfig,
    link: &LinkConfig,
    probes: &[PmfEntry],
    powers_dbm: &[f64],
) -> Result<(EgnCoefficients, Vec<CalRow>)> {
    if probes.is_empty() {
        return Err(HarnessError::NoPmfs);
    }
    if powers_dbm.is_empty() {
        return Err(HarnessError::EmptyPowerGrid);
    }
    let n_wdm = cfg.n_wdm as f64;
    let mut rows = Vec::with_capacity(probes.len() * powers_dbm.len());
    for (pi, probe) in probes.iter().enumerate() {
        let (mu4, mu6) = constellation::moments_raw(c, &probe.pmf)?;
        for (ki, &p_dbm) in powers_dbm.iter().enumerate() {
            let lane = (pi * powers_dbm.len() + ki) as u64;
            let noise_seed = derive_seed(cfg.seed, "cal-ase", lane);
            let outcome = simulate_cell(c, cfg, link, &probe.pmf, p_dbm, noise_seed).map_err(
                |source| HarnessError::SweepCell {
                    method: probe.tag.clone(),
                    p_total_dbm: p_dbm,
                    source: Box::new(source),
                },
            )?;
            rows.push(CalRow {
                probe: probe.tag.clone(),
                p_total_dbm: p_dbm,
                p_ch_w: dbm_to_watt(p_dbm) / n_wdm,
                mu4,
                mu6,
                snr_eff_db: outcome.snr_eff_db,
            });
        }
    }
    let samples: Vec<CalibrationSample> = rows
        .iter()
        .map(|r| CalibrationSample {
            p_ch_w: r.p_ch_w,
            mu4: r.mu4,
            mu6: r.mu6,
            snr_db: r.snr_eff_db,
        })
        .collect();
    let ase_var = egn::ase_variance(link, cfg.symbol_rate);
    let chi = egn::calibrate_chi(&samples, ase_var)?;
    Ok((chi, rows))
}

/// Write calibration rows as CSV with the [`CAL_SCHEMA`] line.
pub fn write_cal_csv(path: &Path, rows: &[CalRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for row in rows {
        wtr.serialize(row).map_err(|source| HarnessError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    }
    let body = wtr.into_inner().expect("in-memory CSV writer cannot fail");
    let mut out = Vec::with_capacity(body.len() + CAL_SCHEMA.len() + 1);
    out.extend_from_slice(CAL_SCHEMA.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&body);
    std::fs::write(path, out).map_err(|source| HarnessError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Insert `p` into a sorted power list unless a grid point within 1e-6 dB
/// already covers it.
fn insert_power(powers: &mut Vec<f64>, p: f64) {
    if powers.iter().any(|&g| (g - p).abs() < 1e-6) {
        return;
    }
    powers.push(p);
    powers.sort_by(f64::total_cmp);
}

fn write_report_files(
    out_dir: &Path,
    c: &Constellation,
    report: &OptimizerReport,
    wall_time_s: f64,
) -> Result<()> {
    let slug = file_slug(report.method.tag());
    let pmf_name = format!("pmf-{slug}.txt");
    constellation::write_pmf(&out_dir.join(&pmf_name), c, &report.pmf)?;
    write_text(
        &out_dir.join(format!("report-{slug}.toml")),
        &report.summary_text(&pmf_name, wall_time_s),
    )
}

#[derive(Serialize)]
struct OperatingPointDoc {
    p_opt_total_dbm: f64,
    p_opt_from_vertex: bool,
    snr_fit_db: f64,
    ref_snr_db: f64,
    ref_air_2d_bits: f64,
}

#[derive(Serialize)]
struct SummaryDoc<'a> {
    scenario: &'a str,
    modulation: &'a str,
    seed: u64,
    p_opt_total_dbm: f64,
    ref_snr_db: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    relative_gain_egn2d_vs_linmb: Option<f64>,
    chi: &'a EgnCoefficients,
    methods: &'a [MethodSummary],
}

/// Render the human-readable summary table.
pub fn summary_text(
    scenario: &Scenario,
    seed: u64,
    p_opt: &PowerFit,
    ref_snr_db: f64,
    chi: &EgnCoefficients,
    summaries: &[MethodSummary],
    relative_gain: Option<f64>,
) -> String {
    let mut s = String::new();
    s.push_str(&format!("scenario {} (seed {seed})\n", scenario.name));
    s.push_str(&format!(
        "optimal total launch power {:.2} dBm ({}), reference SNR {:.3} dB\n",
        p_opt.p_opt_dbm,
        if p_opt.from_vertex {
            "quadratic fit"
        } else {
            "best grid point"
        },
        ref_snr_db,
    ));
    s.push_str(&format!(
        "chi block: chi0={:.4e} chi4={:.4e} chi4p={:.4e} chi6={:.4e} (1/W^2), ase={:.4e} W",
        chi.chi0, chi.chi4, chi.chi4p, chi.chi6, chi.ase_var
    ));
    if let Some(r) = chi.fit_residual_db {
        s.push_str(&format!(", fit residual {r:.3} dB RMS"));
    }
    s.push('\n');
    s.push('\n');
    s.push_str(&format!(
        "{:<10} {:>8} {:>8} {:>8} {:>9} {:>10} {:>11} {:>9}\n",
        "method", "mu4", "mu6", "H_bits", "dSNR_dB", "SNR@Popt", "AIR4D@Popt", "gain4D"
    ));
    for m in summaries {
        let gain = if m.method == UNIFORM_TAG {
            "--".to_string()
        } else {
            format!("{:+.3}", m.gain_4d_bits)
        };
        s.push_str(&format!(
            "{:<10} {:>8.4} {:>8.4} {:>8.4} {:>9.3} {:>10.3} {:>11.3} {:>9}\n",
            m.method,
            m.mu4,
            m.mu6,
            m.entropy_bits,
            m.delta_snr_db,
            m.snr_at_popt_db,
            m.air_4d_at_popt_bits,
            gain
        ));
    }
    if let Some(r) = relative_gain {
        s.push_str(&format!(
            "\n2D optimization vs linear-MB baseline: {:+.1}% relative gain at P_opt\n",
            100.0 * r
        ));
    }
    s
}

/// Run the full study for one scenario. See the module docs for the stage
/// list; every stage's artifacts are on disk before the next stage starts.
pub fn run_pipeline(scenario: &Scenario, opts: &PipelineOptions) -> Result<PipelineOutcome> {
    let out_dir = opts.out_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(|source| HarnessError::Write {
        path: out_dir.clone(),
        source,
    })?;
    let seed = opts.seed.unwrap_or(scenario.seed);
    let with_ba = opts.ssfm_ba.unwrap_or(scenario.optimize.ssfm_ba);
    let c = scenario.constellation()?;
    let cfg = scenario.signal_config(seed);
    let link = scenario.link;

    // The effective configuration this bundle was produced under.
    let mut effective = scenario.clone();
    effective.seed = seed;
    effective.optimize.ssfm_ba = with_ba;
    write_text(&out_dir.join("scenario.toml"), &effective.to_toml_string())?;

    // Stage 1: uniform sweep over the scenario grid.
    let powers = scenario.sweep.powers_dbm();
    let uniform_entry = vec![PmfEntry::uniform(c.len())];
    let rows_uniform = stage("uniform-sweep", || {
        let spec = SweepSpec {
            c: &c,
            cfg,
            link,
            powers_dbm: &powers,
            entries: &uniform_entry,
        };
        let rows = run_sweep(&spec)?;
        sweep::write_rows_csv(&out_dir.join("sweep-uniform.csv"), &rows)?;
        Ok(rows)
    })?;

    // Stage 2: optimal launch power and the reference operating point.
    let (p_opt, ref_snr_db) = stage("operating-point", || {
        let fit = fit_p_opt(&rows_uniform)?;
        let cell = simulate_cell(
            &c,
            &cfg,
            &link,
            &uniform_entry[0].pmf,
            fit.p_opt_dbm,
            derive_seed(seed, "ref-ase", 0),
        )?;
        let doc = OperatingPointDoc {
            p_opt_total_dbm: fit.p_opt_dbm,
            p_opt_from_vertex: fit.from_vertex,
            snr_fit_db: fit.snr_at_opt_db,
            ref_snr_db: cell.snr_eff_db,
            ref_air_2d_bits: cell.air_2d_bits,
        };
        write_text(
            &out_dir.join("operating-point.toml"),
            &toml::to_string_pretty(&doc).expect("plain struct serializes"),
        )?;
        Ok((fit, cell.snr_eff_db))
    })?;

    let mut reports: Vec<(String, OptimizerReport)> = Vec::new();

    // Stage 3: linear-AWGN Maxwell-Boltzmann baseline at the reference SNR.
    stage("lin-mb", || {
        let t0 = Instant::now();
        let report = optimize::lin_mb(&c, ref_snr_db)?;
        write_report_files(&out_dir, &c, &report, t0.elapsed().as_secs_f64())?;
        reports.push((report.method.tag().to_string(), report));
        Ok(())
    })?;

    // Stage 4: χ-block calibration around P_opt.
    let chi = stage("calibrate", || {
        let probes = calibration_probes(&c)?;
        let cal_powers: Vec<f64> = CAL_POWER_OFFSETS_DB
            .iter()
            .map(|d| p_opt.p_opt_dbm + d)
            .collect();
        let (chi, cal_rows) = run_calibration(&c, &cfg, &link, &probes, &cal_powers)?;
        write_cal_csv(&out_dir.join("calibration.csv"), &cal_rows)?;
        write_text(&out_dir.join("chi.toml"), &chi.to_toml_string()?)?;
        Ok(chi)
    })?;

    // Stage 5: model-based optimization at the fixed per-channel power.
    let p_opt_total_w = dbm_to_watt(p_opt.p_opt_dbm);
    let p_ch_w = p_opt_total_w / scenario.signal.n_wdm as f64;
    stage("egn-optimize", || {
        let policy = LaunchPolicy::FixedPerChannel(p_ch_w);
        type Optimizer = fn(
            &Constellation,
            &EgnCoefficients,
            LaunchPolicy,
        )
            -> std::result::Result<OptimizerReport, optimize::OptimizeError>;
        for run in [optimize::egn_mb as Optimizer, optimize::egn_2d as Optimizer] {
            let t0 = Instant::now();
            let report = run(&c, &chi, policy)?;
            write_report_files(&out_dir, &c, &report, t0.elapsed().as_secs_f64())?;
            reports.push((report.method.tag().to_string(), report));
        }
        Ok(())
    })?;

    // Stage 6: optional simulation-in-the-loop shaping at P_opt.
    if with_ba {
        stage("ssfm-ba", || {
            let mut cfg_ba = cfg;
            if let Some(n) = scenario.optimize.ba_n_symbols {
                cfg_ba.n_sym = n;
            }
            let t0 = Instant::now();
            let report = optimize::ssfm_ba(&c, &cfg_ba, &link, p_opt_total_w)?;
            write_report_files(&out_dir, &c, &report, t0.elapsed().as_secs_f64())?;
            reports.push((report.method.tag().to_string(), report));
            Ok(())
        })?;
    }

    // Stage 7: comparative sweep of every candidate, P_opt included.
    let mut entries = vec![PmfEntry::uniform(c.len())];
    for (tag, report) in &reports {
        entries.push(PmfEntry::new(tag.clone(), report.pmf.clone()));
    }
    let rows_final = stage("final-sweep", || {
        let mut powers_final = powers.clone();
        insert_power(&mut powers_final, p_opt.p_opt_dbm);
        let spec = SweepSpec {
            c: &c,
            cfg,
            link,
            powers_dbm: &powers_final,
            entries: &entries,
        };
        let rows = run_sweep(&spec)?;
        sweep::write_rows_csv(&out_dir.join("sweep-final.csv"), &rows)?;
        Ok(rows)
    })?;

    // Stage 8: AWGN cross-check and summary.
    let (awgn, summaries, relative_gain) = stage("report", || {
        let lo = (ref_snr_db - 12.0).max(0.0).floor();
        let hi = (ref_snr_db + 6.0).ceil();
        let mut grid = Vec::new();
        let mut s = lo;
        while s <= hi + 1e-9 {
            grid.push(s);
            s += 1.0;
        }
        let awgn = awgn_check::awgn_crosscheck(&c, &entries, &grid, ref_snr_db)?;
        awgn_check::write_mi_csv(&out_dir.join("awgn-mi.csv"), &awgn)?;
        awgn_check::write_delta_csv(&out_dir.join("awgn-delta.csv"), &awgn)?;

        // Comparison rows at P_opt exist exactly: P_opt was inserted into
        // the final power list (or coincides with a grid point).
        let at_popt = |tag: &str| -> Result<&ResultRow> {
            rows_final
                .iter()
                .filter(|r| r.method == tag)
                .min_by(|a, b| {
                    (a.p_total_dbm - p_opt.p_opt_dbm)
                        .abs()
                        .total_cmp(&(b.p_total_dbm - p_opt.p_opt_dbm).abs())
                })
                .ok_or(HarnessError::TooFewRows {
                    what: "the summary table",
                    need: 1,
                    got: 0,
                })
        };
        let uniform_row = at_popt(UNIFORM_TAG)?;
        let mut summaries = Vec::new();
        for (k, entry) in entries.iter().enumerate() {
            let row = at_popt(&entry.tag)?;
            let delta = &awgn.deltas[k];
            summaries.push(MethodSummary {
                method: entry.tag.clone(),
                mu4: delta.mu4,
                mu6: delta.mu6,
                entropy_bits: delta.entropy_bits,
                delta_snr_db: delta.delta_snr_db,
                snr_at_popt_db: row.snr_eff_db,
                air_4d_at_popt_bits: row.air_4d_bits,
                gain_4d_bits: row.air_4d_bits - uniform_row.air_4d_bits,
            });
        }
        summaries.sort_by(|a, b| a.mu4.total_cmp(&b.mu4));
        let gain_of = |tag: &str| {
            summaries
                .iter()
                .find(|m| m.method == tag)
                .map(|m| m.gain_4d_bits)
        };
        let relative_gain = match (gain_of("EGN_2D"), gain_of("LIN_MB")) {
            (Some(g2), Some(gl)) if gl > 1e-6 => Some((g2 - gl) / gl),
            _ => None,
        };

        let doc = SummaryDoc {
            scenario: &scenario.name,
            modulation: &scenario.modulation,
            seed,
            p_opt_total_dbm: p_opt.p_opt_dbm,
            ref_snr_db,
            relative_gain_egn2d_vs_linmb: relative_gain,
            chi: &chi,
            methods: &summaries,
        };
        write_text(
            &out_dir.join("summary.toml"),
            &toml::to_string_pretty(&doc).expect("plain struct serializes"),
        )?;
        write_text(
            &out_dir.join("summary.txt"),
            &summary_text(
                scenario,
                seed,
                &p_opt,
                ref_snr_db,
                &chi,
                &summaries,
                relative_gain,
            ),
        )?;
        Ok((awgn, summaries, relative_gain))
    })?;

    Ok(PipelineOutcome {
        out_dir,
        scenario_name: scenario.name.clone(),
        seed,
        p_opt,
        ref_snr_db,
        chi,
        entries,
        reports,
        rows_final,
        awgn,
        summaries,
        relative_gain_vs_linmb: relative_gain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scenario() -> Scenario {
        toml::from_str(
            r#"
name = "tiny-16qam"
modulation = "16QAM"
seed = 13

[signal]
symbol_rate = 10e9
rolloff = 0.5
n_wdm = 3
wdm_spacing = 25e9
n_symbols = 512
rrc_span = 16
oversampling = 8

[link]
gamma = 1.3
dispersion = 17.0
alpha = 0.2
noise_figure = 5.0
wavelength = 1.55e-6
n_span = 1
span_length = 40.0
step_size = 2.0

[sweep]
start_dbm = -6.0
stop_dbm = 6.0
step_db = 3.0

[optimize]
ssfm_ba = true
ba_n_symbols = 512
"#,
        )
        .unwrap()
    }

    #[test]
    fn calibration_probes_are_symmetric_and_moment_diverse() {
        let c = Constellation::square_qam(4).unwrap();
        let probes = calibration_probes(&c).unwrap();
        assert_eq!(probes.len(), 5);
        let mut mu4s = Vec::new();
        for p in &probes {
            assert!(p.pmf.is_quadrant_symmetric(&c), "{} not symmetric", p.tag);
            let (mu4, _) = constellation::moments_raw(&c, &p.pmf).unwrap();
            mu4s.push(mu4);
        }
        let uniform_mu4 = mu4s[0];
        // MB tilts push μ̂4 above uniform, the ring pushes it below, and the
        // barbell pushes it above as well but off the MB μ̂6 curve.
        assert!(mu4s[1] > uniform_mu4 + 0.01);
        assert!(mu4s[2] > mu4s[1] + 0.01);
        assert!(mu4s[3] < uniform_mu4 - 0.01);
        assert!(mu4s[4] > uniform_mu4 + 0.1);
    }

    #[test]
    fn barbell_moments_for_16qam_match_the_closed_form() {
        // Half the mass on the inner orbit (ê = 0.2), half on the outer
        // (ê = 1.8): E[ê] = 1 exactly, so μ̂4 = (0.04 + 3.24)/2 = 1.64 and
        // μ̂6 = (0.008 + 5.832)/2 = 2.92.
        let c = Constellation::square_qam(4).unwrap();
        let p = barbell_pmf(&c).unwrap();
        let (mu4, mu6) = constellation::moments_raw(&c, &p).unwrap();
        assert!((mu4 - 1.64).abs() < 1e-12, "{mu4}");
        assert!((mu6 - 2.92).abs() < 1e-12, "{mu6}");
        let mb_at_same_mu4 = 3.35; // MB members near μ̂4 = 1.64 sit well above
        assert!(mu6 < mb_at_same_mu4 - 0.3);
    }

    #[test]
    fn file_slugs_are_kebab_case() {
        assert_eq!(file_slug("LIN_MB"), "lin-mb");
        assert_eq!(file_slug("SSFM_BA"), "ssfm-ba");
        assert_eq!(file_slug("UNIFORM"), "uniform");
    }

    #[test]
    fn insert_power_deduplicates_via_tolerance() {
        let mut powers = vec![10.0, 11.0, 12.0];
        insert_power(&mut powers, 11.0 + 1e-9);
        assert_eq!(powers.len(), 3);
        insert_power(&mut powers, 11.4);
        assert_eq!(powers, vec![10.0, 11.0, 11.4, 12.0]);
    }

    #[test]
    fn pipeline_produces_a_complete_reproducible_bundle() {
        let scenario = tiny_scenario();
        let dir = tempfile::tempdir().unwrap();
        let opts = PipelineOptions {
            out_dir: dir.path().join("run-a"),
            ssfm_ba: None,
            seed: None,
        };
        let outcome = run_pipeline(&scenario, &opts).unwrap();

        for name in [
            "scenario.toml",
            "sweep-uniform.csv",
            "operating-point.toml",
            "pmf-lin-mb.txt",
            "report-lin-mb.toml",
            "calibration.csv",
            "chi.toml",
            "pmf-egn-mb.txt",
            "report-egn-mb.toml",
            "pmf-egn-2d.txt",
            "report-egn-2d.toml",
            "pmf-ssfm-ba.txt",
            "report-ssfm-ba.toml",
            "sweep-final.csv",
            "awgn-mi.csv",
            "awgn-delta.csv",
            "summary.toml",
            "summary.txt",
        ] {
            assert!(
                outcome.out_dir.join(name).is_file(),
                "bundle is missing {name}"
            );
        }

        assert_eq!(outcome.entries.len(), 5, "uniform + four methods");
        assert_eq!(outcome.summaries.len(), 5);
        assert!(outcome.ref_snr_db.is_finite());
        assert!(outcome.chi.kappa(1.32, 1.96) > 0.0);
        // Every method has a row exactly at the fitted optimum.
        for e in &outcome.entries {
            assert!(
                outcome
                    .rows_final
                    .iter()
                    .any(|r| r.method == e.tag
                        && (r.p_total_dbm - outcome.p_opt.p_opt_dbm).abs() < 1e-6),
                "{} has no row at P_opt",
                e.tag
            );
        }
        // The uniform summary line has zero gain by construction.
        let uni = outcome
            .summaries
            .iter()
            .find(|m| m.method == UNIFORM_TAG)
            .unwrap();
        assert_eq!(uni.gain_4d_bits, 0.0);

        // Rerunning the identical pipeline reproduces the bundle bytes.
        let opts_b = PipelineOptions {
            out_dir: dir.path().join("run-b"),
            ssfm_ba: None,
            seed: None,
        };
        let outcome_b = run_pipeline(&scenario, &opts_b).unwrap();
        assert_eq!(outcome.rows_final, outcome_b.rows_final);
        for name in ["summary.toml", "sweep-final.csv", "chi.toml"] {
            let a = std::fs::read(outcome.out_dir.join(name)).unwrap();
            let b = std::fs::read(outcome_b.out_dir.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical reruns");
        }
    }
}
