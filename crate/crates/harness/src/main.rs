//! `fibershape` — command-line front end of the experiment harness.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fibershape_core::constellation::{self, Constellation, Pmf};
use fibershape_core::optimize::{self, LaunchPolicy};
use fibershape_core::units::dbm_to_watt;
use fibershape_core::{egn, metrics, ssfm};
use fibershape_harness::pipeline::{self, PipelineOptions};
use fibershape_harness::scenario::{parse_modulation, Scenario};
use fibershape_harness::sweep::{self, PmfEntry, SweepSpec};
use fibershape_harness::{awgn_check, HarnessError};

#[derive(Parser)]
#[command(
    name = "fibershape",
    version,
    about = "Probabilistic-shaping studies over nonlinear WDM fiber links",
    propagate_version = true
)]
struct Cli {
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads for parallel sweep cells (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one PMF optimizer and write its pmf/report file pair.
    Optimize(OptimizeArgs),
    /// Probe the link with moment-diverse PMFs and fit the chi block.
    Calibrate(CalibrateArgs),
    /// Launch-power sweep of the uniform input plus any PMF files.
    Sweep(SweepArgs),
    /// The full study: sweep, calibrate, optimize, compare, summarize.
    Pipeline(PipelineArgs),
    /// AWGN MI curves and shaping gaps of PMF files vs the MB envelope.
    AwgnCheck(AwgnCheckArgs),
    /// Back-to-back transceiver run over a noise-loading grid.
    B2b(B2bArgs),
}

#[derive(Args)]
struct OptimizeArgs {
    /// Scenario file.
    #[arg(long)]
    config: PathBuf,
    #[command(subcommand)]
    method: MethodCmd,
}

#[derive(Subcommand)]
enum MethodCmd {
    /// Maxwell-Boltzmann family against linear AWGN at a fixed SNR.
    LinMb {
        /// Design SNR, dB.
        #[arg(long)]
        snr_db: f64,
    },
    /// Maxwell-Boltzmann family against a calibrated EGN model.
    EgnMb {
        /// chi block file (from `calibrate` or a pipeline bundle).
        #[arg(long)]
        chi: PathBuf,
        /// Score candidates at this fixed per-channel power (dBm);
        /// omit to score each candidate at its own optimal power.
        #[arg(long)]
        p_ch_dbm: Option<f64>,
    },
    /// Full 2D PMF against a calibrated EGN model.
    Egn2d {
        /// chi block file (from `calibrate` or a pipeline bundle).
        #[arg(long)]
        chi: PathBuf,
        /// Score candidates at this fixed per-channel power (dBm);
        /// omit to score each candidate at its own optimal power.
        #[arg(long)]
        p_ch_dbm: Option<f64>,
    },
    /// Simulation-in-the-loop shaping at a fixed total launch power.
    SsfmBa {
        /// Total launch power across all channels, dBm.
        #[arg(long)]
        p_total_dbm: f64,
        /// Symbols per channel for the in-loop simulations
        /// (default: the scenario's n_symbols).
        #[arg(long)]
        n_symbols: Option<usize>,
    },
}

#[derive(Args)]
struct CalibrateArgs {
    /// Scenario file.
    #[arg(long)]
    config: PathBuf,
    /// Probe powers as a comma-separated dBm list (default: the midpoint of
    /// the scenario sweep grid, -1.5/+0/+1.5 dB around it).
    #[arg(long, value_delimiter = ',')]
    powers_dbm: Vec<f64>,
}

#[derive(Args)]
struct SweepArgs {
    /// Scenario file.
    #[arg(long)]
    config: PathBuf,
    /// PMF files to sweep next to the uniform baseline.
    #[arg(long = "pmf")]
    pmfs: Vec<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Scenario file.
    #[arg(long)]
    config: PathBuf,
    /// Override the scenario's [optimize] ssfm_ba switch.
    #[arg(long)]
    ssfm_ba: Option<bool>,
}

#[derive(Args)]
struct AwgnCheckArgs {
    /// Square-QAM modulation, e.g. 64QAM.
    #[arg(long)]
    modulation: String,
    /// PMF files to evaluate next to the uniform baseline.
    #[arg(long = "pmf")]
    pmfs: Vec<PathBuf>,
    /// Reference SNR for the shaping-gap table, dB.
    #[arg(long)]
    ref_snr_db: f64,
    /// SNR grid start, dB.
    #[arg(long, default_value_t = 0.0)]
    snr_start_db: f64,
    /// SNR grid stop, dB.
    #[arg(long, default_value_t = 25.0)]
    snr_stop_db: f64,
    /// SNR grid step, dB.
    #[arg(long, default_value_t = 1.0)]
    snr_step_db: f64,
}

#[derive(Args)]
struct B2bArgs {
    /// Scenario file (modulation and symbol count are taken from it).
    #[arg(long)]
    config: PathBuf,
    /// PMF file (default: uniform).
    #[arg(long)]
    pmf: Option<PathBuf>,
    /// Transceiver SNR ceiling, dB (omit for an ideal transceiver).
    #[arg(long)]
    snr_trx_db: Option<f64>,
    /// Noise-loading grid start, dB.
    #[arg(long, default_value_t = 5.0)]
    snr_load_start_db: f64,
    /// Noise-loading grid stop, dB.
    #[arg(long, default_value_t = 30.0)]
    snr_load_stop_db: f64,
    /// Noise-loading grid step, dB.
    #[arg(long, default_value_t = 1.0)]
    snr_load_step_db: f64,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    std::fs::create_dir_all(&cli.out_dir)
        .with_context(|| format!("creating output directory {}", cli.out_dir.display()))?;
    match &cli.command {
        Command::Optimize(args) => cmd_optimize(&cli, args),
        Command::Calibrate(args) => cmd_calibrate(&cli, args),
        Command::Sweep(args) => cmd_sweep(&cli, args),
        Command::Pipeline(args) => cmd_pipeline(&cli, args),
        Command::AwgnCheck(args) => cmd_awgn_check(&cli, args),
        Command::B2b(args) => cmd_b2b(&cli, args),
    }
}

fn load_scenario(cli: &Cli, path: &Path) -> anyhow::Result<(Scenario, u64)> {
    let scenario = Scenario::from_path(path)?;
    let seed = cli.seed.unwrap_or(scenario.seed);
    if scenario.slow {
        eprintln!(
            "note: scenario {} is marked slow; expect a long run at full-scale settings",
            scenario.name
        );
    }
    Ok((scenario, seed))
}

/// `pmf-egn-2d.txt` → `EGN_2D`; used to label swept PMF files.
fn tag_from_path(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "PMF".to_string());
    let stem = stem.strip_prefix("pmf-").unwrap_or(&stem);
    stem.replace('-', "_").to_ascii_uppercase()
}

fn load_pmf_entry(path: &Path, want: &Constellation) -> anyhow::Result<PmfEntry> {
    let (c, pmf) = constellation::read_pmf(path)?;
    if c.len() != want.len() {
        return Err(HarnessError::PmfMismatch {
            path: path.to_path_buf(),
            got: c.len(),
            want: want.len(),
        }
        .into());
    }
    Ok(PmfEntry::new(tag_from_path(path), pmf))
}

fn grid(start: f64, stop: f64, step: f64) -> anyhow::Result<Vec<f64>> {
    if !(step > 0.0) {
        bail!("grid step must be positive, got {step}");
    }
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let v = start + k as f64 * step;
        if v > stop + 0.5 * step {
            break;
        }
        out.push(v);
        k += 1;
    }
    if out.is_empty() {
        bail!("grid is empty (stop {stop} below start {start})");
    }
    Ok(out)
}

fn cmd_optimize(cli: &Cli, args: &OptimizeArgs) -> anyhow::Result<()> {
    let (scenario, seed) = load_scenario(cli, &args.config)?;
    let c = scenario.constellation()?;
    let t0 = Instant::now();
    let report = match &args.method {
        MethodCmd::LinMb { snr_db } => optimize::lin_mb(&c, *snr_db)?,
        MethodCmd::EgnMb { chi, p_ch_dbm } => {
            let coef = read_chi(chi)?;
            optimize::egn_mb(&c, &coef, launch_policy(*p_ch_dbm))?
        }
        MethodCmd::Egn2d { chi, p_ch_dbm } => {
            let coef = read_chi(chi)?;
            optimize::egn_2d(&c, &coef, launch_policy(*p_ch_dbm))?
        }
        MethodCmd::SsfmBa {
            p_total_dbm,
            n_symbols,
        } => {
            let mut cfg = scenario.signal_config(seed);
            if let Some(n) = n_symbols.or(scenario.optimize.ba_n_symbols) {
                cfg.n_sym = n;
            }
            optimize::ssfm_ba(&c, &cfg, &scenario.link, dbm_to_watt(*p_total_dbm))?
        }
    };
    let wall = t0.elapsed().as_secs_f64();
    let slug = pipeline::file_slug(report.method.tag());
    let pmf_name = format!("pmf-{slug}.txt");
    constellation::write_pmf(&cli.out_dir.join(&pmf_name), &c, &report.pmf)?;
    let text = report.summary_text(&pmf_name, wall);
    std::fs::write(cli.out_dir.join(format!("report-{slug}.toml")), &text)?;
    print!("{text}");
    Ok(())
}

fn launch_policy(p_ch_dbm: Option<f64>) -> LaunchPolicy {
    match p_ch_dbm {
        Some(p) => LaunchPolicy::FixedPerChannel(dbm_to_watt(p)),
        None => LaunchPolicy::OptimalPerCandidate,
    }
}

fn read_chi(path: &Path) -> anyhow::Result<egn::EgnCoefficients> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading chi block {}", path.display()))?;
    Ok(egn::EgnCoefficients::from_toml_str(&text)?)
}

fn cmd_calibrate(cli: &Cli, args: &CalibrateArgs) -> anyhow::Result<()> {
    let (scenario, seed) = load_scenario(cli, &args.config)?;
    let c = scenario.constellation()?;
    let cfg = scenario.signal_config(seed);
    let powers: Vec<f64> = if args.powers_dbm.is_empty() {
        let mid = 0.5 * (scenario.sweep.start_dbm + scenario.sweep.stop_dbm);
        pipeline::CAL_POWER_OFFSETS_DB
            .iter()
            .map(|d| mid + d)
            .collect()
    } else {
        args.powers_dbm.clone()
    };
    eprintln!(
        "calibrating {} at {} probe powers ({} cells)…",
        scenario.name,
        powers.len(),
        4 * powers.len()
    );
    let probes = pipeline::calibration_probes(&c)?;
    let (chi, rows) = pipeline::run_calibration(&c, &cfg, &scenario.link, &probes, &powers)?;
    pipeline::write_cal_csv(&cli.out_dir.join("calibration.csv"), &rows)?;
    let text = chi.to_toml_string()?;
    std::fs::write(cli.out_dir.join("chi.toml"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> anyhow::Result<()> {
    let (scenario, seed) = load_scenario(cli, &args.config)?;
    let c = scenario.constellation()?;
    let cfg = scenario.signal_config(seed);
    let mut entries = vec![PmfEntry::uniform(c.len())];
    for path in &args.pmfs {
        entries.push(load_pmf_entry(path, &c)?);
    }
    let powers = scenario.sweep.powers_dbm();
    eprintln!(
        "sweeping {}: {} PMFs x {} powers…",
        scenario.name,
        entries.len(),
        powers.len()
    );
    let spec = SweepSpec {
        c: &c,
        cfg,
        link: scenario.link,
        powers_dbm: &powers,
        entries: &entries,
    };
    let rows = sweep::run_sweep(&spec)?;
    let path = cli.out_dir.join("sweep.csv");
    sweep::write_rows_csv(&path, &rows)?;
    for entry in &entries {
        let method_rows = sweep::rows_for_method(&rows, &entry.tag);
        match sweep::fit_p_opt(&method_rows) {
            Ok(fit) => println!(
                "{}: optimal launch {:.2} dBm, SNR {:.3} dB",
                entry.tag, fit.p_opt_dbm, fit.snr_at_opt_db
            ),
            Err(e) => println!("{}: no fitted optimum ({e})", entry.tag),
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_pipeline(cli: &Cli, args: &PipelineArgs) -> anyhow::Result<()> {
    let (scenario, _) = load_scenario(cli, &args.config)?;
    let opts = PipelineOptions {
        out_dir: cli.out_dir.clone(),
        ssfm_ba: args.ssfm_ba,
        seed: cli.seed,
    };
    eprintln!("running pipeline for {}…", scenario.name);
    let outcome = pipeline::run_pipeline(&scenario, &opts)?;
    let summary = std::fs::read_to_string(outcome.out_dir.join("summary.txt"))?;
    print!("{summary}");
    Ok(())
}

fn cmd_awgn_check(cli: &Cli, args: &AwgnCheckArgs) -> anyhow::Result<()> {
    let bits = parse_modulation(&args.modulation)?;
    let c = Constellation::square_qam(bits)?;
    let mut entries = vec![PmfEntry::uniform(c.len())];
    for path in &args.pmfs {
        entries.push(load_pmf_entry(path, &c)?);
    }
    let snr_grid = grid(args.snr_start_db, args.snr_stop_db, args.snr_step_db)?;
    let report = awgn_check::awgn_crosscheck(&c, &entries, &snr_grid, args.ref_snr_db)?;
    awgn_check::write_mi_csv(&cli.out_dir.join("awgn-mi.csv"), &report)?;
    awgn_check::write_delta_csv(&cli.out_dir.join("awgn-delta.csv"), &report)?;
    print!("{}", awgn_check::delta_table_text(&report));
    Ok(())
}

fn cmd_b2b(cli: &Cli, args: &B2bArgs) -> anyhow::Result<()> {
    let (scenario, seed) = load_scenario(cli, &args.config)?;
    let c = scenario.constellation()?;
    let cfg = scenario.signal_config(seed);
    let (tag, pmf) = match &args.pmf {
        Some(path) => {
            let entry = load_pmf_entry(path, &c)?;
            (entry.tag, entry.pmf)
        }
        None => (sweep::UNIFORM_TAG.to_string(), Pmf::uniform(c.len())),
    };
    let snr_trx_db = args.snr_trx_db.unwrap_or(f64::INFINITY);
    let loads = grid(
        args.snr_load_start_db,
        args.snr_load_stop_db,
        args.snr_load_step_db,
    )?;
    let mut out = String::from("# fibershape-b2b v1\n");
    out.push_str("method,snr_load_db,snr_eff_db,air_2d_bits\n");
    for &load in &loads {
        let records = ssfm::back_to_back(&cfg, &c, &pmf, load, snr_trx_db)?;
        let ev = metrics::evaluate_records(
            &records,
            &c,
            &pmf,
            metrics::FitMode::Joint,
            metrics::AirOptions::default(),
        )?;
        let snr = ev
            .snr
            .db()
            .ok_or(HarnessError::SnrAboveCeiling { p_total_dbm: load })?;
        out.push_str(&format!(
            "{tag},{load},{snr},{air}\n",
            air = ev.air.air_2d_bits
        ));
        println!(
            "load {load:6.2} dB -> effective {snr:7.3} dB, AIR {:.4} bits/2D",
            ev.air.air_2d_bits
        );
    }
    let path = cli.out_dir.join("b2b.csv");
    std::fs::write(&path, out)?;
    println!("wrote {}", path.display());
    Ok(())
}
