//! Scenario files: one structured-text document binding everything a study
//! needs — modulation, WDM signal plan, fiber link, launch-power grid, and
//! optimizer settings — under a single master seed.
//!
//! A scenario is the unit of reproducibility: every harness command takes a
//! scenario file, and two runs of the same command on the same file produce
//! identical output bytes. The `[signal]` table deliberately omits the seed
//! (it lives at the top level so one scenario can be re-run under seed
//! overrides without touching the signal plan).

use std::path::Path;

use fibershape_core::constellation::Constellation;
use fibershape_core::egn::LinkConfig;
use fibershape_core::ssfm::SignalConfig;
use serde::{Deserialize, Serialize};

use crate::{HarnessError, Result};

/// The `[signal]` table: a [`SignalConfig`] without the seed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalTable {
    /// Symbol rate R_s, Hz.
    pub symbol_rate: f64,
    /// RRC roll-off ρ ∈ (0, 1].
    pub rolloff: f64,
    /// Number of WDM channels (odd; the center one is scored).
    pub n_wdm: usize,
    /// WDM channel spacing, Hz.
    pub wdm_spacing: f64,
    /// Symbols per channel in one block.
    pub n_symbols: usize,
    /// RRC truncation: taps span ±rrc_span symbol periods.
    pub rrc_span: usize,
    /// Samples per symbol over the full multiplex (f_os).
    pub oversampling: usize,
}

/// The `[sweep]` table: an inclusive launch-power grid in dBm of total
/// power across all WDM channels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    /// First total launch power, dBm.
    pub start_dbm: f64,
    /// Last total launch power, dBm (inclusive up to grid rounding).
    pub stop_dbm: f64,
    /// Grid step, dB (> 0).
    pub step_db: f64,
}

impl SweepGrid {
    /// Materialize the grid: `start, start+step, …` up to and including
    /// `stop` (with a half-step tolerance so floating-point accumulation
    /// never drops the endpoint).
    pub fn powers_dbm(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut k = 0usize;
        loop {
            let p = self.start_dbm + k as f64 * self.step_db;
            if p > self.stop_dbm + 0.5 * self.step_db {
                break;
            }
            out.push(p);
            k += 1;
        }
        out
    }
}

/// The optional `[optimize]` table: settings for the simulation-in-the-loop
/// optimizer stage of the pipeline.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeTable {
    /// Run the simulation-in-the-loop (SSFM-BA) stage in the pipeline.
    pub ssfm_ba: bool,
    /// Symbols per channel for optimizer-stage simulations; `None` keeps
    /// the scenario's `n_symbols`. Lets the slow inner loop run shorter
    /// blocks than the scoring sweeps.
    pub ba_n_symbols: Option<usize>,
}

/// A parsed scenario file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Short name; used in output file naming and logs.
    pub name: String,
    /// Square-QAM modulation, e.g. `"64QAM"`.
    pub modulation: String,
    /// Master seed; every random stream in the study derives from it.
    pub seed: u64,
    /// Marks configurations too heavy for routine runs (full-scale
    /// oversampling/step settings). The harness runs them only when asked;
    /// tests skip them.
    #[serde(default)]
    pub slow: bool,
    /// WDM signal plan.
    pub signal: SignalTable,
    /// Fiber link and amplifier.
    pub link: LinkConfig,
    /// Total-launch-power grid for sweeps.
    pub sweep: SweepGrid,
    /// Optimizer-stage settings.
    #[serde(default)]
    pub optimize: OptimizeTable,
}

impl Scenario {
    /// Parse and validate a scenario file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let scenario: Scenario = toml::from_str(&text).map_err(|e| HarnessError::Scenario {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        scenario.validate().map_err(|message| HarnessError::Scenario {
            path: path.to_path_buf(),
            message,
        })?;
        Ok(scenario)
    }

    /// Serialize back to structured text (used to copy the effective
    /// configuration into result bundles).
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serialization cannot fail")
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.name.is_empty() {
            return Err("name must not be empty".into());
        }
        parse_modulation(&self.modulation).map_err(|e| e.to_string())?;
        self.signal_config(self.seed)
            .validate()
            .map_err(|e| format!("[signal] invalid: {e}"))?;
        if !(self.sweep.step_db > 0.0) {
            return Err(format!(
                "[sweep] step_db must be positive, got {}",
                self.sweep.step_db
            ));
        }
        if self.sweep.powers_dbm().is_empty() {
            return Err("[sweep] grid is empty (stop_dbm < start_dbm)".into());
        }
        if let Some(n) = self.optimize.ba_n_symbols {
            let mut cfg = self.signal_config(self.seed);
            cfg.n_sym = n;
            cfg.validate()
                .map_err(|e| format!("[optimize] ba_n_symbols = {n} invalid: {e}"))?;
        }
        Ok(())
    }

    /// The scenario's constellation.
    pub fn constellation(&self) -> Result<Constellation> {
        let bits = parse_modulation(&self.modulation)?;
        Ok(Constellation::square_qam(bits)?)
    }

    /// Build the simulator signal config under an explicit seed (callers
    /// pass `scenario.seed` or a derived per-purpose seed).
    pub fn signal_config(&self, seed: u64) -> SignalConfig {
        SignalConfig {
            symbol_rate: self.signal.symbol_rate,
            rolloff: self.signal.rolloff,
            n_wdm: self.signal.n_wdm,
            wdm_spacing: self.signal.wdm_spacing,
            n_sym: self.signal.n_symbols,
            rrc_span: self.signal.rrc_span,
            oversampling: self.signal.oversampling,
            seed,
        }
    }

    /// Per-channel share of a total launch power, watts.
    pub fn per_channel_power_w(&self, p_total_w: f64) -> f64 {
        p_total_w / self.signal.n_wdm as f64
    }
}

/// Parse `"64QAM"`, `"64-QAM"`, `"64 qam"`, or a bare point count into
/// bits per symbol. Only square QAM (even bit counts ≥ 2) is supported.
pub fn parse_modulation(text: &str) -> Result<u32> {
    let cleaned: String = text
        .trim()
        .trim_end_matches(|c: char| c.is_ascii_alphabetic())
        .trim_end_matches(['-', ' '])
        .to_string();
    let suffix = text.trim()[cleaned.len()..].trim_start_matches(['-', ' ']);
    if !suffix.is_empty() && !suffix.eq_ignore_ascii_case("qam") {
        return Err(HarnessError::UnknownModulation(text.to_string()));
    }
    let m: usize = cleaned
        .parse()
        .map_err(|_| HarnessError::UnknownModulation(text.to_string()))?;
    if m < 4 || !m.is_power_of_two() {
        return Err(HarnessError::UnknownModulation(text.to_string()));
    }
    let bits = m.trailing_zeros();
    if bits % 2 != 0 {
        return Err(HarnessError::UnknownModulation(text.to_string()));
    }
    Ok(bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_toml() -> &'static str {
        r#"
name = "demo"
modulation = "16QAM"
seed = 11

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
span_length = 100.0
step_size = 1.0

[sweep]
start_dbm = 10.0
stop_dbm = 14.0
step_db = 2.0
"#
    }

    #[test]
    fn scenario_round_trips_through_toml() {
        let s: Scenario = toml::from_str(sample_toml()).unwrap();
        s.validate().unwrap();
        let text = s.to_toml_string();
        let back: Scenario = toml::from_str(&text).unwrap();
        assert_eq!(back.name, "demo");
        assert_eq!(back.seed, 11);
        assert_eq!(back.signal.n_wdm, 3);
        assert_eq!(back.link.span_length, 100.0);
        assert!(!back.optimize.ssfm_ba);
    }

    #[test]
    fn power_grid_is_inclusive_of_the_endpoint() {
        let s: Scenario = toml::from_str(sample_toml()).unwrap();
        assert_eq!(s.sweep.powers_dbm(), vec![10.0, 12.0, 14.0]);
        let g = SweepGrid {
            start_dbm: 0.0,
            stop_dbm: 1.0,
            step_db: 0.1,
        };
        let p = g.powers_dbm();
        assert_eq!(p.len(), 11);
        assert!((p[10] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn modulation_parser_accepts_common_spellings() {
        assert_eq!(parse_modulation("16QAM").unwrap(), 4);
        assert_eq!(parse_modulation("64-QAM").unwrap(), 6);
        assert_eq!(parse_modulation("256 qam").unwrap(), 8);
        assert_eq!(parse_modulation("1024QAM").unwrap(), 10);
        assert_eq!(parse_modulation("4").unwrap(), 2);
        assert!(parse_modulation("32QAM").is_err(), "cross QAM is not square");
        assert!(parse_modulation("60QAM").is_err());
        assert!(parse_modulation("QAM").is_err());
        assert!(parse_modulation("16PSK").is_err());
    }

    #[test]
    fn seed_is_injected_into_the_signal_config() {
        let s: Scenario = toml::from_str(sample_toml()).unwrap();
        assert_eq!(s.signal_config(s.seed).seed, 11);
        assert_eq!(s.signal_config(99).seed, 99);
        assert_eq!(s.signal_config(s.seed).n_sym, 512);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = sample_toml().replace("seed = 11", "seed = 11\nbogus = 1");
        let err = toml::from_str::<Scenario>(&text).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }
}
