//! Input-distribution optimizers.
//!
//! Four strategies for choosing the transmit PMF of a square-QAM
//! constellation on a nonlinear WDM link, in increasing order of channel
//! awareness:
//!
//! * [`lin_mb`] — Maxwell-Boltzmann shaping against a *linear* AWGN channel at
//!   a fixed SNR. The classical baseline: it ignores that shaping itself moves
//!   the nonlinear interference.
//! * [`egn_mb`] — Maxwell-Boltzmann shaping against the closed-form EGN model,
//!   where the candidate's own moments `(μ̂4, μ̂6)` feed back into the SNR it
//!   is scored at.
//! * [`egn_2d`] — unconstrained (beyond quadrant symmetry) optimization of the
//!   full two-dimensional PMF against the EGN model, by projected gradient
//!   ascent on the simplex of orbit masses.
//! * [`ssfm_ba`] — model-free shaping with the split-step simulator in the
//!   loop: alternate between simulating the current PMF, fitting a Gaussian
//!   auxiliary channel to the received clouds, and running Blahut-Arimoto to
//!   convergence on that fixed channel.
//!
//! All four return an [`OptimizerReport`] whose `converged` flag is honest:
//! it is set only when the method's stated tolerance was actually met. Every
//! optimizer evaluates the uniform input as a baseline and returns it if it
//! beats the search result, so a report's predicted AIR never falls below
//! uniform signaling.
//!
//! The Maxwell-Boltzmann searches run in the fixed-scale tilt `λ` of
//! [`constellation::mb_pmf_lambda`], which is smooth and well conditioned;
//! the self-normalized parameter `ν` of [`constellation::mb_pmf`] is related
//! by the monotone map `ν = λ·Ê(λ)` and is nearly flat where the family
//! collapses, which makes it a poor search coordinate.

use crate::constellation::{self, Constellation, ConstellationError, Pmf};
use crate::egn::{self, EgnCoefficients, EgnError, LinkConfig};
use crate::metrics::{self, GaussianChannel, MetricsError};
use crate::rng::derive_seed;
use crate::ssfm::{self, SignalConfig, SsfmError};
use crate::units;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fmt::Write as _;
use thiserror::Error;

/// Errors from the optimizers.
#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("constellation: {0}")]
    Constellation(#[from] ConstellationError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("egn model: {0}")]
    Egn(#[from] EgnError),
    #[error("simulator: {0}")]
    Ssfm(#[from] SsfmError),
    #[error("snr must be finite, got {0} dB")]
    BadSnr(f64),
    #[error("per-channel launch power must be positive and finite, got {0} W")]
    BadPower(f64),
    #[error("total launch power must be positive and finite, got {0} W")]
    BadTotalPower(f64),
    #[error("Maxwell-Boltzmann family failed to collapse by lambda = {lambda:e}")]
    FamilyBracket { lambda: f64 },
    #[error("no constellation point collected two or more records; cannot fit the auxiliary channel")]
    NoUsablePoints,
}

type Result<T> = std::result::Result<T, OptimizeError>;

// ---------------------------------------------------------------------------
// Report and policy types
// ---------------------------------------------------------------------------

/// The four shaping strategies compared by the toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    /// Maxwell-Boltzmann against linear AWGN at fixed SNR.
    LinMb,
    /// Maxwell-Boltzmann against the EGN model.
    EgnMb,
    /// Full 2D PMF against the EGN model.
    Egn2d,
    /// Simulation-in-the-loop Blahut-Arimoto.
    SsfmBa,
}

impl Method {
    /// The stable tag used in CSV columns and report files.
    pub fn tag(self) -> &'static str {
        match self {
            Method::LinMb => "LIN_MB",
            Method::EgnMb => "EGN_MB",
            Method::Egn2d => "EGN_2D",
            Method::SsfmBa => "SSFM_BA",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Outcome of one optimizer run.
///
/// Invariant: `converged` is true only when the method's stated tolerance was
/// met (it is *not* set when an iteration cap expired first), and
/// `predicted_air_2d` is never below the uniform-input baseline evaluated
/// under the same objective.
#[derive(Debug, Clone)]
pub struct OptimizerReport {
    /// Which optimizer produced this report.
    pub method: Method,
    /// The optimized input distribution (exactly quadrant-symmetric).
    pub pmf: Pmf,
    /// Predicted achievable rate at the optimum, bits per 2D symbol.
    pub predicted_air_2d: f64,
    /// The SNR (dB) underlying that prediction: the fixed input SNR for
    /// [`lin_mb`], the EGN model SNR at the optimum for [`egn_mb`] /
    /// [`egn_2d`], and the measured effective SNR of the final simulation run
    /// for [`ssfm_ba`].
    pub predicted_snr_db: f64,
    /// Objective evaluations ([`lin_mb`], [`egn_mb`]), ascent iterations
    /// ([`egn_2d`]), or outer simulate-fit-update cycles ([`ssfm_ba`]).
    pub iterations: usize,
    /// True only if the method's tolerance was met.
    pub converged: bool,
    /// Human-readable notes: flat objectives, iteration caps, oscillation.
    pub warnings: Vec<String>,
}

impl OptimizerReport {
    /// Serialize the report as the structured text (TOML) block the harness
    /// writes next to each PMF file. `pmf_ref` is the relative path of the
    /// PMF file this report describes.
    pub fn summary_text(&self, pmf_ref: &str, wall_time_s: f64) -> String {
        let mut s = String::new();
        writeln!(s, "method = \"{}\"", self.method).unwrap();
        writeln!(s, "pmf = \"{pmf_ref}\"").unwrap();
        writeln!(s, "predicted_air_2d_bits = {:.6}", self.predicted_air_2d).unwrap();
        writeln!(s, "predicted_snr_db = {:.4}", self.predicted_snr_db).unwrap();
        writeln!(s, "iterations = {}", self.iterations).unwrap();
        writeln!(s, "converged = {}", self.converged).unwrap();
        writeln!(s, "wall_time_s = {wall_time_s:.3}").unwrap();
        if !self.warnings.is_empty() {
            let quoted: Vec<String> = self.warnings.iter().map(|w| format!("{w:?}")).collect();
            writeln!(s, "warnings = [{}]", quoted.join(", ")).unwrap();
        }
        s
    }
}

/// How the EGN-aware optimizers pick the launch power each candidate PMF is
/// evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LaunchPolicy {
    /// Score every candidate at this fixed per-channel power (W).
    FixedPerChannel(f64),
    /// Score each candidate at its own closed-form optimal power
    /// `P_opt(μ̂4, μ̂6)`; the default for design studies, since a deployed
    /// system would re-optimize its launch power for the chosen PMF.
    OptimalPerCandidate,
}

impl LaunchPolicy {
    fn validate(&self) -> Result<()> {
        if let LaunchPolicy::FixedPerChannel(p) = *self {
            if !(p > 0.0) || !p.is_finite() {
                return Err(OptimizeError::BadPower(p));
            }
        }
        Ok(())
    }

    /// The per-channel power (W) a candidate with these moments is scored at.
    fn power_for(&self, coef: &EgnCoefficients, mu4: f64, mu6: f64) -> Result<f64> {
        match *self {
            LaunchPolicy::FixedPerChannel(p) => Ok(p),
            LaunchPolicy::OptimalPerCandidate => Ok(egn::optimal_power_w(coef, mu4, mu6)?),
        }
    }
}

// ---------------------------------------------------------------------------
// Shared search machinery
// ---------------------------------------------------------------------------

/// Interval tolerance of the golden-section searches over the MB tilt.
const MB_TILT_TOL: f64 = 1e-6;
/// Grid density of the EGN-MB validation sweep (the EGN objective need not be
/// unimodal over the family, so golden section alone is not trusted).
const EGN_MB_GRID_POINTS: usize = 200;
/// Below this best-case MI (bits) the objective is flagged as flat: the
/// shaping parameter is unidentified and the returned PMF is arbitrary. At
/// vanishing SNR every unit-energy input obeys I ≈ snr·log2(e), so MI itself
/// never reaches exactly zero; differences between PMFs are O(snr²) and a
/// milli-bit of MI already leaves nothing identifiable to shape against.
const FLAT_OBJECTIVE_MI_BITS: f64 = 1e-3;
/// Entropy (bits) at which the MB family counts as fully collapsed onto its
/// innermost orbit. Quadrant symmetry forces at least four active points, so
/// entropy can never fall below 2 bits; 2.05 brackets the whole useful range.
const MB_COLLAPSE_ENTROPY_BITS: f64 = 2.05;
/// Armijo sufficient-increase constant of the projected-gradient ascent.
const ARMIJO_C1: f64 = 1e-4;
/// Probe step for the projected-gradient-norm convergence test.
const PG_PROBE_STEP: f64 = 1e-3;
/// Relative step of the central difference estimating `∂MI/∂v`.
const FD_REL_STEP: f64 = 1e-5;
/// Maximum Armijo halvings before the line search counts as exhausted.
const MAX_BACKTRACKS: usize = 60;

/// Golden-section maximization of `f` on `[lo, hi]` to interval width `tol`.
/// Returns the best evaluated `(x, f(x))` and the number of evaluations.
fn golden_max<F>(lo: f64, hi: f64, tol: f64, f: &mut F) -> Result<(f64, f64, usize)>
where
    F: FnMut(f64) -> Result<f64>,
{
    const INVPHI: f64 = 0.618_033_988_749_894_9;
    let (mut a, mut b) = (lo, hi);
    if b - a <= tol {
        let x = 0.5 * (a + b);
        return Ok((x, f(x)?, 1));
    }
    let mut x1 = b - INVPHI * (b - a);
    let mut x2 = a + INVPHI * (b - a);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    let mut evals = 2;
    while b - a > tol {
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INVPHI * (b - a);
            f1 = f(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INVPHI * (b - a);
            f2 = f(x2)?;
        }
        evals += 1;
    }
    let (x, fx) = if f1 >= f2 { (x1, f1) } else { (x2, f2) };
    Ok((x, fx, evals))
}

/// Upper end of the MB tilt search: the smallest power-of-two `λ` whose PMF
/// has entropy at or below [`MB_COLLAPSE_ENTROPY_BITS`]. Beyond it the family
/// is a point mass on the innermost orbit and nothing is left to search.
fn mb_lambda_hi(c: &Constellation) -> Result<f64> {
    let mut hi = 1.0;
    for _ in 0..80 {
        let h = constellation::mb_pmf_lambda(c, hi)?.entropy_bits();
        if h <= MB_COLLAPSE_ENTROPY_BITS {
            return Ok(hi);
        }
        hi *= 2.0;
    }
    Err(OptimizeError::FamilyBracket { lambda: hi })
}

/// Euclidean projection of `v` onto the probability simplex (Held/Duchi
/// sort-and-threshold).
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let cand = (cum - 1.0) / (i + 1) as f64;
        if ui - cand > 0.0 {
            theta = cand;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

fn axpy(t: &[f64], s: f64, g: &[f64]) -> Vec<f64> {
    t.iter().zip(g).map(|(&ti, &gi)| ti + s * gi).collect()
}

fn l1_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum()
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

// ---------------------------------------------------------------------------
// Lin-MB: Maxwell-Boltzmann against linear AWGN
// ---------------------------------------------------------------------------

/// Maxwell-Boltzmann shaping against a linear AWGN channel at the fixed SNR
/// `snr_db` (which must be finite): maximizes `λ ↦ I(mb(λ); snr)` by golden
/// section over `[0, λ_hi]`, where `λ_hi` collapses the family.
///
/// The SNR is held fixed across candidates — this is the strategy's defining
/// blind spot on a nonlinear link, where the PMF feeds back into the noise.
/// When the best achievable MI is essentially zero (deeply negative SNR) the
/// report carries a flat-objective warning, since every PMF is then equally
/// good and the returned one is arbitrary.
pub fn lin_mb(c: &Constellation, snr_db: f64) -> Result<OptimizerReport> {
    if !snr_db.is_finite() {
        return Err(OptimizeError::BadSnr(snr_db));
    }
    let hi = mb_lambda_hi(c)?;
    let mut obj = |lam: f64| -> Result<f64> {
        let p = constellation::mb_pmf_lambda(c, lam)?;
        Ok(metrics::awgn_mi(c, &p, snr_db)?)
    };
    let (lam_star, mi_star, evals) = golden_max(0.0, hi, MB_TILT_TOL, &mut obj)?;
    let uniform = Pmf::uniform(c.len());
    let mi_uniform = metrics::awgn_mi(c, &uniform, snr_db)?;
    let (pmf, mi) = if mi_uniform >= mi_star {
        (uniform, mi_uniform)
    } else {
        (constellation::mb_pmf_lambda(c, lam_star)?, mi_star)
    };
    let mut warnings = Vec::new();
    if mi < FLAT_OBJECTIVE_MI_BITS {
        warnings.push(format!(
            "flat objective: best mutual information is only {mi:.3e} bits, so the shaping parameter is unidentified at {snr_db} dB"
        ));
    }
    Ok(OptimizerReport {
        method: Method::LinMb,
        pmf,
        predicted_air_2d: mi,
        predicted_snr_db: snr_db,
        iterations: evals + 1,
        converged: true,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// EGN-MB: Maxwell-Boltzmann against the EGN model
// ---------------------------------------------------------------------------

/// Maxwell-Boltzmann shaping against the EGN model: maximizes
/// `λ ↦ I(mb(λ); SNR_EGN(P(λ), μ̂4(λ), μ̂6(λ)))` where the launch power `P`
/// follows `policy`. Because the candidate's own moments move the SNR it is
/// scored at, the objective need not be unimodal; a 200-point grid over the
/// family validates the golden-section refinement and the better of the two
/// wins. Family members whose moments fall where the coefficient block
/// predicts nonpositive NLI (an extrapolation artifact near the family's
/// collapse end) are skipped, not fatal: they could never win anyway.
pub fn egn_mb(
    c: &Constellation,
    coef: &EgnCoefficients,
    policy: LaunchPolicy,
) -> Result<OptimizerReport> {
    policy.validate()?;
    let hi = mb_lambda_hi(c)?;
    let mut skipped = 0usize;
    let mut eval = |lam: f64| -> Result<Option<(f64, f64)>> {
        let p = constellation::mb_pmf_lambda(c, lam)?;
        let (mu4, mu6) = constellation::moments_raw(c, &p)?;
        let scored = policy
            .power_for(coef, mu4, mu6)
            .and_then(|p_ch| Ok(egn::egn_snr_db(coef, p_ch, mu4, mu6)?));
        let snr_db = match scored {
            Ok(snr_db) => snr_db,
            Err(OptimizeError::Egn(EgnError::NonPositiveKappa { .. })) => {
                skipped += 1;
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let mi = metrics::awgn_mi(c, &p, snr_db)?;
        Ok(Some((mi, snr_db)))
    };
    let mut evals = 0usize;
    // Dense validation grid; λ = 0 (the uniform baseline) is its first point.
    let mut best_mi = f64::NEG_INFINITY;
    let mut best_lam = 0.0;
    for k in 0..EGN_MB_GRID_POINTS {
        let lam = hi * k as f64 / (EGN_MB_GRID_POINTS - 1) as f64;
        if let Some((mi, _)) = eval(lam)? {
            if mi > best_mi {
                best_mi = mi;
                best_lam = lam;
            }
        }
        evals += 1;
    }
    if !best_mi.is_finite() {
        // Unreachable for a validated block (the uniform member λ = 0 sits
        // near the anchor its constructor checked); kept as defense.
        return Err(OptimizeError::Egn(EgnError::NonPositiveKappa {
            kappa: 0.0,
            mu4: egn::ANCHOR_MU4,
            mu6: egn::ANCHOR_MU6,
        }));
    }
    // Golden refinement inside the bracketing grid cell.
    let dx = hi / (EGN_MB_GRID_POINTS - 1) as f64;
    let mut obj = |lam: f64| Ok(eval(lam)?.map_or(f64::NEG_INFINITY, |(mi, _)| mi));
    let (lam_g, mi_g, ev) = golden_max(
        (best_lam - dx).max(0.0),
        (best_lam + dx).min(hi),
        MB_TILT_TOL,
        &mut obj,
    )?;
    evals += ev;
    let lam_star = if mi_g >= best_mi { lam_g } else { best_lam };
    let (mi_star, snr_star) = eval(lam_star)?.expect("the best family member scored before");
    evals += 1;
    let pmf = constellation::mb_pmf_lambda(c, lam_star)?;
    let mut warnings = Vec::new();
    if mi_star < FLAT_OBJECTIVE_MI_BITS {
        warnings.push(format!(
            "flat objective: best mutual information is only {mi_star:.3e} bits over the whole family"
        ));
    }
    if skipped > 0 {
        warnings.push(format!(
            "{skipped} family members fell outside the coefficient block's positive-NLI region and were skipped"
        ));
    }
    Ok(OptimizerReport {
        method: Method::EgnMb,
        pmf,
        predicted_air_2d: mi_star,
        predicted_snr_db: snr_star,
        iterations: evals,
        converged: true,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// EGN-2D: full PMF against the EGN model
// ---------------------------------------------------------------------------

/// Tolerances and caps of the [`egn_2d`] ascent.
#[derive(Debug, Clone, Copy)]
pub struct Egn2dOptions {
    /// Hard iteration cap; hitting it yields `converged = false`.
    pub max_iters: usize,
    /// Converged when the projected-gradient norm falls below this.
    pub pg_tol: f64,
    /// ... or when |ΔMI| stays below this for `stall_iters` iterations.
    pub mi_tol: f64,
    /// Consecutive small-improvement iterations that count as convergence.
    pub stall_iters: usize,
    /// Gauss-Hermite order of the MI quadrature.
    pub quad_order: usize,
}

impl Default for Egn2dOptions {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            pg_tol: 1e-7,
            mi_tol: 1e-8,
            stall_iters: 10,
            quad_order: metrics::GH_ORDER,
        }
    }
}

/// One objective evaluation of the EGN-2D ascent.
struct MassEval {
    p: Pmf,
    mi: f64,
    /// Per-point relative-entropy terms `D_i` (bits) at this evaluation.
    d: Vec<f64>,
    /// Total auxiliary-channel variance on the base constellation scale.
    v_eff: f64,
    /// Mean symbol energy `E(p)` on the base scale.
    energy: f64,
    p_ch: f64,
    snr_db: f64,
    mu4: f64,
    mu6: f64,
}

/// Evaluate the EGN objective at orbit masses `t`: build the PMF
/// `p_i = t_{o(i)}/4`, score it at the policy's launch power, and compute the
/// AWGN MI at the model's total noise. The energy renormalization is inside
/// the objective — `v_eff = E(p)·(σ²_ASE + NLI)/P` puts the model noise on
/// the base constellation scale, which is equivalent to renormalizing the
/// constellation to unit energy under each candidate.
fn eval_masses(
    c: &Constellation,
    coef: &EgnCoefficients,
    policy: LaunchPolicy,
    orbits: &[[usize; 4]],
    t: &[f64],
    order: usize,
) -> Result<MassEval> {
    let mut w = vec![0.0; c.len()];
    for (orbit, &to) in orbits.iter().zip(t) {
        let q = to.max(0.0) / 4.0;
        for &i in orbit {
            w[i] = q;
        }
    }
    let p = Pmf::from_weights(w)?;
    let energy = c.energy(&p)?;
    let (mu4, mu6) = constellation::moments_raw(c, &p)?;
    let p_ch = policy.power_for(coef, mu4, mu6)?;
    let nli = egn::nli_variance(coef, p_ch, mu4, mu6)?;
    let v_eff = energy * (coef.ase_var + nli) / p_ch;
    let (mi, d) = metrics::awgn_mi_terms(c, &p, v_eff, order)?;
    let snr_db = units::lin_to_db(p_ch / (coef.ase_var + nli));
    Ok(MassEval {
        p,
        mi,
        d,
        v_eff,
        energy,
        p_ch,
        snr_db,
        mu4,
        mu6,
    })
}

/// Analytic ascent gradient with respect to the orbit masses, at `ev`.
///
/// `∂F/∂p_j = (D_j − log2 e) + (∂I/∂v)·(∂v_eff/∂p_j)`, with the moment chain
/// `∂v_eff/∂p_j = e_j·v_eff/E + E·P²·∂κ/∂p_j` (base-scale point energies
/// `e_j`). Under [`LaunchPolicy::OptimalPerCandidate`] the same formula holds
/// by the envelope theorem: `∂(SNR⁻¹)/∂P = 0` at the per-candidate optimal
/// power, so the power's own dependence on the moments drops out. `∂I/∂v` is
/// a central difference; everything else is exact.
fn gradient_masses(
    c: &Constellation,
    coef: &EgnCoefficients,
    orbits: &[[usize; 4]],
    ev: &MassEval,
    order: usize,
) -> Result<Vec<f64>> {
    let h = FD_REL_STEP * ev.v_eff;
    let mi_p = metrics::awgn_mi_terms(c, &ev.p, ev.v_eff + h, order)?.0;
    let mi_m = metrics::awgn_mi_terms(c, &ev.p, ev.v_eff - h, order)?.0;
    let dmi_dv = (mi_p - mi_m) / (2.0 * h);
    let e = ev.energy;
    let dkappa_mu4 = coef.chi4 + 2.0 * (ev.mu4 - 2.0) * coef.chi4p;
    let dkappa_mu6 = coef.chi6;
    let p2 = ev.p_ch * ev.p_ch;
    let energies = c.energies();
    let log2e = std::f64::consts::LOG2_E;
    let mut grad = vec![0.0; orbits.len()];
    for (orbit, slot) in orbits.iter().zip(grad.iter_mut()) {
        let mut acc = 0.0;
        for &j in orbit {
            let ej = energies[j];
            let dmu4 = ej * ej / (e * e) - 2.0 * ev.mu4 * ej / e;
            let dmu6 = ej * ej * ej / (e * e * e) - 3.0 * ev.mu6 * ej / e;
            let dkappa = dkappa_mu4 * dmu4 + dkappa_mu6 * dmu6;
            let dv = ej * ev.v_eff / e + e * p2 * dkappa;
            acc += (ev.d[j] - log2e) + dmi_dv * dv;
        }
        *slot = acc / 4.0;
    }
    Ok(grad)
}

/// Full two-dimensional PMF optimization against the EGN model with default
/// options and a uniform start. See [`egn_2d_opts`].
pub fn egn_2d(
    c: &Constellation,
    coef: &EgnCoefficients,
    policy: LaunchPolicy,
) -> Result<OptimizerReport> {
    egn_2d_opts(c, coef, policy, &Egn2dOptions::default(), None)
}

/// Full two-dimensional PMF optimization against the EGN model: projected
/// gradient ascent over the simplex of quadrant-orbit masses (`M/4 − 1`
/// degrees of freedom), with Armijo backtracking and step doubling.
///
/// Converged when the projected-gradient norm falls below `opts.pg_tol` or
/// the objective improves by less than `opts.mi_tol` for `opts.stall_iters`
/// consecutive accepted steps. Hitting `opts.max_iters` first returns the
/// best iterate with `converged = false` (not an error). `init` seeds the
/// ascent (it is symmetrized first); `None` starts from uniform.
pub fn egn_2d_opts(
    c: &Constellation,
    coef: &EgnCoefficients,
    policy: LaunchPolicy,
    opts: &Egn2dOptions,
    init: Option<&Pmf>,
) -> Result<OptimizerReport> {
    policy.validate()?;
    let orbits = c.quadrant_orbits();
    let n_orb = orbits.len();
    let mut t: Vec<f64> = match init {
        None => vec![1.0 / n_orb as f64; n_orb],
        Some(p0) => {
            let sym = p0.symmetrized(c)?;
            orbits
                .iter()
                .map(|orbit| orbit.iter().map(|&i| sym.probs()[i]).sum())
                .collect()
        }
    };
    let mut cur = eval_masses(c, coef, policy, &orbits, &t, opts.quad_order)?;
    let mut step = 0.1;
    let mut stall = 0usize;
    let mut iters = 0usize;
    let mut converged = false;
    let mut warnings = Vec::new();
    while iters < opts.max_iters {
        iters += 1;
        let g = gradient_masses(c, coef, &orbits, &cur, opts.quad_order)?;
        let probe = project_simplex(&axpy(&t, PG_PROBE_STEP, &g));
        if l2_diff(&probe, &t) / PG_PROBE_STEP < opts.pg_tol {
            converged = true;
            break;
        }
        // Armijo backtracking line search along the projected direction.
        let mut accepted = None;
        let mut step_try = step;
        for _ in 0..MAX_BACKTRACKS {
            let cand_t = project_simplex(&axpy(&t, step_try, &g));
            let lin: f64 = cand_t
                .iter()
                .zip(&t)
                .zip(&g)
                .map(|((&a, &b), &gi)| (a - b) * gi)
                .sum();
            if lin > 0.0 {
                // A probe whose moments land where the coefficient block
                // predicts nonpositive NLI is outside the model: reject the
                // step (halve and retry) rather than abort the ascent.
                match eval_masses(c, coef, policy, &orbits, &cand_t, opts.quad_order) {
                    Ok(cand) => {
                        if cand.mi >= cur.mi + ARMIJO_C1 * lin {
                            accepted = Some((cand_t, cand, step_try));
                            break;
                        }
                    }
                    Err(OptimizeError::Egn(EgnError::NonPositiveKappa { .. })) => {}
                    Err(e) => return Err(e),
                }
            }
            step_try *= 0.5;
            if step_try < 1e-14 {
                break;
            }
        }
        match accepted {
            None => {
                // No step of any size improves the objective beyond float
                // noise: the ΔMI tolerance holds vacuously.
                converged = true;
                warnings.push(
                    "line search reached float-precision flatness before the gradient tolerance"
                        .to_string(),
                );
                break;
            }
            Some((t_new, cand, used)) => {
                let delta = cand.mi - cur.mi;
                t = t_new;
                cur = cand;
                step = if used == step { (step * 2.0).min(1e4) } else { used };
                if delta.abs() < opts.mi_tol {
                    stall += 1;
                    if stall >= opts.stall_iters {
                        converged = true;
                        break;
                    }
                } else {
                    stall = 0;
                }
            }
        }
    }
    if !converged {
        warnings.push(format!(
            "ascent stopped at the iteration cap ({}) before meeting tolerances; returning the best iterate",
            opts.max_iters
        ));
    }
    // Uniform baseline guard (automatic for the default uniform start, since
    // Armijo steps are monotone, but an explicit `init` could do worse).
    let uni_t = vec![1.0 / n_orb as f64; n_orb];
    let uni = eval_masses(c, coef, policy, &orbits, &uni_t, opts.quad_order)?;
    let best = if uni.mi > cur.mi {
        warnings.push("uniform input beat the ascent result; returning uniform".to_string());
        uni
    } else {
        cur
    };
    Ok(OptimizerReport {
        method: Method::Egn2d,
        pmf: best.p,
        predicted_air_2d: best.mi,
        predicted_snr_db: best.snr_db,
        iterations: iters,
        converged,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Blahut-Arimoto inner loop
// ---------------------------------------------------------------------------

/// Outcome of [`ba_capacity`]: the capacity-achieving input of a fixed
/// Gaussian-output channel.
#[derive(Debug, Clone)]
pub struct BaResult {
    /// The optimizing PMF.
    pub pmf: Pmf,
    /// Mutual information at that PMF, bits per 2D symbol.
    pub mi_bits: f64,
    /// Blahut-Arimoto iterations performed.
    pub iterations: usize,
    /// True when the Arimoto capacity gap fell below the tolerance.
    pub converged: bool,
}

/// Standard Blahut-Arimoto iteration on a *fixed* memoryless channel with
/// Gaussian per-input conditionals: starting from the uniform input (so no
/// point is stuck at zero mass), repeat `p_i ← p_i·exp(D_i) / Z` until the
/// capacity gap `max_i D_i − I` falls below `tol_nats` (Arimoto's bound
/// guarantees `I` is then within `tol_nats` of the channel capacity) or
/// `cap` iterations elapse.
pub fn ba_capacity(
    ch: &GaussianChannel,
    cap: usize,
    tol_nats: f64,
    order: usize,
) -> Result<BaResult> {
    let m = ch.means.len();
    let mut q = vec![1.0 / m as f64; m];
    let mut last_mi = 0.0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cap {
        iterations += 1;
        let (mi_bits, d_bits) = metrics::mixture_mi_terms(ch, &q, order)?;
        last_mi = mi_bits;
        let d_max_bits = d_bits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let gap_nats = (d_max_bits - mi_bits) * std::f64::consts::LN_2;
        if gap_nats <= tol_nats {
            converged = true;
            break;
        }
        // Multiplicative update, shifted by D_max so the exponentials cannot
        // overflow; the shift cancels in the normalization.
        let mut z = 0.0;
        for (qi, &di) in q.iter_mut().zip(&d_bits) {
            *qi *= ((di - d_max_bits) * std::f64::consts::LN_2).exp();
            z += *qi;
        }
        for qi in q.iter_mut() {
            *qi /= z;
        }
    }
    Ok(BaResult {
        pmf: Pmf::from_weights(q)?,
        mi_bits: last_mi,
        iterations,
        converged,
    })
}

// ---------------------------------------------------------------------------
// SSFM-BA: simulation-in-the-loop shaping
// ---------------------------------------------------------------------------

/// Tolerances and caps of the [`ssfm_ba`] outer loop.
#[derive(Debug, Clone, Copy)]
pub struct BaOptions {
    /// Maximum simulate-fit-update cycles.
    pub outer_cap: usize,
    /// Outer convergence: L1 distance between successive PMFs below this.
    pub outer_l1_tol: f64,
    /// Iteration cap of the inner Blahut-Arimoto loop.
    pub inner_cap: usize,
    /// Inner convergence tolerance on the Arimoto capacity gap, nats.
    pub inner_tol_nats: f64,
    /// Declare oscillation when the L1 movement is non-decreasing over this
    /// many consecutive outer iterations.
    pub oscillation_window: usize,
    /// Gauss-Hermite order of the MI quadrature.
    pub quad_order: usize,
}

impl Default for BaOptions {
    fn default() -> Self {
        Self {
            outer_cap: 20,
            outer_l1_tol: 1e-3,
            inner_cap: 3000,
            inner_tol_nats: 1e-7,
            oscillation_window: 5,
            quad_order: metrics::GH_ORDER,
        }
    }
}

/// One completed outer cycle of the SSFM-BA loop.
struct OuterIterate {
    pmf: Pmf,
    mi: f64,
    snr_db: f64,
    l1: f64,
}

/// Simulation-in-the-loop shaping with default options. See [`ssfm_ba_opts`].
pub fn ssfm_ba(
    c: &Constellation,
    cfg: &SignalConfig,
    link: &LinkConfig,
    p_total: f64,
) -> Result<OptimizerReport> {
    ssfm_ba_opts(c, cfg, link, p_total, &BaOptions::default())
}

/// Simulation-in-the-loop shaping: alternate (1) split-step simulation of the
/// current PMF at total launch power `p_total`, (2) fitting a per-point
/// Gaussian auxiliary channel to the received clouds of the center channel,
/// (3) Blahut-Arimoto to convergence on that fixed channel, and (4) quadrant
/// symmetrization, until the PMF moves by less than `opts.outer_l1_tol` in L1
/// or `opts.outer_cap` cycles elapse.
///
/// The auxiliary channel uses the ideal (unit-energy) points as means and the
/// fitted per-point variances, with the record-weighted average variance
/// imputed to points too improbable to observe — mirroring how the harness
/// scores AIRs, and giving the inner loop a finite density for every point so
/// mass can flow back onto currently-unused ones. The inner loop restarts
/// from uniform each cycle for the same reason.
///
/// Every cycle reuses the same symbol and ASE noise streams (common random
/// numbers), making the outer map deterministic given `cfg.seed`; with fresh
/// noise the fixed point would be smeared by Monte-Carlo jitter and the L1
/// tolerance would be unreachable at practical block sizes.
///
/// If the L1 movement is non-decreasing for `opts.oscillation_window`
/// consecutive cycles, the loop stops and returns the best-AIR iterate with
/// `converged = false` and a warning. `predicted_snr_db` is the effective SNR
/// measured on the returned iterate's simulation run.
pub fn ssfm_ba_opts(
    c: &Constellation,
    cfg: &SignalConfig,
    link: &LinkConfig,
    p_total: f64,
    opts: &BaOptions,
) -> Result<OptimizerReport> {
    if !(p_total > 0.0) || !p_total.is_finite() {
        return Err(OptimizeError::BadTotalPower(p_total));
    }
    cfg.validate()?;
    let m = c.len();
    let p_ch = p_total / cfg.n_wdm as f64;
    let noise_seed = derive_seed(cfg.seed, "ba-ase", 0);
    let center = cfg.center_channel();
    let floor = metrics::VARIANCE_FLOOR;
    let mut p = Pmf::uniform(m);
    let mut history: Vec<OuterIterate> = Vec::new();
    let mut baseline: Option<(Pmf, f64, f64)> = None; // uniform-input (pmf, mi, snr)
    let mut warnings = Vec::new();
    let mut converged = false;
    let mut oscillated = false;
    let mut outers = 0usize;

    while outers < opts.outer_cap {
        outers += 1;
        // (1) Simulate the current PMF; common random numbers across cycles.
        let cn = c.normalized_for(&p)?;
        let tx = ssfm::tx_generate(cfg, c, &p, p_ch)?;
        let rx_wave = ssfm::propagate(&tx.grid, link, p_total, noise_seed)?;
        let records = ssfm::rx_detect(&rx_wave, cfg, link, center, &tx.symbols[center], &cn)?;
        // (2) Fit the Gaussian auxiliary channel: ideal means, fitted
        // variances, average variance imputed to unobservable tail points.
        let stats = metrics::per_point_stats(&records, m)?;
        let mut var_sum = 0.0;
        let mut var_cnt = 0usize;
        for i in 0..m {
            if stats.is_usable(i) {
                var_sum += stats.vars[i] * stats.counts[i] as f64;
                var_cnt += stats.counts[i];
            }
        }
        if var_cnt == 0 {
            return Err(OptimizeError::NoUsablePoints);
        }
        let avg_var = var_sum / var_cnt as f64;
        let vars: Vec<f64> = (0..m)
            .map(|i| {
                if stats.is_usable(i) {
                    stats.vars[i].max(floor)
                } else {
                    avg_var.max(floor)
                }
            })
            .collect();
        let ch = GaussianChannel {
            means: cn.points().to_vec(),
            vars,
        };
        let snr_db = match metrics::effective_snr(&stats, &p)? {
            metrics::SnrEstimate::Db(v) => v,
            metrics::SnrEstimate::AboveMeasurementCeiling => f64::INFINITY,
        };
        if baseline.is_none() {
            // The first cycle simulated the uniform input: its MI on this
            // fitted channel is the uniform baseline.
            let uni = Pmf::uniform(m);
            let (mi_uni, _) = metrics::mixture_mi_terms(&ch, uni.probs(), opts.quad_order)?;
            baseline = Some((uni, mi_uni, snr_db));
        }
        // (3) Inner Blahut-Arimoto to convergence on the fixed channel.
        let inner = ba_capacity(&ch, opts.inner_cap, opts.inner_tol_nats, opts.quad_order)?;
        if !inner.converged {
            warnings.push(format!(
                "inner Blahut-Arimoto hit its iteration cap at outer cycle {outers}"
            ));
        }
        // (4) Symmetrize and measure the movement.
        let p_next = inner.pmf.symmetrized(c)?;
        let l1 = l1_diff(p_next.probs(), p.probs());
        let (mi_next, _) = metrics::mixture_mi_terms(&ch, p_next.probs(), opts.quad_order)?;
        history.push(OuterIterate {
            pmf: p_next.clone(),
            mi: mi_next,
            snr_db,
            l1,
        });
        if l1 < opts.outer_l1_tol {
            converged = true;
            break;
        }
        if history.len() >= opts.oscillation_window {
            let tail = &history[history.len() - opts.oscillation_window..];
            if tail.windows(2).all(|w| w[1].l1 >= w[0].l1) {
                oscillated = true;
                warnings.push(format!(
                    "outer loop oscillates (L1 movement non-decreasing over {} cycles); returning the best-AIR iterate",
                    opts.oscillation_window
                ));
                break;
            }
        }
        p = p_next;
    }
    if !converged && !oscillated {
        warnings.push(format!(
            "outer loop hit its cycle cap ({}) before the L1 tolerance; returning the best-AIR iterate",
            opts.outer_cap
        ));
    }
    // Pick the returned iterate: the converged one, else the best by fitted
    // MI; then apply the uniform-baseline guard.
    let chosen = if converged {
        history.last().expect("converged loop has history")
    } else {
        history
            .iter()
            .max_by(|a, b| a.mi.total_cmp(&b.mi))
            .expect("at least one outer cycle ran")
    };
    let (uni_pmf, uni_mi, uni_snr) = baseline.expect("baseline set on first cycle");
    let (pmf, mi, snr_db) = if uni_mi > chosen.mi {
        warnings.push("uniform input beat the shaping loop; returning uniform".to_string());
        (uni_pmf, uni_mi, uni_snr)
    } else {
        (chosen.pmf.clone(), chosen.mi, chosen.snr_db)
    };
    Ok(OptimizerReport {
        method: Method::SsfmBa,
        pmf,
        predicted_air_2d: mi,
        predicted_snr_db: snr_db,
        iterations: outers,
        converged,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
