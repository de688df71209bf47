//! Square-QAM constellations, probability mass functions over them, and the
//! Maxwell-Boltzmann (MB) shaping family.
//!
//! # Geometry and indexing
//!
//! A square 2^m-QAM constellation (m even) places points on the odd-integer
//! grid `{±1, ±3, …, ±(L−1)}²`, `L = 2^{m/2}` levels per axis, and scales all
//! coordinates by a common factor. Points are enumerated **row-major** over
//! the I/Q grid: index `i = r·L + c`, where row `r` runs top-down (imaginary
//! part `(L−1−2r)·s`) and column `c` left-right (real part `(2c−L+1)·s`).
//!
//! # Energy normalization
//!
//! A constellation/PMF pair is *unit energy* when `Σ p_i |x_i|² = 1`. Shaped
//! PMFs concentrate mass on inner points, so the scale that achieves unit
//! energy depends on the PMF; [`Constellation::normalized_for`] computes it.
//! Operations that are only meaningful at unit energy ([`moments`]) check the
//! invariant to relative tolerance [`ENERGY_TOL`] and refuse otherwise.
//!
//! # Maxwell-Boltzmann self-consistency
//!
//! The MB family is `P(x_i) ∝ exp(−ν·|x_i|²)` on the **unit-energy** points.
//! Because the unit-energy scale itself depends on the PMF, the definition is
//! circular; it untangles into the scalar equation `ν = λ·Ê(λ)` where
//! [`mb_pmf_lambda`] is the same tilt on a *fixed* reference scale. The
//! right-hand side is nondecreasing in `λ`, so [`mb_pmf`] solves it by
//! bisection and verifies the result is self-consistent to
//! [`MB_FIXED_POINT_TOL`] in L1 distance. Optimizers should search the family
//! in `λ` (smooth, unconstrained) rather than `ν` (nearly flat around the
//! transition to the collapsed regime).

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use thiserror::Error;

/// Relative tolerance on `Σ p|x|² = 1` for unit-energy preconditions.
pub const ENERGY_TOL: f64 = 1e-9;
/// PMF entries below this are clamped to zero (with renormalization) when
/// emitting PMF files.
pub const PROB_EMIT_FLOOR: f64 = 1e-12;
/// L1 self-consistency tolerance of [`mb_pmf`]'s result.
pub const MB_FIXED_POINT_TOL: f64 = 1e-10;
/// Iteration cap of the MB bisection.
pub const MB_MAX_ITERS: usize = 1000;
/// Tolerance on `Σ p_i = 1` accepted by [`Pmf::new`].
pub const PMF_SUM_TOL: f64 = 1e-12;

/// Errors from constellation and PMF operations.
#[derive(Debug, Error)]
pub enum ConstellationError {
    #[error("bits per symbol must be even and in 2..=10, got {0}")]
    BadOrder(u32),
    #[error("pmf has {got} entries but the constellation has {want} points")]
    LengthMismatch { got: usize, want: usize },
    #[error("pmf entry {index} is not a finite nonnegative probability: {value}")]
    BadProbability { index: usize, value: f64 },
    #[error("pmf sums to {sum}, not 1 (tolerance {PMF_SUM_TOL:e})")]
    NotNormalized { sum: f64 },
    #[error("pair is not unit energy: E[|x|²] = {energy}")]
    NotUnitEnergy { energy: f64 },
    #[error("Maxwell-Boltzmann parameter must be finite and >= 0, got {0}")]
    BadMbParameter(f64),
    #[error("Maxwell-Boltzmann solve is not self-consistent to {MB_FIXED_POINT_TOL:e} (residual {residual:e})")]
    MbNoConvergence { residual: f64 },
    #[error("pmf puts all mass on zero-energy points; cannot normalize")]
    DegenerateEnergy,
    #[error("kl divergence undefined: q is zero where p is positive (index {0})")]
    KlSupportMismatch(usize),
    #[error("pmf file {path}: {reason}")]
    FileFormat { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, ConstellationError>;

/// A square-QAM constellation: the point set and its current common scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    bits: u32,
    points: Vec<Complex64>,
}

impl Constellation {
    /// The square 2^`bits`-QAM constellation, scaled to unit energy under the
    /// uniform PMF. `bits` must be even and between 2 (QPSK) and 10 (1024-QAM).
    pub fn square_qam(bits: u32) -> Result<Self> {
        if bits < 2 || bits > 10 || bits % 2 != 0 {
            return Err(ConstellationError::BadOrder(bits));
        }
        let side = 1usize << (bits / 2);
        let l = side as f64;
        // Uniform per-axis mean square of {±1,±3,…,±(L−1)} is (L²−1)/3.
        let scale = (3.0 / (2.0 * (l * l - 1.0))).sqrt();
        let mut points = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                let re = (2.0 * c as f64 - (l - 1.0)) * scale;
                let im = ((l - 1.0) - 2.0 * r as f64) * scale;
                points.push(Complex64::new(re, im));
            }
        }
        Ok(Self { bits, points })
    }

    /// Bits per symbol (2D), i.e. log2 of the constellation size.
    pub fn bits_per_symbol(&self) -> u32 {
        self.bits
    }

    /// Number of points `M = 2^bits`.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// True if the constellation has no points (never, for valid orders).
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Levels per I/Q axis, `L = sqrt(M)`.
    pub fn grid_side(&self) -> usize {
        1usize << (self.bits / 2)
    }

    /// The scaled constellation points, row-major over the grid.
    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    /// Point energies `|x_i|²` in index order.
    pub fn energies(&self) -> Vec<f64> {
        self.points.iter().map(|x| x.norm_sqr()).collect()
    }

    /// Mean energy `Σ p_i |x_i|²` under `pmf`.
    pub fn energy(&self, pmf: &Pmf) -> Result<f64> {
        self.check_len(pmf)?;
        Ok(self
            .points
            .iter()
            .zip(pmf.probs())
            .map(|(x, &p)| p * x.norm_sqr())
            .sum())
    }

    /// A copy rescaled so that `Σ p_i |x_i|² = 1`.
    pub fn normalized_for(&self, pmf: &Pmf) -> Result<Self> {
        let e = self.energy(pmf)?;
        if e <= 0.0 || !e.is_finite() {
            return Err(ConstellationError::DegenerateEnergy);
        }
        let s = 1.0 / e.sqrt();
        Ok(Self {
            bits: self.bits,
            points: self.points.iter().map(|x| x * s).collect(),
        })
    }

    /// A copy with every coordinate multiplied by `scale`.
    pub fn scaled(&self, scale: f64) -> Self {
        Self {
            bits: self.bits,
            points: self.points.iter().map(|x| x * scale).collect(),
        }
    }

    /// The four-point orbits of the quadrant-symmetry group
    /// (I-flip × Q-flip), as index quadruples sorted by their smallest member.
    ///
    /// Square QAM has an even number of levels per axis, so no point lies on
    /// an axis and every orbit has exactly 4 distinct members; there are M/4
    /// orbits and they partition the index set.
    pub fn quadrant_orbits(&self) -> Vec<[usize; 4]> {
        let side = self.grid_side();
        let mut orbits = Vec::with_capacity(self.len() / 4);
        for r in 0..side / 2 {
            for c in 0..side / 2 {
                let a = r * side + c;
                let b = r * side + (side - 1 - c);
                let d = (side - 1 - r) * side + c;
                let e = (side - 1 - r) * side + (side - 1 - c);
                orbits.push([a, b, d, e]);
            }
        }
        orbits
    }

    fn check_len(&self, pmf: &Pmf) -> Result<()> {
        if pmf.len() != self.len() {
            return Err(ConstellationError::LengthMismatch {
                got: pmf.len(),
                want: self.len(),
            });
        }
        Ok(())
    }
}

/// A probability mass function over the points of a constellation.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf {
    probs: Vec<f64>,
}

impl Pmf {
    /// Validating constructor: entries must be finite and nonnegative and sum
    /// to 1 within [`PMF_SUM_TOL`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(ConstellationError::BadProbability { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PMF_SUM_TOL {
            return Err(ConstellationError::NotNormalized { sum });
        }
        Ok(Self { probs })
    }

    /// Build a PMF from nonnegative weights by normalizing their sum to 1.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        for (index, &value) in weights.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(ConstellationError::BadProbability { index, value });
            }
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(ConstellationError::NotNormalized { sum });
        }
        let probs = weights.into_iter().map(|w| w / sum).collect();
        Ok(Self { probs })
    }

    /// The uniform PMF on `m` outcomes.
    pub fn uniform(m: usize) -> Self {
        Self {
            probs: vec![1.0 / m as f64; m],
        }
    }

    /// Number of outcomes.
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    /// True when the PMF has no entries.
    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// The probabilities in constellation index order.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Entropy in bits; zero-probability points contribute nothing.
    pub fn entropy_bits(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.log2())
            .sum::<f64>()
    }

    /// Exact quadrant symmetry: `P(x) = P(−x) = P(x*)` hold bit-for-bit on
    /// the row-major grid of `c`.
    pub fn is_quadrant_symmetric(&self, c: &Constellation) -> bool {
        if self.len() != c.len() {
            return false;
        }
        c.quadrant_orbits().iter().all(|orbit| {
            let v = self.probs[orbit[0]];
            orbit.iter().all(|&i| self.probs[i] == v)
        })
    }

    /// Project onto the quadrant-symmetric subspace by averaging each orbit;
    /// the result satisfies the symmetry exactly (each orbit shares one
    /// stored value) and keeps the total mass.
    pub fn symmetrized(&self, c: &Constellation) -> Result<Self> {
        c.check_len(self)?;
        let mut probs = vec![0.0; self.len()];
        for orbit in c.quadrant_orbits() {
            let avg = orbit.iter().map(|&i| self.probs[i]).sum::<f64>() / 4.0;
            for &i in &orbit {
                probs[i] = avg;
            }
        }
        Ok(Self { probs })
    }
}

/// Kullback-Leibler divergence `D(p‖q)` in bits. Errors when `q` has a zero
/// where `p` is positive; `p_i = 0` terms contribute zero.
pub fn kl_divergence_bits(p: &Pmf, q: &Pmf) -> Result<f64> {
    if p.len() != q.len() {
        return Err(ConstellationError::LengthMismatch {
            got: q.len(),
            want: p.len(),
        });
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.probs().iter().zip(q.probs()).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(ConstellationError::KlSupportMismatch(i));
            }
            kl += pi * (pi / qi).log2();
        }
    }
    Ok(kl)
}

/// Fourth and sixth standardized moments `(μ̂4, μ̂6)` of the unit-energy pair:
/// `μ̂k = Σ p_i |x_i|^k` with `Σ p_i |x_i|² = 1` required to [`ENERGY_TOL`].
pub fn moments(c: &Constellation, p: &Pmf) -> Result<(f64, f64)> {
    let e = c.energy(p)?;
    if (e - 1.0).abs() > ENERGY_TOL {
        return Err(ConstellationError::NotUnitEnergy { energy: e });
    }
    let mut mu4 = 0.0;
    let mut mu6 = 0.0;
    for (x, &pi) in c.points().iter().zip(p.probs()) {
        let e2 = x.norm_sqr();
        mu4 += pi * e2 * e2;
        mu6 += pi * e2 * e2 * e2;
    }
    Ok((mu4, mu6))
}

/// Standardized moments of an arbitrary-scale pair, normalizing internally:
/// `μ̂4 = E[|x|⁴]/E[|x|²]²`, `μ̂6 = E[|x|⁶]/E[|x|²]³`.
pub fn moments_raw(c: &Constellation, p: &Pmf) -> Result<(f64, f64)> {
    let cn = c.normalized_for(p)?;
    moments(&cn, p)
}

/// Point energies on the scale where the *uniform* ensemble has unit mean
/// energy, plus their minimum. This is the scale-free coordinate system the
/// Maxwell-Boltzmann family lives in.
fn uniform_unit_energies(c: &Constellation) -> Result<(Vec<f64>, f64)> {
    let energies = c.energies();
    let e_uniform = energies.iter().sum::<f64>() / c.len() as f64;
    if e_uniform <= 0.0 || !e_uniform.is_finite() {
        return Err(ConstellationError::DegenerateEnergy);
    }
    let ehat: Vec<f64> = energies.iter().map(|&e| e / e_uniform).collect();
    let ehat_min = ehat.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((ehat, ehat_min))
}

/// Maxwell-Boltzmann PMF in the fixed-scale parameterization:
/// `P(x_i) ∝ exp(−λ·ê_i)` with `ê_i` the point energies on the scale where
/// the uniform ensemble has unit mean energy.
///
/// The map is scale-free in `c`, smooth and strictly ordering in `λ` (no
/// self-consistency equation is involved), which makes `λ` the natural search
/// coordinate for shaping optimizers. `λ = 0` is uniform; `λ → ∞` puts all
/// mass on the innermost energy orbit. The self-normalized parameter of
/// [`mb_pmf`] relates to it by `ν = λ·Ê(λ)` (see [`mb_lambda_to_nu`]).
pub fn mb_pmf_lambda(c: &Constellation, lambda: f64) -> Result<Pmf> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(ConstellationError::BadMbParameter(lambda));
    }
    let m = c.len();
    let (ehat, ehat_min) = uniform_unit_energies(c)?;
    if lambda == 0.0 {
        return Ok(Pmf::uniform(m));
    }
    let w: Vec<f64> = ehat
        .iter()
        .map(|&e| (-lambda * (e - ehat_min)).exp())
        .collect();
    Pmf::from_weights(w)
}

/// The self-normalized MB parameter `ν` realized by the fixed-scale tilt `λ`:
/// `ν = λ·Ê(λ)` where `Ê(λ)` is the mean energy of [`mb_pmf_lambda`] on the
/// uniform-unit scale. `ν(λ)` is nondecreasing on square QAM, so the two
/// parameterizations trace the same one-dimensional family.
pub fn mb_lambda_to_nu(c: &Constellation, lambda: f64) -> Result<f64> {
    let p = mb_pmf_lambda(c, lambda)?;
    let (ehat, _) = uniform_unit_energies(c)?;
    let e_mean: f64 = ehat.iter().zip(p.probs()).map(|(&e, &pi)| e * pi).sum();
    Ok(lambda * e_mean)
}

/// Solve the Maxwell-Boltzmann self-consistency `P(x_i) ∝ exp(−ν·ê_i)` where
/// `ê_i` are the point energies under the PMF's *own* unit-energy scale.
///
/// The circular dependence (the PMF depends on the energies, whose
/// normalization depends on the PMF) reduces to the scalar equation
/// `ν = λ·Ê(λ)` in the fixed-scale tilt of [`mb_pmf_lambda`]; the right-hand
/// side is nondecreasing in `λ` and unbounded, so bisection finds the unique
/// solution. The result is independent of the scale of `c`. `nu = 0` gives
/// the uniform PMF; larger `nu` concentrates mass on low-energy points.
pub fn mb_pmf(c: &Constellation, nu: f64) -> Result<Pmf> {
    if !nu.is_finite() || nu < 0.0 {
        return Err(ConstellationError::BadMbParameter(nu));
    }
    let m = c.len();
    let (ehat, ehat_min) = uniform_unit_energies(c)?;
    // Degenerate cases where the tilt cannot move mass: uniform is exact.
    if nu == 0.0 || (1.0 - ehat_min).abs() < 1e-14 {
        return Ok(Pmf::uniform(m));
    }
    // ν(λ) = λ·Ê(λ), with Ê the mean of the λ-tilt on the uniform-unit scale.
    let nu_of = |lam: f64| -> f64 {
        let mut z = 0.0;
        let mut me = 0.0;
        for &e in &ehat {
            let w = (-lam * (e - ehat_min)).exp();
            z += w;
            me += w * e;
        }
        lam * me / z
    };
    // Bracket: ν(0) = 0 and ν(λ) ≥ λ·ê_min → ∞.
    let mut hi = nu.max(1.0);
    let mut iters = 0;
    while nu_of(hi) < nu {
        hi *= 2.0;
        iters += 1;
        if iters > MB_MAX_ITERS {
            return Err(ConstellationError::MbNoConvergence { residual: nu });
        }
    }
    let mut lo = 0.0;
    for _ in 0..MB_MAX_ITERS {
        if hi - lo <= 1e-14 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if nu_of(mid) < nu {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lam = 0.5 * (lo + hi);
    let p = mb_pmf_lambda(c, lam)?;
    // A-posteriori self-consistency: re-tilting at the PMF's own mean energy
    // must reproduce it.
    let e_mean: f64 = ehat.iter().zip(p.probs()).map(|(&e, &pi)| e * pi).sum();
    let check = mb_pmf_lambda(c, nu / e_mean)?;
    let residual: f64 = check
        .probs()
        .iter()
        .zip(p.probs())
        .map(|(a, b)| (a - b).abs())
        .sum();
    if residual > MB_FIXED_POINT_TOL {
        return Err(ConstellationError::MbNoConvergence { residual });
    }
    Ok(p)
}

/// The KL-closest PMF with independent I and Q components: the product of the
/// row and column marginals of `p` on the grid of `c`.
pub fn nearest_product_pmf(c: &Constellation, p: &Pmf) -> Result<Pmf> {
    c.check_len(p)?;
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
    let mut probs = Vec::with_capacity(side * side);
    for r in 0..side {
        for cc in 0..side {
            probs.push(row[r] * col[cc]);
        }
    }
    Pmf::from_weights(probs)
}

// ---------------------------------------------------------------------------
// PMF file format
// ---------------------------------------------------------------------------

/// Serialize a constellation/PMF pair to the PMF text format:
///
/// ```text
/// # m=<bits> sym=<0|1>
/// <re> <im> <prob>     (M lines, row-major, 12 significant digits)
/// ```
///
/// Probabilities below [`PROB_EMIT_FLOOR`] are clamped to zero and the
/// remainder renormalized before writing.
pub fn write_pmf(path: &Path, c: &Constellation, p: &Pmf) -> Result<()> {
    c.check_len(p)?;
    let mut clamped: Vec<f64> = p
        .probs()
        .iter()
        .map(|&v| if v < PROB_EMIT_FLOOR { 0.0 } else { v })
        .collect();
    let sum: f64 = clamped.iter().sum();
    if sum <= 0.0 {
        return Err(ConstellationError::NotNormalized { sum });
    }
    clamped.iter_mut().for_each(|v| *v /= sum);
    let sym = Pmf {
        probs: clamped.clone(),
    }
    .is_quadrant_symmetric(c);
    let mut out = String::new();
    writeln!(out, "# m={} sym={}", c.bits_per_symbol(), u8::from(sym)).expect("string write");
    for (x, v) in c.points().iter().zip(&clamped) {
        writeln!(out, "{:.11e} {:.11e} {:.11e}", x.re, x.im, v).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a PMF file written by [`write_pmf`]; returns the constellation (at
/// the stored scale) and the PMF. The declared symmetry flag is checked
/// against the data.
pub fn read_pmf(path: &Path) -> Result<(Constellation, Pmf)> {
    let fail = |reason: String| ConstellationError::FileFormat {
        path: path.display().to_string(),
        reason,
    };
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| fail("empty file".into()))?;
    let header = header
        .strip_prefix("# m=")
        .ok_or_else(|| fail(format!("bad header: {header:?}")))?;
    let (m_str, sym_str) = header
        .split_once(" sym=")
        .ok_or_else(|| fail(format!("bad header fields: {header:?}")))?;
    let bits: u32 = m_str
        .trim()
        .parse()
        .map_err(|e| fail(format!("bad m: {e}")))?;
    let sym_flag: u8 = sym_str
        .trim()
        .parse()
        .map_err(|e| fail(format!("bad sym: {e}")))?;
    if bits < 2 || bits > 10 || bits % 2 != 0 {
        return Err(ConstellationError::BadOrder(bits));
    }
    let m = 1usize << bits;
    let mut points = Vec::with_capacity(m);
    let mut probs = Vec::with_capacity(m);
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut field = |name: &str| -> Result<f64> {
            it.next()
                .ok_or_else(|| fail(format!("line {}: missing {name}", lineno + 2)))?
                .parse::<f64>()
                .map_err(|e| fail(format!("line {}: bad {name}: {e}", lineno + 2)))
        };
        let re = field("re")?;
        let im = field("im")?;
        let prob = field("prob")?;
        if !re.is_finite() || !im.is_finite() {
            return Err(fail(format!("line {}: non-finite point", lineno + 2)));
        }
        points.push(Complex64::new(re, im));
        probs.push(prob);
    }
    if points.len() != m {
        return Err(fail(format!("expected {m} points, found {}", points.len())));
    }
    let c = Constellation { bits, points };
    let pmf = Pmf::from_weights(probs)?;
    let sum: f64 = pmf.probs().iter().sum();
    debug_assert!((sum - 1.0).abs() < 1e-12);
    if pmf.is_quadrant_symmetric(&c) != (sym_flag == 1) {
        return Err(fail(format!(
            "sym flag {} disagrees with the data",
            sym_flag
        )));
    }
    Ok((c, pmf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn qam(bits: u32) -> Constellation {
        Constellation::square_qam(bits).unwrap()
    }

    #[test]
    fn rejects_bad_orders() {
        for bits in [0u32, 1, 3, 5, 7, 11, 12] {
            assert!(Constellation::square_qam(bits).is_err(), "bits={bits}");
        }
    }

    #[test]
    fn qpsk_points_are_unit_circle_diagonals() {
        let c = qam(2);
        assert_eq!(c.len(), 4);
        let s = core::f64::consts::FRAC_1_SQRT_2;
        // Row-major from top-left: (-s, s), (s, s), (-s, -s), (s, -s).
        assert_abs_diff_eq!(c.points()[0].re, -s, epsilon = 1e-15);
        assert_abs_diff_eq!(c.points()[0].im, s, epsilon = 1e-15);
        assert_abs_diff_eq!(c.points()[3].re, s, epsilon = 1e-15);
        assert_abs_diff_eq!(c.points()[3].im, -s, epsilon = 1e-15);
        for x in c.points() {
            assert_relative_eq!(x.norm_sqr(), 1.0, max_relative = 1e-15);
        }
    }

    #[test]
    fn uniform_energy_is_one_for_all_orders() {
        for bits in [2u32, 4, 6, 8, 10] {
            let c = qam(bits);
            let e = c.energy(&Pmf::uniform(c.len())).unwrap();
            assert_relative_eq!(e, 1.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn uniform_moments_match_exact_fractions() {
        // Exact integer-grid computations: E[a²]=(L²−1)/3 per axis and
        // E|x|⁴ = 2E[a⁴]+2E[a²]², E|x|⁶ = 2E[a⁶]+6E[a⁴]E[a²].
        let cases = [
            (2u32, 1.0, 1.0),                       // QPSK: all energies equal
            (4, 132.0 / 100.0, 1960.0 / 1000.0),    // 16QAM: 1.32, 1.96
            (6, 2436.0 / 1764.0, 164904.0 / 74088.0), // 64QAM
            (8, 40324.0 / 28900.0, 11261480.0 / 4913000.0), // 256QAM
        ];
        for (bits, mu4_exact, mu6_exact) in cases {
            let c = qam(bits);
            let (mu4, mu6) = moments(&c, &Pmf::uniform(c.len())).unwrap();
            assert_relative_eq!(mu4, mu4_exact, max_relative = 1e-12);
            assert_relative_eq!(mu6, mu6_exact, max_relative = 1e-12);
        }
    }

    #[test]
    fn uniform_moments_match_published_4dp_values() {
        let c64 = qam(6);
        let (mu4, mu6) = moments(&c64, &Pmf::uniform(64)).unwrap();
        assert_abs_diff_eq!(mu4, 1.3810, epsilon = 5e-5);
        assert_abs_diff_eq!(mu6, 2.2258, epsilon = 5e-5);
        let c256 = qam(8);
        let (mu4, mu6) = moments(&c256, &Pmf::uniform(256)).unwrap();
        assert_abs_diff_eq!(mu4, 1.3953, epsilon = 5e-5);
        assert_abs_diff_eq!(mu6, 2.2922, epsilon = 5e-5);
    }

    #[test]
    fn moments_reject_non_unit_energy() {
        let c = qam(4).scaled(1.1);
        assert!(matches!(
            moments(&c, &Pmf::uniform(16)),
            Err(ConstellationError::NotUnitEnergy { .. })
        ));
    }

    #[test]
    fn entropy_oracles() {
        assert_relative_eq!(Pmf::uniform(64).entropy_bits(), 6.0, max_relative = 1e-14);
        let p = Pmf::new(vec![0.5, 0.25, 0.125, 0.125]).unwrap();
        assert_relative_eq!(p.entropy_bits(), 1.75, max_relative = 1e-14);
        let det = Pmf::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(det.entropy_bits(), 0.0);
    }

    #[test]
    fn kl_hand_oracle_quarter_bit() {
        let p = Pmf::uniform(4);
        let q = Pmf::new(vec![0.5, 0.25, 0.125, 0.125]).unwrap();
        assert_relative_eq!(kl_divergence_bits(&p, &q).unwrap(), 0.25, max_relative = 1e-14);
        assert_eq!(kl_divergence_bits(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_detects_support_mismatch() {
        let p = Pmf::uniform(2);
        let q = Pmf::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            kl_divergence_bits(&p, &q),
            Err(ConstellationError::KlSupportMismatch(1))
        ));
    }

    #[test]
    fn mb_zero_nu_is_uniform() {
        let c = qam(6);
        let p = mb_pmf(&c, 0.0).unwrap();
        for &v in p.probs() {
            assert_relative_eq!(v, 1.0 / 64.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn mb_satisfies_self_consistency() {
        let c = qam(6);
        for nu in [0.1, 0.5, 1.0, 2.0] {
            let p = mb_pmf(&c, nu).unwrap();
            let cn = c.normalized_for(&p).unwrap();
            // Recompute MB weights from the unit-energy points: should match.
            let w: Vec<f64> = cn.energies().iter().map(|&e| (-nu * e).exp()).collect();
            let z: f64 = w.iter().sum();
            for (a, b) in p.probs().iter().zip(w.iter().map(|v| v / z)) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn mb_is_scale_invariant() {
        let c = qam(4);
        let p1 = mb_pmf(&c, 0.7).unwrap();
        let p2 = mb_pmf(&c.scaled(2.0), 0.7).unwrap();
        for (a, b) in p1.probs().iter().zip(p2.probs()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn mb_rejects_bad_nu() {
        let c = qam(2);
        assert!(mb_pmf(&c, -0.1).is_err());
        assert!(mb_pmf(&c, f64::NAN).is_err());
    }

    #[test]
    fn mb_is_exactly_quadrant_symmetric() {
        let c = qam(8);
        let p = mb_pmf(&c, 1.3).unwrap();
        assert!(p.is_quadrant_symmetric(&c));
    }

    #[test]
    fn mb_entropy_decreases_with_nu() {
        let c = qam(6);
        let mut last = f64::INFINITY;
        for nu in [0.0, 0.25, 0.5, 1.0, 2.0, 4.0] {
            let h = mb_pmf(&c, nu).unwrap().entropy_bits();
            assert!(h < last + 1e-12, "entropy must be nonincreasing in nu");
            last = h;
        }
    }

    #[test]
    fn mb_parameterizations_trace_the_same_family() {
        let c = qam(6);
        for lam in [0.0, 0.2, 0.7, 1.3, 2.5, 6.0, 20.0] {
            let via_lambda = mb_pmf_lambda(&c, lam).unwrap();
            let nu = mb_lambda_to_nu(&c, lam).unwrap();
            let via_nu = mb_pmf(&c, nu).unwrap();
            let l1: f64 = via_lambda
                .probs()
                .iter()
                .zip(via_nu.probs())
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(l1 < 1e-9, "lambda={lam}: parameterizations differ by {l1}");
        }
    }

    #[test]
    fn mb_large_nu_collapses_to_the_inner_orbit() {
        let c = qam(4);
        let p = mb_pmf(&c, 50.0).unwrap();
        // The four innermost points share the mass equally; everything else
        // is (numerically) extinct.
        let energies = c.energies();
        let e_min = energies.iter().copied().fold(f64::INFINITY, f64::min);
        for (i, (&pi, &e)) in p.probs().iter().zip(&energies).enumerate() {
            if (e - e_min).abs() < 1e-12 {
                assert_relative_eq!(pi, 0.25, max_relative = 1e-9);
            } else {
                assert!(pi < 1e-12, "outer point {i} still has mass {pi}");
            }
        }
    }

    #[test]
    fn orbits_partition_into_quads() {
        let c = qam(6);
        let orbits = c.quadrant_orbits();
        assert_eq!(orbits.len(), 16);
        let mut seen = vec![false; 64];
        for orbit in &orbits {
            for &i in orbit {
                assert!(!seen[i], "index {i} in two orbits");
                seen[i] = true;
            }
            // All four members share the same energy.
            let e0 = c.points()[orbit[0]].norm_sqr();
            for &i in orbit {
                assert_relative_eq!(c.points()[i].norm_sqr(), e0, max_relative = 1e-12);
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn symmetrized_is_exact_and_mass_preserving() {
        let c = qam(4);
        let mut w = vec![0.0; 16];
        for (i, v) in w.iter_mut().enumerate() {
            *v = (i + 1) as f64;
        }
        let p = Pmf::from_weights(w).unwrap();
        let s = p.symmetrized(&c).unwrap();
        assert!(s.is_quadrant_symmetric(&c));
        assert_relative_eq!(s.probs().iter().sum::<f64>(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn nearest_product_fixes_products_and_mb() {
        let c = qam(6);
        // A product PMF maps to itself.
        let p = mb_pmf(&c, 0.8).unwrap();
        let q = nearest_product_pmf(&c, &p).unwrap();
        assert!(kl_divergence_bits(&p, &q).unwrap() < 1e-9, "MB factorizes over I/Q");
        // A non-product PMF moves, and KL to the product is nonnegative.
        let ring = ring_probe(&c);
        let qp = nearest_product_pmf(&c, &ring).unwrap();
        let kl = kl_divergence_bits(&ring, &qp).unwrap();
        assert!(kl > 1e-4, "ring PMF is far from product, got KL={kl}");
    }

    /// A quadrant-symmetric, non-product probe concentrated on a mid-energy ring.
    fn ring_probe(c: &Constellation) -> Pmf {
        let w: Vec<f64> = c
            .energies()
            .iter()
            .map(|&e| (-2.0 * (e - 0.8) * (e - 0.8)).exp())
            .collect();
        Pmf::from_weights(w).unwrap()
    }

    #[test]
    fn pmf_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mb64.pmf");
        let c = qam(6);
        let p = mb_pmf(&c, 1.1).unwrap();
        let cn = c.normalized_for(&p).unwrap();
        write_pmf(&path, &cn, &p).unwrap();
        let (c2, p2) = read_pmf(&path).unwrap();
        assert_eq!(c2.bits_per_symbol(), 6);
        for (a, b) in c2.points().iter().zip(cn.points()) {
            assert_abs_diff_eq!(a.re, b.re, epsilon = 1e-11);
            assert_abs_diff_eq!(a.im, b.im, epsilon = 1e-11);
        }
        for (a, b) in p2.probs().iter().zip(p.probs()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        assert!(p2.is_quadrant_symmetric(&c2));
    }

    #[test]
    fn pmf_file_clamps_dust() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dust.pmf");
        let c = qam(2);
        let mut probs = vec![0.5 - 2.5e-13, 0.5 - 2.5e-13, 5e-13, 0.0];
        // exact sum 1
        probs[3] = 1.0 - probs[0] - probs[1] - probs[2];
        let p = Pmf::new(probs).unwrap();
        write_pmf(&path, &c, &p).unwrap();
        let (_, p2) = read_pmf(&path).unwrap();
        assert_eq!(p2.probs()[2], 0.0, "sub-floor probability clamped");
        assert_relative_eq!(p2.probs().iter().sum::<f64>(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn pmf_file_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pmf");
        std::fs::write(&path, "# m=2 sym=1\n0 0 0.5\n").unwrap();
        assert!(read_pmf(&path).is_err(), "wrong point count");
        std::fs::write(&path, "no header\n").unwrap();
        assert!(read_pmf(&path).is_err(), "missing header");
    }

    #[test]
    fn pmf_new_validates() {
        assert!(Pmf::new(vec![0.5, 0.6]).is_err());
        assert!(Pmf::new(vec![-0.1, 1.1]).is_err());
        assert!(Pmf::new(vec![f64::NAN, 1.0]).is_err());
        assert!(Pmf::new(vec![0.25; 4]).is_ok());
    }

    proptest! {
        #[test]
        fn mb_family_invariants(nu in 0.0f64..6.0) {
            let c = qam(6);
            let p = mb_pmf(&c, nu).unwrap();
            // Valid PMF, symmetric, entropy within [0, m].
            prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.is_quadrant_symmetric(&c));
            let h = p.entropy_bits();
            prop_assert!(h >= 0.0 && h <= 6.0 + 1e-12);
            // Unit energy after normalization, and moments are finite.
            let cn = c.normalized_for(&p).unwrap();
            let (mu4, mu6) = moments(&cn, &p).unwrap();
            prop_assert!(mu4.is_finite() && mu6.is_finite());
            // Jensen: mu4 >= 1 for unit-energy distributions.
            prop_assert!(mu4 >= 1.0 - 1e-9);
            prop_assert!(mu6 >= mu4 * mu4 / 1.0 - 1e-6, "Cauchy-Schwarz chain");
        }

        #[test]
        fn kl_nonnegative_on_random_pmfs(seed in 0u64..500) {
            let c = qam(4);
            let mut rng = crate::rng::stream_rng(seed, "kltest", 0);
            use rand::Rng as _;
            let w: Vec<f64> = (0..16).map(|_| rng.gen_range(0.01f64..1.0)).collect();
            let p = Pmf::from_weights(w).unwrap();
            let q = nearest_product_pmf(&c, &p).unwrap();
            let kl = kl_divergence_bits(&p, &q).unwrap();
            prop_assert!(kl >= -1e-12);
            // The product of marginals preserves the marginals, hence entropy sum.
            let hp = p.entropy_bits();
            let hq = q.entropy_bits();
            prop_assert!(hq >= hp - 1e-9, "product has maximal entropy given marginals");
        }
    }
}
