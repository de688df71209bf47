//! Unit conversions and physical constants used across the crate.
//!
//! Internally everything is SI: watts, seconds, hertz, meters — with the two
//! fiber-domain exceptions that lengths along the fiber are kilometers and
//! dispersion parameters are quoted in their engineering units. Conversions to
//! and from the logarithmic units used at the interfaces (dB, dBm) live here
//! so that factors of ten are written exactly once.

/// Speed of light in vacuum, m/s (exact).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Planck constant, J·s (exact, 2019 SI).
pub const PLANCK: f64 = 6.626_070_15e-34;

/// Decibels to linear power ratio.
#[inline]
pub fn db_to_lin(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Linear power ratio to decibels.
#[inline]
pub fn lin_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

/// dBm to watts.
#[inline]
pub fn dbm_to_watt(dbm: f64) -> f64 {
    1e-3 * db_to_lin(dbm)
}

/// Watts to dBm.
#[inline]
pub fn watt_to_dbm(watt: f64) -> f64 {
    lin_to_db(watt / 1e-3)
}

/// Fiber attenuation: dB/km to the linear power coefficient in 1/km
/// (`P(z) = P(0)·exp(-alpha_lin·z)`).
#[inline]
pub fn alpha_db_km_to_lin(alpha_db_km: f64) -> f64 {
    alpha_db_km * core::f64::consts::LN_10 / 10.0
}

/// Group-velocity dispersion beta2 in s²/km from the dispersion parameter D
/// in ps/(nm·km) at wavelength `lambda_m` (meters).
///
/// `beta2 = -D·lambda² / (2·pi·c)`; the sign convention makes D > 0
/// (anomalous dispersion, standard single-mode fiber) give beta2 < 0.
#[inline]
pub fn beta2_s2_km(dispersion_ps_nm_km: f64, lambda_m: f64) -> f64 {
    let d_si = dispersion_ps_nm_km * 1e-3; // s/(m·km)
    -d_si * lambda_m * lambda_m / (2.0 * core::f64::consts::PI * SPEED_OF_LIGHT)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn db_round_trips() {
        assert_relative_eq!(db_to_lin(3.0), 1.9952623149688795, max_relative = 1e-15);
        assert_relative_eq!(lin_to_db(db_to_lin(-7.3)), -7.3, max_relative = 1e-12);
        assert_relative_eq!(dbm_to_watt(0.0), 1e-3, max_relative = 1e-15);
        assert_relative_eq!(watt_to_dbm(dbm_to_watt(4.2)), 4.2, max_relative = 1e-12);
    }

    #[test]
    fn attenuation_coefficient_matches_handbook() {
        // 0.2 dB/km -> 0.2·ln(10)/10 = 0.046051701859880914 /km
        assert_relative_eq!(
            alpha_db_km_to_lin(0.2),
            0.046051701859880914,
            max_relative = 1e-15
        );
    }

    #[test]
    fn beta2_for_smf_at_1550nm() {
        // D = 17 ps/(nm·km) at 1.55 um: -17e-3·(1.55e-6)²/(2·pi·c) = -21.68 ps²/km.
        let b2 = beta2_s2_km(17.0, 1.55e-6);
        assert_relative_eq!(b2, -2.16826193914149e-23, max_relative = 1e-12);
    }
}
