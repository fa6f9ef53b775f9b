//! Relativistic electron optics constants.

use std::f64::consts::PI;

const H: f64 = 6.62607015e-34; // J s
const M0: f64 = 9.1093837015e-31; // kg
const E: f64 = 1.602176634e-19; // C
const C: f64 = 299792458.0; // m/s

/// Relativistic electron wavelength in angstroms.
pub fn electron_wavelength_a(energy_kev: f64) -> f64 {
    let ev = E * energy_kev * 1e3;
    let lambda_m = H / (2.0 * M0 * ev * (1.0 + ev / (2.0 * M0 * C * C))).sqrt();
    lambda_m * 1e10
}

/// Interaction constant sigma in rad/(V*angstrom): the phase shift a
/// projected potential of 1 V*angstrom imparts. sigma = 2 pi m e lambda / h^2
/// with the relativistic mass.
pub fn interaction_constant_rad_per_va(energy_kev: f64) -> f64 {
    let v = energy_kev * 1e3;
    let gamma = 1.0 + E * v / (M0 * C * C);
    let lambda_m = electron_wavelength_a(energy_kev) * 1e-10;
    let sigma_si = 2.0 * PI * gamma * M0 * E * lambda_m / (H * H); // 1/(V m)
    sigma_si * 1e-10
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wavelength_matches_reference_values() {
        // Tabulated relativistic electron wavelengths.
        assert!((electron_wavelength_a(100.0) - 0.037014).abs() < 5e-5);
        assert!((electron_wavelength_a(200.0) - 0.025079).abs() < 5e-5);
        assert!((electron_wavelength_a(300.0) - 0.019687).abs() < 5e-5);
    }

    #[test]
    fn interaction_constant_consistent_with_wavelength_formula() {
        // Independent algebraic route: sigma = (2 pi / lambda V) *
        // (m0 c^2 + e V) / (2 m0 c^2 + e V).
        for &kev in &[80.0, 100.0, 200.0, 300.0] {
            let v = kev * 1e3;
            let lambda = electron_wavelength_a(kev);
            let rest_kev = 510.99895;
            let alt = (2.0 * PI / (lambda * v)) * (rest_kev + kev) / (2.0 * rest_kev + kev);
            let sigma = interaction_constant_rad_per_va(kev);
            assert!(
                ((sigma - alt) / alt).abs() < 1e-6,
                "sigma mismatch at {kev} keV: {sigma} vs {alt}"
            );
        }
        // Spot value: ~9.24e-4 rad/(V A) at 100 kV.
        assert!((interaction_constant_rad_per_va(100.0) - 9.244e-4).abs() < 2e-6);
    }

    #[test]
    fn interaction_constant_decreases_with_energy() {
        assert!(
            interaction_constant_rad_per_va(80.0) > interaction_constant_rad_per_va(200.0)
        );
    }
}
