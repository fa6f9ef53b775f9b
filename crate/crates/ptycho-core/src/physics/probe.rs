//! Aperture-limited ideal probe synthesis.

use num_complex::Complex;

use super::constants::electron_wavelength_a;
use super::ProbeState;
use crate::error::{PtychoError, Result};
use crate::tensor::{fft2_raw, fft_freqs, Precision, Tensor};

/// Build a single-mode aberrated probe: a top-hat aperture of the given
/// semi-angle with phase chi(k) = pi lambda k^2 C1 + (pi/2) C3 lambda^3 k^4,
/// transformed to real space, centered on the grid, and normalized to unit
/// total intensity.
pub fn make_ideal_probe<P: Precision>(
    energy_kev: f64,
    aperture_mrad: f64,
    defocus_a: f64,
    c3_mm: f64,
    shape: (usize, usize),
    sampling: (f64, f64),
) -> Result<ProbeState<P>> {
    if aperture_mrad <= 0.0 {
        return Err(PtychoError::config("aperture semi-angle must be positive"));
    }
    let lambda = electron_wavelength_a(energy_kev);
    let k_max = aperture_mrad * 1e-3 / lambda;
    let k_nyq = (0.5 / sampling.0).min(0.5 / sampling.1);
    if k_max > k_nyq {
        return Err(PtychoError::config(format!(
            "aperture of {aperture_mrad} mrad needs k up to {k_max:.3} 1/A but the grid supports {k_nyq:.3}"
        )));
    }
    let (h, w) = shape;
    let ky = fft_freqs(h, sampling.0);
    let kx = fft_freqs(w, sampling.1);
    let c3_a = c3_mm * 1e7;
    let mut buf = Vec::with_capacity(h * w);
    for &gy in &ky {
        for &gx in &kx {
            let k2 = gy * gy + gx * gx;
            if k2.sqrt() <= k_max {
                let chi = std::f64::consts::PI * lambda * k2 * defocus_a
                    + 0.5 * std::f64::consts::PI * c3_a * lambda.powi(3) * k2 * k2;
                buf.push(Complex::new(P::of_f64(chi.cos()), P::of_f64(-chi.sin())));
            } else {
                buf.push(Complex::new(P::zero(), P::zero()));
            }
        }
    }
    fft2_raw(&mut buf, 1, h, w, true);
    let real_space = Tensor::from_complex(vec![1, h, w], buf)?
        .roll_hw(h as i64 / 2, w as i64 / 2);
    let total = real_space.sum_sq();
    if total <= P::zero() {
        return Err(PtychoError::config("aperture admits no frequencies on this grid"));
    }
    let norm = P::one() / total.sqrt();
    let modes = Tensor::from_complex(
        vec![1, h, w],
        real_space.complex()?.iter().map(|z| z * norm).collect(),
    )?;
    Ok(ProbeState {
        modes,
        energy_kev,
        sampling,
        aperture_mrad,
        defocus_a,
        c3_mm,
    })
}

/// Full width at half maximum of the radially averaged probe intensity,
/// in angstroms. Diagnostic used by tests.
pub fn intensity_fwhm_a<P: Precision>(probe: &ProbeState<P>) -> f64 {
    let (h, w) = probe.grid();
    let modes = probe.modes.complex().unwrap();
    // Incoherent intensity summed over modes.
    let mut intensity = vec![0.0f64; h * w];
    for (i, z) in modes.iter().enumerate() {
        intensity[i % (h * w)] += z.norm_sqr().as_f64();
    }
    let (cy, cx) = (h / 2, w / 2);
    let dr = probe.sampling.0.max(probe.sampling.1);
    let r_max = (h.min(w) / 2) as f64 * probe.sampling.0;
    let nbins = (r_max / dr) as usize;
    let mut sums = vec![0.0f64; nbins];
    let mut counts = vec![0usize; nbins];
    for y in 0..h {
        for x in 0..w {
            let ry = (y as f64 - cy as f64) * probe.sampling.0;
            let rx = (x as f64 - cx as f64) * probe.sampling.1;
            let r = (ry * ry + rx * rx).sqrt();
            let bin = (r / dr) as usize;
            if bin < nbins {
                sums[bin] += intensity[y * w + x];
                counts[bin] += 1;
            }
        }
    }
    // (radius, mean) over populated bins only.
    let profile: Vec<(f64, f64)> = sums
        .iter()
        .zip(&counts)
        .enumerate()
        .filter(|(_, (_, &c))| c > 0)
        .map(|(i, (&s, &c))| ((i as f64 + 0.5) * dr, s / c as f64))
        .collect();
    let peak = profile.iter().map(|&(_, v)| v).fold(0.0, f64::max);
    let half = peak / 2.0;
    for i in 1..profile.len() {
        let (r0, v0) = profile[i - 1];
        let (r1, v1) = profile[i];
        if v1 < half && v0 >= half {
            let frac = (v0 - half) / (v0 - v1);
            return 2.0 * (r0 + frac * (r1 - r0));
        }
    }
    2.0 * r_max
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ideal_probe_is_normalized_with_zero_phase_at_dc() {
        let probe =
            make_ideal_probe::<f64>(200.0, 25.0, 0.0, 0.0, (64, 64), (0.1, 0.1)).unwrap();
        assert!((probe.total_intensity() - 1.0).abs() < 1e-6);
        // DC component of the k-space probe is the plain sum; its phase is
        // chi(0) = 0.
        let sum: Complex<f64> = probe.modes.complex().unwrap().iter().sum();
        assert!(sum.im.abs() < 1e-9 * sum.re.abs());
        assert!(sum.re > 0.0);
    }

    #[test]
    fn defocus_broadens_the_probe() {
        let focused =
            make_ideal_probe::<f64>(200.0, 20.0, 0.0, 0.0, (64, 64), (0.15, 0.15)).unwrap();
        let defocused =
            make_ideal_probe::<f64>(200.0, 20.0, 100.0, 0.0, (64, 64), (0.15, 0.15)).unwrap();
        let f0 = intensity_fwhm_a(&focused);
        let f1 = intensity_fwhm_a(&defocused);
        assert!(f1 > f0, "expected defocus to broaden: {f0} vs {f1}");
    }

    #[test]
    fn aperture_beyond_nyquist_rejected() {
        let res = make_ideal_probe::<f64>(200.0, 200.0, 0.0, 0.0, (32, 32), (0.2, 0.2));
        assert!(matches!(res, Err(crate::error::PtychoError::Config(_))));
    }
}
