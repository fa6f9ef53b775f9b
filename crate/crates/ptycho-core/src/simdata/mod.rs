//! Synthetic ground-truth phantoms and 4-D dataset generation.
//!
//! Phantoms render atoms as species-dependent 2-D Gaussians rather than
//! parameterized scattering factors; they exercise every reconstruction
//! property at desk scale but are not quantitative scattering
//! simulations.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{PtychoError, Result};
use crate::physics::{
    intensity_fwhm_a, make_ideal_probe, predict_intensities, ObjectKind, ObjectVolume,
    ProbeState, ScanGeometry,
};
use crate::tensor::{fft2_raw, Precision, Tensor};

/// One rendered atom site.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Atom {
    pub species: String,
    pub y_a: f64,
    pub x_a: f64,
    pub z_a: f64,
}

/// Ground-truth object plus the atom list it was rendered from.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub object: ObjectVolume<f64>,
    pub atoms: Vec<Atom>,
    pub label: String,
}

/// Probe synthesis parameters carried in dataset headers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeRecipe {
    pub energy_kev: f64,
    pub aperture_mrad: f64,
    pub defocus_a: f64,
    pub c3_mm: f64,
    pub shape: usize,
}

impl Default for ProbeRecipe {
    fn default() -> Self {
        ProbeRecipe { energy_kev: 200.0, aperture_mrad: 25.0, defocus_a: 0.0, c3_mm: 0.0, shape: 32 }
    }
}

impl ProbeRecipe {
    pub fn build<P: Precision>(&self, sampling: (f64, f64)) -> Result<ProbeState<P>> {
        make_ideal_probe(
            self.energy_kev,
            self.aperture_mrad,
            self.defocus_a,
            self.c3_mm,
            (self.shape, self.shape),
            sampling,
        )
    }
}

/// N scan positions with recorded diffraction intensities and everything
/// needed to reconstruct: geometry, probe recipe, and (for synthetic
/// data) the ground truth object.
#[derive(Debug, Clone)]
pub struct Dataset4D {
    /// Recorded intensities [N, Ky, Kx].
    pub patterns: Tensor<f32>,
    pub geometry: ScanGeometry,
    /// Object plane (Y, X) in pixels the positions refer to.
    pub object_plane: (usize, usize),
    pub sampling: (f64, f64),
    pub probe: ProbeRecipe,
    pub num_slices: usize,
    pub slice_thickness_a: f64,
    /// Electrons per square angstrom; `None` means noiseless.
    pub dose: Option<f64>,
    pub seed: u64,
    pub scan_shape: (usize, usize),
    pub step_a: (f64, f64),
    pub truth: Option<ObjectVolume<f64>>,
    pub label: String,
}

impl Dataset4D {
    pub fn num_patterns(&self) -> usize {
        self.patterns.shape()[0]
    }

    pub fn pattern(&self, idx: usize) -> Result<Tensor<f32>> {
        let s = self.patterns.shape();
        let n = s[1] * s[2];
        Ok(Tensor::from_real(
            vec![s[1], s[2]],
            self.patterns.real()?[idx * n..(idx + 1) * n].to_vec(),
        )?)
    }
}

fn add_gaussian(data: &mut [f64], plane: (usize, usize), sampling: (f64, f64), y0: f64, x0: f64, amp: f64, sigma: f64) {
    let (h, w) = plane;
    let reach = (4.0 * sigma / sampling.0).ceil() as i64;
    let cy = (y0 / sampling.0).round() as i64;
    let cx = (x0 / sampling.1).round() as i64;
    for iy in (cy - reach).max(0)..(cy + reach + 1).min(h as i64) {
        for ix in (cx - reach).max(0)..(cx + reach + 1).min(w as i64) {
            let dy = iy as f64 * sampling.0 - y0;
            let dx = ix as f64 * sampling.1 - x0;
            let r2 = dy * dy + dx * dx;
            data[iy as usize * w + ix as usize] += amp * (-r2 / (2.0 * sigma * sigma)).exp();
        }
    }
}

/// Low-pass-filtered random texture with the given RMS amplitude,
/// emulating an amorphous substrate.
fn substrate_texture(plane: (usize, usize), sampling: (f64, f64), rms: f64, k_cut: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = plane;
    let mut field: Vec<Complex<f64>> =
        (0..h * w).map(|_| Complex::new(rng.random_range(-1.0..1.0), 0.0)).collect();
    fft2_raw(&mut field, 1, h, w, false);
    let ky = crate::tensor::fft_freqs(h, sampling.0);
    let kx = crate::tensor::fft_freqs(w, sampling.1);
    for y in 0..h {
        for x in 0..w {
            let k2 = ky[y] * ky[y] + kx[x] * kx[x];
            field[y * w + x] *= (-k2 / (2.0 * k_cut * k_cut)).exp();
        }
    }
    fft2_raw(&mut field, 1, h, w, true);
    let n = (h * w) as f64;
    let vals: Vec<f64> = field.iter().map(|z| z.re / n).collect();
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 0.0 { rms / var.sqrt() } else { 0.0 };
    // Shift positive so the substrate adds density rather than subtracting.
    vals.iter().map(|v| (v - mean) * scale + rms * 2.0).collect()
}

/// Gold-nanoparticle-style phantom: an FCC-like atom cluster inside a
/// spherical shape function on a filtered-noise substrate. Pure-phase,
/// single slice, with a deliberately strong low-frequency bulk component.
pub fn make_nanoparticle_phantom(
    size: usize,
    sampling: (f64, f64),
    radius_a: f64,
    substrate_rms: f64,
    seed: u64,
) -> Result<Phantom> {
    let fov = size as f64 * sampling.0;
    if radius_a >= fov / 2.0 {
        return Err(PtychoError::config("particle radius must be below half the field of view"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phase = substrate_texture((size, size), sampling, substrate_rms, 0.35, &mut rng);

    let mut atoms = Vec::new();
    let center = fov / 2.0;
    if radius_a > 0.0 {
        // FCC-like cluster, toy lattice constant so a desk-scale particle
        // holds a recognizable number of atoms.
        let a0 = 1.2f64;
        let basis = [[0.0, 0.0, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]];
        let cells = (radius_a / a0).ceil() as i64 + 1;
        for cy in -cells..=cells {
            for cx in -cells..=cells {
                for cz in -cells..=cells {
                    for b in &basis {
                        let y = (cy as f64 + b[0]) * a0;
                        let x = (cx as f64 + b[1]) * a0;
                        let z = (cz as f64 + b[2]) * a0;
                        if y * y + x * x + z * z <= radius_a * radius_a {
                            atoms.push(Atom {
                                species: "Au".into(),
                                y_a: center + y,
                                x_a: center + x,
                                z_a: z,
                            });
                        }
                    }
                }
            }
        }
        // Projected atomic peaks.
        for atom in &atoms {
            add_gaussian(&mut phase, (size, size), sampling, atom.y_a, atom.x_a, 0.35, 0.22);
        }
        // Bulk shape function: projected sphere thickness. This is the
        // low-frequency component that makes convergence hard.
        for iy in 0..size {
            for ix in 0..size {
                let dy = iy as f64 * sampling.0 - center;
                let dx = ix as f64 * sampling.1 - center;
                let r2 = radius_a * radius_a - dy * dy - dx * dx;
                if r2 > 0.0 {
                    phase[iy * size + ix] += 0.25 * 2.0 * r2.sqrt() / radius_a;
                }
            }
        }
    }

    // Keep phase well inside (-pi, pi).
    let max = phase.iter().cloned().fold(0.0f64, f64::max);
    if max > 1.8 {
        let s = 1.8 / max;
        for v in &mut phase {
            *v *= s;
        }
    }
    let object = ObjectVolume::new(
        ObjectKind::PurePhase,
        Tensor::from_real(vec![1, size, size], phase)?,
        1.0,
        sampling,
    )?;
    Ok(Phantom { object, atoms, label: "nanoparticle".into() })
}

/// Two twisted hexagonal atom sheets at the given interlayer spacing,
/// rendered into a multi-slice potential volume.
pub fn make_bilayer_phantom(
    size: usize,
    sampling: (f64, f64),
    spacing_a: f64,
    twist_deg: f64,
    z_slices: usize,
    slice_thickness_a: f64,
) -> Result<Phantom> {
    let depth = z_slices as f64 * slice_thickness_a;
    if spacing_a >= depth {
        return Err(PtychoError::config(format!(
            "interlayer spacing {spacing_a} A exceeds the {depth} A volume depth"
        )));
    }
    let mid = z_slices as f64 / 2.0;
    let iz1 = (mid - spacing_a / (2.0 * slice_thickness_a)).round() as usize;
    let iz2 = iz1 + (spacing_a / slice_thickness_a).round() as usize;
    if iz2 >= z_slices {
        return Err(PtychoError::config("layers do not fit inside the volume"));
    }

    let fov = size as f64 * sampling.0;
    let mut volume = vec![0.0f64; z_slices * size * size];
    let mut atoms = Vec::new();
    // Hexagonal sheet: lattice constant scaled to show several cells.
    let a0 = 2.4f64;
    let center = fov / 2.0;
    let render_layer = |iz: usize, angle_deg: f64, volume: &mut Vec<f64>, atoms: &mut Vec<Atom>| {
        let ang = angle_deg.to_radians();
        let (s, c) = (ang.sin(), ang.cos());
        let reach = (fov / a0).ceil() as i64 + 2;
        // Two-site basis like a transition-metal dichalcogenide sheet.
        let basis = [(0.0f64, 0.0f64, "W", 900.0, 0.26), (0.5, 0.5f64 / 3.0_f64.sqrt() * 2.0, "Se", 520.0, 0.24)];
        for i in -reach..=reach {
            for j in -reach..=reach {
                for (bu, bv, species, amp, sigma) in &basis {
                    // Hexagonal axes -> cartesian.
                    let u = (i as f64 + bu) * a0;
                    let v = (j as f64 + bv) * a0;
                    let x0 = u + 0.5 * v;
                    let y0 = v * 3.0f64.sqrt() / 2.0;
                    // Rotate by the twist and center.
                    let xr = c * x0 - s * y0 + center;
                    let yr = s * x0 + c * y0 + center;
                    if yr < -1.0 || yr > fov + 1.0 || xr < -1.0 || xr > fov + 1.0 {
                        continue;
                    }
                    let plane =
                        &mut volume[iz * size * size..(iz + 1) * size * size];
                    add_gaussian(plane, (size, size), sampling, yr, xr, *amp, *sigma);
                    atoms.push(Atom {
                        species: (*species).into(),
                        y_a: yr,
                        x_a: xr,
                        z_a: iz as f64 * slice_thickness_a,
                    });
                }
            }
        }
    };
    render_layer(iz1, 0.0, &mut volume, &mut atoms);
    render_layer(iz2, twist_deg, &mut volume, &mut atoms);

    let object = ObjectVolume::new(
        ObjectKind::Potential,
        Tensor::from_real(vec![z_slices, size, size], volume)?,
        slice_thickness_a,
        sampling,
    )?;
    Ok(Phantom { object, atoms, label: "bilayer".into() })
}

/// Single-spacing sinusoidal lattice used as the information-limit
/// oracle: its power spectrum peaks exactly at 1/d.
pub fn make_lattice_phantom(size: usize, sampling: (f64, f64), d_a: f64) -> Result<Phantom> {
    if d_a <= 2.0 * sampling.0.max(sampling.1) {
        return Err(PtychoError::config(format!(
            "lattice spacing {d_a} A is at or below the Nyquist limit"
        )));
    }
    let mut phase = vec![0.0f64; size * size];
    let tau = 2.0 * std::f64::consts::PI;
    for iy in 0..size {
        for ix in 0..size {
            let y = iy as f64 * sampling.0;
            let x = ix as f64 * sampling.1;
            phase[iy * size + ix] = 0.25 * ((tau * x / d_a).cos() + (tau * y / d_a).cos()) + 0.5;
        }
    }
    let object = ObjectVolume::new(
        ObjectKind::PurePhase,
        Tensor::from_real(vec![1, size, size], phase)?,
        1.0,
        sampling,
    )?;
    Ok(Phantom { object, atoms: Vec::new(), label: format!("lattice-{d_a}A") })
}

/// Raster scan centered in the object plane.
pub fn raster_scan(
    object_plane: (usize, usize),
    sampling: (f64, f64),
    shape: (usize, usize),
    step_a: (f64, f64),
    detector: (usize, usize),
) -> ScanGeometry {
    let cy = object_plane.0 as f64 * sampling.0 / 2.0;
    let cx = object_plane.1 as f64 * sampling.1 / 2.0;
    let mut positions = Vec::with_capacity(shape.0 * shape.1);
    for iy in 0..shape.0 {
        for ix in 0..shape.1 {
            positions.push([
                cy + (iy as f64 - (shape.0 as f64 - 1.0) / 2.0) * step_a.0,
                cx + (ix as f64 - (shape.1 as f64 - 1.0) / 2.0) * step_a.1,
            ]);
        }
    }
    ScanGeometry { positions_a: positions, detector }
}

/// Effective probe diameter for the scan-overlap check: twice the radius
/// containing 90% of the intensity.
pub fn probe_diameter_a<P: Precision>(probe: &ProbeState<P>) -> f64 {
    let (h, w) = probe.grid();
    let modes = probe.modes.complex().unwrap();
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let mut by_r: Vec<(f64, f64)> = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut i_sum = 0.0f64;
            for m in 0..probe.num_modes() {
                i_sum += modes[(m * h + y) * w + x].norm_sqr().as_f64();
            }
            let ry = (y as f64 - cy) * probe.sampling.0;
            let rx = (x as f64 - cx) * probe.sampling.1;
            by_r.push(((ry * ry + rx * rx).sqrt(), i_sum));
        }
    }
    by_r.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total: f64 = by_r.iter().map(|&(_, i)| i).sum();
    let mut acc = 0.0;
    for &(r, i) in &by_r {
        acc += i;
        if acc >= 0.9 * total {
            return (2.0 * r).max(intensity_fwhm_a(probe));
        }
    }
    2.0 * by_r.last().map(|&(r, _)| r).unwrap_or(0.0)
}

/// Forward-simulate a 4-D dataset from a phantom: predict intensities,
/// scale so each pattern carries dose * (scan step area) electrons, and
/// Poisson-sample unless the dose is infinite. Poisson streams are
/// per-position (seed, index), so parallel generation would equal serial
/// generation.
pub fn simulate_dataset(
    phantom: &Phantom,
    probe_recipe: ProbeRecipe,
    scan_shape: (usize, usize),
    step_a: (f64, f64),
    dose: Option<f64>,
    seed: u64,
) -> Result<Dataset4D> {
    if let Some(d) = dose {
        if d <= 0.0 || !d.is_finite() {
            return Err(PtychoError::config("dose must be positive (or omitted for noiseless)"));
        }
    }
    let sampling = phantom.object.sampling;
    let probe: ProbeState<f64> = probe_recipe.build(sampling)?;
    let diameter = probe_diameter_a(&probe);
    if step_a.0 >= diameter || step_a.1 >= diameter {
        return Err(PtychoError::config(format!(
            "scan step {:?} A must stay below the probe diameter {diameter:.2} A for overlap",
            step_a
        )));
    }
    let plane = phantom.object.plane();
    let geometry = raster_scan(plane, sampling, scan_shape, step_a, probe.grid());
    let batch: Vec<usize> = (0..geometry.len()).collect();
    let clean = predict_intensities(&probe, &phantom.object, &geometry, &batch)?;

    let counts_per_pattern = dose.map(|d| d * step_a.0 * step_a.1);
    let (ky, kx) = probe.grid();
    let n = ky * kx;
    let clean_v = clean.real()?;
    let mut patterns = Vec::with_capacity(batch.len() * n);
    match counts_per_pattern {
        None => {
            for &v in clean_v {
                patterns.push(v as f32);
            }
        }
        Some(counts) => {
            // Unit-intensity probe: a pattern of a non-absorbing object
            // sums to 1, so this global factor yields `counts` per pattern.
            for (idx, _) in batch.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(idx as u64 + 1);
                for &v in &clean_v[idx * n..(idx + 1) * n] {
                    let lambda = (v * counts).max(0.0);
                    let sample = if lambda > 0.0 {
                        Poisson::new(lambda).map_err(|e| {
                            PtychoError::data(format!("poisson parameter error: {e}"))
                        })?
                        .sample(&mut rng)
                    } else {
                        0.0
                    };
                    patterns.push(sample as f32);
                }
            }
        }
    }

    Ok(Dataset4D {
        patterns: Tensor::from_real(vec![batch.len(), ky, kx], patterns)?,
        geometry,
        object_plane: plane,
        sampling,
        probe: probe_recipe,
        num_slices: phantom.object.num_slices(),
        slice_thickness_a: phantom.object.slice_thickness_a,
        dose,
        seed,
        scan_shape,
        step_a,
        truth: Some(phantom.object.clone()),
        label: phantom.label.clone(),
    })
}
