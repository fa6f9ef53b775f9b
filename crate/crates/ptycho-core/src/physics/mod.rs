//! Mixed-state multislice ptychographic forward model.
//!
//! Conventions:
//! - Object volumes are `[Z, Y, X]`; probes are `[M, Ry, Rx]`; detector
//!   grid equals the probe grid.
//! - The probe is shifted (not the object) for sub-pixel scan positions,
//!   via the Fourier shift theorem; each scan position crops an Ry x Rx
//!   object patch around the rounded position and the residual goes into
//!   the probe shift.
//! - No propagation after the last slice: the exit plane is the last
//!   slice.

mod constants;
mod probe;

pub use constants::{electron_wavelength_a, interaction_constant_rad_per_va};
pub use probe::{intensity_fwhm_a, make_ideal_probe};

use num_complex::Complex;

use crate::error::{PtychoError, Result};
use crate::tensor::{fft_freqs, NodeId, Precision, Tape, Tensor};

/// Stack of mutually incoherent probe modes plus the optical metadata they
/// were synthesized from.
#[derive(Debug, Clone)]
pub struct ProbeState<P: Precision> {
    /// Complex modes [M, Ry, Rx].
    pub modes: Tensor<P>,
    pub energy_kev: f64,
    /// Real-space sampling in angstrom/pixel (dy, dx).
    pub sampling: (f64, f64),
    pub aperture_mrad: f64,
    /// Defocus C1 in angstroms.
    pub defocus_a: f64,
    /// Spherical aberration C3 in millimeters.
    pub c3_mm: f64,
}

impl<P: Precision> ProbeState<P> {
    pub fn num_modes(&self) -> usize {
        self.modes.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.modes.shape();
        (s[1], s[2])
    }

    pub fn total_intensity(&self) -> f64 {
        self.modes.sum_sq().as_f64()
    }
}

/// Sample representation flavors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectKind {
    /// Complex transmission function, used directly.
    ComplexTransmission,
    /// Real phase theta; transmission = exp(i theta).
    PurePhase,
    /// Real projected potential in V*angstrom; transmission =
    /// exp(i sigma_e V).
    Potential,
}

impl ObjectKind {
    pub fn is_complex(self) -> bool {
        matches!(self, ObjectKind::ComplexTransmission)
    }
}

/// Z x Y x X sample volume.
#[derive(Debug, Clone)]
pub struct ObjectVolume<P: Precision> {
    pub kind: ObjectKind,
    /// [Z, Y, X]; complex for `ComplexTransmission`, real otherwise.
    pub data: Tensor<P>,
    pub slice_thickness_a: f64,
    pub sampling: (f64, f64),
}

impl<P: Precision> ObjectVolume<P> {
    pub fn new(
        kind: ObjectKind,
        data: Tensor<P>,
        slice_thickness_a: f64,
        sampling: (f64, f64),
    ) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(PtychoError::shape(format!(
                "object volume must be [Z,Y,X], got {:?}",
                data.shape()
            )));
        }
        if data.is_complex() != kind.is_complex() {
            return Err(PtychoError::dtype("object data realness does not match its kind"));
        }
        Ok(ObjectVolume { kind, data, slice_thickness_a, sampling })
    }

    pub fn num_slices(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn plane(&self) -> (usize, usize) {
        let s = self.data.shape();
        (s[1], s[2])
    }
}

/// Scan positions and detector geometry. Positions are (y, x) in
/// angstroms relative to the object pixel grid origin.
#[derive(Debug, Clone)]
pub struct ScanGeometry {
    pub positions_a: Vec<[f64; 2]>,
    pub detector: (usize, usize),
}

impl ScanGeometry {
    pub fn len(&self) -> usize {
        self.positions_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions_a.is_empty()
    }
}

/// Fresnel propagator between adjacent slices: exp(-i pi lambda |k|^2 dz)
/// sampled on the probe's reciprocal grid.
#[derive(Debug, Clone)]
pub struct Propagator<P: Precision> {
    /// Complex [Ry, Rx] transfer factor.
    pub factor: Tensor<P>,
    pub dz_a: f64,
}

/// Unitary phase-only Fresnel factor, optionally band-limited at 2/3
/// Nyquist (off by default; the mask zeroes the factor outside the band).
pub fn make_propagator<P: Precision>(
    dz_a: f64,
    energy_kev: f64,
    shape: (usize, usize),
    sampling: (f64, f64),
    band_limit: bool,
) -> Propagator<P> {
    let lambda = electron_wavelength_a(energy_kev);
    let (h, w) = shape;
    let ky = fft_freqs(h, sampling.0);
    let kx = fft_freqs(w, sampling.1);
    let k_nyq = (0.5 / sampling.0).min(0.5 / sampling.1);
    let k_band = 2.0 / 3.0 * k_nyq;
    let mut buf = Vec::with_capacity(h * w);
    for &gy in &ky {
        for &gx in &kx {
            let k2 = gy * gy + gx * gx;
            let phase = -std::f64::consts::PI * lambda * k2 * dz_a;
            let mut z = Complex::new(P::of_f64(phase.cos()), P::of_f64(phase.sin()));
            if band_limit && k2.sqrt() > k_band {
                z = Complex::new(P::zero(), P::zero());
            }
            buf.push(z);
        }
    }
    Propagator { factor: Tensor::from_complex(vec![h, w], buf).unwrap(), dz_a }
}

/// Crop origin and sub-pixel residual for one scan position. The rounded
/// position becomes the patch center; the residual (in angstroms) is what
/// the probe gets shifted by.
pub fn split_position(
    pos_a: [f64; 2],
    sampling: (f64, f64),
    obj_plane: (usize, usize),
    probe_grid: (usize, usize),
) -> Result<((usize, usize), (f64, f64))> {
    let cy = (pos_a[0] / sampling.0).round() as i64;
    let cx = (pos_a[1] / sampling.1).round() as i64;
    let oy = cy - probe_grid.0 as i64 / 2;
    let ox = cx - probe_grid.1 as i64 / 2;
    if oy < 0
        || ox < 0
        || oy + probe_grid.0 as i64 > obj_plane.0 as i64
        || ox + probe_grid.1 as i64 > obj_plane.1 as i64
    {
        return Err(PtychoError::config(format!(
            "scan position ({}, {}) A puts the probe window outside the object field of view",
            pos_a[0], pos_a[1]
        )));
    }
    let res_y = pos_a[0] - cy as f64 * sampling.0;
    let res_x = pos_a[1] - cx as f64 * sampling.1;
    Ok(((oy as usize, ox as usize), (res_y, res_x)))
}

/// Everything constant across positions that the differentiable forward
/// pass needs: shift ramps, the propagator, and shapes.
#[derive(Debug, Clone)]
pub struct ForwardModel<P: Precision> {
    pub probe_grid: (usize, usize),
    pub obj_plane: (usize, usize),
    pub num_slices: usize,
    pub sampling: (f64, f64),
    pub energy_kev: f64,
    propagator: Option<Tensor<P>>,
    /// -2 pi k_y and -2 pi k_x grids [Ry, Rx] (rad per angstrom of shift).
    ramp_y: Tensor<P>,
    ramp_x: Tensor<P>,
}

impl<P: Precision> ForwardModel<P> {
    pub fn new(
        probe_grid: (usize, usize),
        obj_plane: (usize, usize),
        num_slices: usize,
        slice_thickness_a: f64,
        energy_kev: f64,
        sampling: (f64, f64),
        band_limit: bool,
    ) -> Result<Self> {
        if probe_grid.0 > obj_plane.0 || probe_grid.1 > obj_plane.1 {
            return Err(PtychoError::config("probe grid larger than object plane"));
        }
        let (h, w) = probe_grid;
        let ky = fft_freqs(h, sampling.0);
        let kx = fft_freqs(w, sampling.1);
        let mut gy = Vec::with_capacity(h * w);
        let mut gx = Vec::with_capacity(h * w);
        let tau = -2.0 * std::f64::consts::PI;
        for y in 0..h {
            for x in 0..w {
                gy.push(P::of_f64(tau * ky[y]));
                gx.push(P::of_f64(tau * kx[x]));
            }
        }
        let propagator = if num_slices > 1 {
            Some(
                make_propagator::<P>(slice_thickness_a, energy_kev, probe_grid, sampling, band_limit)
                    .factor,
            )
        } else {
            None
        };
        Ok(ForwardModel {
            probe_grid,
            obj_plane,
            num_slices,
            sampling,
            energy_kev,
            propagator,
            ramp_y: Tensor::from_real(vec![h, w], gy)?,
            ramp_x: Tensor::from_real(vec![h, w], gx)?,
        })
    }

    /// Fourier-shift the probe modes by (dy, dx) angstroms, both given as
    /// single-element real nodes so positions stay differentiable.
    pub fn shift_probe_node(
        &self,
        tape: &mut Tape<P>,
        modes: NodeId,
        dy_a: NodeId,
        dx_a: NodeId,
    ) -> Result<NodeId> {
        let gy = tape.constant(self.ramp_y.clone());
        let gx = tape.constant(self.ramp_x.clone());
        let py = tape.mul_scalar(dy_a, gy)?;
        let px = tape.mul_scalar(dx_a, gx)?;
        let ramp = tape.add(py, px)?;
        let zero = tape.constant(Tensor::zeros_real(self.ramp_y.shape().to_vec()));
        let i_ramp = tape.make_complex(zero, ramp)?;
        let factor = tape.cexp(i_ramp)?;
        let f = tape.fft2(modes)?;
        let shifted = tape.mul_bcast0(factor, f)?;
        tape.ifft2(shifted)
    }

    /// Multislice exit wave: psi <- P[T_z psi] over the slices of a
    /// [Z, Ry, Rx] transmission patch, with no propagation after the last
    /// slice.
    pub fn multislice_node(
        &self,
        tape: &mut Tape<P>,
        modes: NodeId,
        trans_patch: NodeId,
    ) -> Result<NodeId> {
        let z = tape.value(trans_patch).shape()[0];
        if z != self.num_slices {
            return Err(PtychoError::contract(format!(
                "transmission has {z} slices but the model was built for {}",
                self.num_slices
            )));
        }
        if z > 1 && self.propagator.is_none() {
            return Err(PtychoError::contract("multi-slice object without a propagator"));
        }
        let (h, w) = self.probe_grid;
        let mut psi = modes;
        for zi in 0..z {
            let t3 = tape.slice_axis0(trans_patch, zi, 1)?;
            let t = tape.reshape(t3, vec![h, w])?;
            psi = tape.mul_bcast0(t, psi)?;
            if zi + 1 < z {
                let p = tape.constant(self.propagator.clone().unwrap());
                let f = tape.fft2(psi)?;
                let pf = tape.mul_bcast0(p, f)?;
                psi = tape.ifft2(pf)?;
            }
        }
        Ok(psi)
    }

    /// Far-field intensity of one position: crop the transmission patch,
    /// shift the probe by the residual, multislice, detect. Returns a
    /// real [Ky, Kx] node.
    #[allow(clippy::too_many_arguments)]
    pub fn intensity_node(
        &self,
        tape: &mut Tape<P>,
        modes: NodeId,
        transmission: NodeId,
        crop: (usize, usize),
        dy_a: NodeId,
        dx_a: NodeId,
    ) -> Result<NodeId> {
        let (h, w) = self.probe_grid;
        let patch = tape.crop_hw(transmission, crop.0, crop.1, h, w)?;
        let shifted = self.shift_probe_node(tape, modes, dy_a, dx_a)?;
        let exit = self.multislice_node(tape, shifted, patch)?;
        let far = tape.fft2(exit)?;
        let per_mode = tape.abs2(far)?;
        tape.sum_axis0(per_mode)
    }
}

/// Convert an object node to complex transmission on the tape.
pub fn transmission_node<P: Precision>(
    tape: &mut Tape<P>,
    object: NodeId,
    kind: ObjectKind,
    energy_kev: f64,
) -> Result<NodeId> {
    match kind {
        ObjectKind::ComplexTransmission => Ok(object),
        ObjectKind::PurePhase => {
            let zero = tape.constant(Tensor::zeros_real(tape.value(object).shape().to_vec()));
            let i_theta = tape.make_complex(zero, object)?;
            tape.cexp(i_theta)
        }
        ObjectKind::Potential => {
            let sigma = P::of_f64(interaction_constant_rad_per_va(energy_kev));
            let theta = tape.scale(object, sigma)?;
            let zero = tape.constant(Tensor::zeros_real(tape.value(object).shape().to_vec()));
            let i_theta = tape.make_complex(zero, theta)?;
            tape.cexp(i_theta)
        }
    }
}

/// Value-level forward prediction for a batch of scan positions:
/// I(k) = sum_m |F psi_m,exit|^2. Used by the simulator and by tests;
/// the engine builds the same graph with learnable leaves.
pub fn predict_intensities<P: Precision>(
    probe: &ProbeState<P>,
    object: &ObjectVolume<P>,
    geometry: &ScanGeometry,
    batch: &[usize],
) -> Result<Tensor<P>> {
    if probe.sampling != object.sampling {
        return Err(PtychoError::config("probe and object sampling differ"));
    }
    if geometry.detector != probe.grid() {
        return Err(PtychoError::config(
            "detector grid must equal the probe grid (no resampling implemented)",
        ));
    }
    let model = ForwardModel::<P>::new(
        probe.grid(),
        object.plane(),
        object.num_slices(),
        object.slice_thickness_a,
        probe.energy_kev,
        object.sampling,
        false,
    )?;
    let (h, w) = probe.grid();
    let mut out = Vec::with_capacity(batch.len() * h * w);
    for &idx in batch {
        let pos = *geometry
            .positions_a
            .get(idx)
            .ok_or_else(|| PtychoError::data(format!("batch index {idx} out of range")))?;
        let (crop, residual) =
            split_position(pos, object.sampling, object.plane(), probe.grid())?;
        let mut tape = Tape::<P>::new();
        let modes = tape.constant(probe.modes.clone());
        let obj = tape.constant(object.data.clone());
        let trans = transmission_node(&mut tape, obj, object.kind, probe.energy_kev)?;
        let dy = tape.constant(Tensor::scalar(P::of_f64(residual.0)));
        let dx = tape.constant(Tensor::scalar(P::of_f64(residual.1)));
        let intensity = model.intensity_node(&mut tape, modes, trans, crop, dy, dx)?;
        out.extend_from_slice(tape.value(intensity).real()?);
    }
    Tensor::from_real(vec![batch.len(), h, w], out)
}
