//! Fidelity losses, soft regularizers, and hard constraints.
//!
//! The two regularizers are the anisotropic total-variation loss
//!
//! ```text
//! L_tv(V) = (1/XYZ) sum [ l_xy (|dV/dx| + |dV/dy|) + l_z |dV/dz| ]
//! ```
//!
//! with non-periodic forward differences (boundary terms dropped), and the
//! surface-zero loss
//!
//! ```text
//! L_surf(V) = (l_surf / 2XY) ( sum |V[.,.,0]| + sum |V[.,.,Z-1]| )
//! ```
//!
//! Hard constraints (probe orthogonality, identical slices) are idempotent
//! projections applied to model outputs between iterations; gradients pass
//! straight through the unconstrained output.

mod eigh;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{PtychoError, Result};
use crate::tensor::{NodeId, Precision, Tape, Tensor};

/// Data-fidelity flavor. Amplitude MSE is the default; the Poisson
/// negative log-likelihood is opt-in for dose studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FidelityKind {
    #[default]
    AmplitudeMse,
    PoissonNll,
}

/// Weights of the soft losses.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_xy: f64,
    pub lambda_z: f64,
    pub lambda_surf: f64,
    pub fidelity: FidelityKind,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_xy: 0.0, lambda_z: 0.0, lambda_surf: 0.0, fidelity: FidelityKind::AmplitudeMse }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_xy", self.lambda_xy),
            ("lambda_z", self.lambda_z),
            ("lambda_surf", self.lambda_surf),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(PtychoError::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Fidelity between predicted and measured intensities (mean over all
/// elements). `measured` must be non-negative.
pub fn fidelity_loss<P: Precision>(
    tape: &mut Tape<P>,
    pred: NodeId,
    measured: &Tensor<P>,
    kind: FidelityKind,
) -> Result<NodeId> {
    if tape.value(pred).shape() != measured.shape() {
        return Err(PtychoError::shape(format!(
            "fidelity: pred {:?} vs measured {:?}",
            tape.value(pred).shape(),
            measured.shape()
        )));
    }
    let meas = measured.real()?;
    if meas.iter().any(|&x| x < P::zero()) {
        return Err(PtychoError::data("measured intensities contain negative values"));
    }
    match kind {
        FidelityKind::AmplitudeMse => {
            let amp = tape.sqrt_nonneg(pred)?;
            let meas_amp = Tensor::from_real(
                measured.shape().to_vec(),
                meas.iter().map(|&x| x.sqrt()).collect::<Vec<_>>(),
            )?;
            let m = tape.constant(meas_amp);
            let diff = tape.sub(amp, m)?;
            let sq = tape.abs2(diff)?;
            tape.mean(sq)
        }
        FidelityKind::PoissonNll => {
            let eps = P::of_f64(1e-9);
            let ln_pred = tape.ln_shift(pred, eps)?;
            let m = tape.constant(measured.clone());
            let weighted = tape.mul(m, ln_pred)?;
            let diff = tape.sub(pred, weighted)?;
            tape.mean(diff)
        }
    }
}

/// Anisotropic TV over a [Z,Y,X] volume node. Complex volumes are
/// penalized on phase and amplitude independently and summed.
pub fn tv_loss<P: Precision>(
    tape: &mut Tape<P>,
    volume: NodeId,
    lambda_xy: f64,
    lambda_z: f64,
) -> Result<NodeId> {
    let shape = tape.value(volume).shape().to_vec();
    if shape.len() != 3 {
        return Err(PtychoError::shape(format!("tv_loss expects [Z,Y,X], got {shape:?}")));
    }
    if tape.value(volume).is_complex() {
        let amp = tape.cabs(volume)?;
        let phase = tape.carg(volume)?;
        let a = tv_loss(tape, amp, lambda_xy, lambda_z)?;
        let p = tv_loss(tape, phase, lambda_xy, lambda_z)?;
        return tape.add(a, p);
    }
    let (z, y, x) = (shape[0], shape[1], shape[2]);
    let n = P::of_f64((x * y * z) as f64);
    let zero = tape.constant(Tensor::scalar(P::zero()));

    let mut in_plane = zero;
    if y > 1 {
        let hi = tape.crop_hw(volume, 1, 0, y - 1, x)?;
        let lo = tape.crop_hw(volume, 0, 0, y - 1, x)?;
        let dy = tape.sub(hi, lo)?;
        let s = tape.abs_sum(dy)?;
        in_plane = tape.add(in_plane, s)?;
    }
    if x > 1 {
        let hi = tape.crop_hw(volume, 0, 1, y, x - 1)?;
        let lo = tape.crop_hw(volume, 0, 0, y, x - 1)?;
        let dx = tape.sub(hi, lo)?;
        let s = tape.abs_sum(dx)?;
        in_plane = tape.add(in_plane, s)?;
    }
    let mut total = tape.scale(in_plane, P::of_f64(lambda_xy))?;
    if z > 1 {
        let hi = tape.slice_axis0(volume, 1, z - 1)?;
        let lo = tape.slice_axis0(volume, 0, z - 1)?;
        let dz = tape.sub(hi, lo)?;
        let s = tape.abs_sum(dz)?;
        let sz = tape.scale(s, P::of_f64(lambda_z))?;
        total = tape.add(total, sz)?;
    }
    let scaled = tape.scale(total, P::one() / n)?;
    tape.reshape(scaled, Vec::<usize>::new())
}

/// Surface-zero loss on the first and last slices of a [Z,Y,X] node.
pub fn surface_zero_loss<P: Precision>(
    tape: &mut Tape<P>,
    volume: NodeId,
    lambda_surf: f64,
) -> Result<NodeId> {
    let shape = tape.value(volume).shape().to_vec();
    if shape.len() != 3 {
        return Err(PtychoError::shape(format!("surface_zero expects [Z,Y,X], got {shape:?}")));
    }
    let (z, y, x) = (shape[0], shape[1], shape[2]);
    if z < 2 {
        return Err(PtychoError::contract("surface_zero_loss needs at least 2 slices"));
    }
    let l1_of_slice = |tape: &mut Tape<P>, start: usize| -> Result<NodeId> {
        let s = tape.slice_axis0(volume, start, 1)?;
        if tape.value(s).is_complex() {
            let m = tape.cabs(s)?;
            tape.sum(m)
        } else {
            tape.abs_sum(s)
        }
    };
    let top = l1_of_slice(tape, 0)?;
    let bottom = l1_of_slice(tape, z - 1)?;
    let both = tape.add(top, bottom)?;
    let scaled = tape.scale(both, P::of_f64(lambda_surf / (2.0 * (x * y) as f64)))?;
    tape.reshape(scaled, Vec::<usize>::new())
}

/// Orthogonalize probe modes [M,Ry,Rx] by diagonalizing their Gram
/// matrix: output modes are pairwise orthogonal, span the same subspace,
/// preserve total intensity, and are ordered by decreasing power.
pub fn orthogonalize_modes<P: Precision>(modes: &Tensor<P>) -> Result<Tensor<P>> {
    let shape = modes.shape().to_vec();
    if shape.len() != 3 {
        return Err(PtychoError::shape(format!("orthogonalize_modes expects [M,Ry,Rx], got {shape:?}")));
    }
    let m = shape[0];
    let n = shape[1] * shape[2];
    let a = modes.complex()?;
    let total = modes.sum_sq();
    if total <= P::zero() {
        return Err(PtychoError::contract("orthogonalize_modes: all-zero probe is degenerate"));
    }
    if m == 1 {
        return Ok(modes.clone());
    }
    // Gram matrix G = A A^H (Hermitian, M x M).
    let mut gram = vec![Complex::new(P::zero(), P::zero()); m * m];
    for i in 0..m {
        for j in 0..m {
            let mut acc = Complex::new(P::zero(), P::zero());
            for k in 0..n {
                acc += a[i * n + k] * a[j * n + k].conj();
            }
            gram[i * m + j] = acc;
        }
    }
    let (_, v) = eigh::eigh::<P>(&gram, m);
    // B = V^H A: rows are orthogonal with norms^2 equal to the eigenvalues.
    let mut b = vec![Complex::new(P::zero(), P::zero()); m * n];
    for row in 0..m {
        for j in 0..m {
            let w = v[j * m + row].conj();
            if w.norm_sqr() == P::zero() {
                continue;
            }
            for k in 0..n {
                b[row * n + k] += w * a[j * n + k];
            }
        }
    }
    Tensor::from_complex(shape, b)
}

/// Replace every slice of a [Z,Y,X] volume by the slice mean, making the
/// volume uniform along the beam. Idempotent.
pub fn tie_slices<P: Precision>(volume: &Tensor<P>) -> Result<Tensor<P>> {
    let shape = volume.shape().to_vec();
    if shape.len() != 3 {
        return Err(PtychoError::shape(format!("tie_slices expects [Z,Y,X], got {shape:?}")));
    }
    let z = shape[0];
    let plane = shape[1] * shape[2];
    if z == 1 {
        return Ok(volume.clone());
    }
    let inv_z = P::one() / P::of_f64(z as f64);
    match volume.data() {
        crate::tensor::Data::Real(v) => {
            let mut mean = vec![P::zero(); plane];
            for (i, &x) in v.iter().enumerate() {
                mean[i % plane] += x;
            }
            for x in &mut mean {
                *x *= inv_z;
            }
            let mut out = Vec::with_capacity(z * plane);
            for _ in 0..z {
                out.extend_from_slice(&mean);
            }
            Tensor::from_real(shape, out)
        }
        crate::tensor::Data::Complex(v) => {
            let mut mean = vec![Complex::new(P::zero(), P::zero()); plane];
            for (i, &x) in v.iter().enumerate() {
                mean[i % plane] += x;
            }
            for x in &mut mean {
                *x = *x * inv_z;
            }
            let mut out = Vec::with_capacity(z * plane);
            for _ in 0..z {
                out.extend_from_slice(&mean);
            }
            Tensor::from_complex(shape, out)
        }
    }
}

/// Gram-matrix orthogonality diagnostic: largest off-diagonal magnitude
/// relative to the trace.
pub fn gram_offdiag_ratio<P: Precision>(modes: &Tensor<P>) -> Result<f64> {
    let shape = modes.shape();
    let m = shape[0];
    let n = shape[1] * shape[2];
    let a = modes.complex()?;
    let mut trace = 0.0f64;
    let mut worst = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            let mut acc = Complex::new(0.0f64, 0.0);
            for k in 0..n {
                let x = a[i * n + k];
                let y = a[j * n + k];
                acc += Complex::new(x.re.as_f64(), x.im.as_f64())
                    * Complex::new(y.re.as_f64(), -y.im.as_f64());
            }
            if i == j {
                trace += acc.re;
            } else {
                worst = worst.max(acc.norm());
            }
        }
    }
    Ok(worst / trace.max(f64::MIN_POSITIVE))
}
