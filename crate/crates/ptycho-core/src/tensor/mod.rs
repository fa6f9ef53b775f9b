//! Dense real/complex tensors and the reverse-mode gradient tape.
//!
//! Conventions fixed repo-wide:
//! - `fft2` is the unnormalized forward DFT over the last two axes;
//!   `ifft2` divides by the element count of those axes.
//! - `conv2d` is cross-correlation (no kernel flip).
//! - The gradient stored for a complex parameter `z = a + ib` of a real
//!   scalar loss is `dL/da + i dL/db` (twice the Wirtinger conjugate
//!   derivative), so `z -= lr * grad` is a descent step and central finite
//!   differences on the real/imaginary parts match the stored parts
//!   directly.

mod fft;
mod kernels;
mod tape;

pub mod gradcheck;

pub use kernels::{compute_threads, set_compute_threads};
pub use tape::{NodeId, Tape};

use num_complex::Complex;
use num_traits::{Float, FloatConst};

use crate::error::{PtychoError, Result};

/// Element type of a tensor buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    Real32,
    Real64,
    Complex64,
    Complex128,
}

impl Dtype {
    pub fn is_complex(self) -> bool {
        matches!(self, Dtype::Complex64 | Dtype::Complex128)
    }

    /// Bytes per element as stored in containers (little-endian, complex
    /// interleaved re,im).
    pub fn byte_size(self) -> usize {
        match self {
            Dtype::Real32 => 4,
            Dtype::Real64 => 8,
            Dtype::Complex64 => 8,
            Dtype::Complex128 => 16,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::Real32 => 1,
            Dtype::Real64 => 2,
            Dtype::Complex64 => 3,
            Dtype::Complex128 => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            1 => Some(Dtype::Real32),
            2 => Some(Dtype::Real64),
            3 => Some(Dtype::Complex64),
            4 => Some(Dtype::Complex128),
            _ => None,
        }
    }
}

/// Floating-point precision the engine is instantiated at. `f32` is the
/// compute default; the `f64` path exists for gradient checks and for tests
/// with tight tolerances.
pub trait Precision:
    Float
    + FloatConst
    + rustfft::FftNum
    + num_traits::NumAssign
    + std::fmt::Display
    + std::fmt::Debug
    + Copy
    + Send
    + Sync
    + 'static
{
    const REAL_DTYPE: Dtype;
    const COMPLEX_DTYPE: Dtype;

    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Precision for f32 {
    const REAL_DTYPE: Dtype = Dtype::Real32;
    const COMPLEX_DTYPE: Dtype = Dtype::Complex64;

    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Precision for f64 {
    const REAL_DTYPE: Dtype = Dtype::Real64;
    const COMPLEX_DTYPE: Dtype = Dtype::Complex128;

    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Contiguous row-major buffer, real or complex.
#[derive(Debug, Clone, PartialEq)]
pub enum Data<P: Precision> {
    Real(Vec<P>),
    Complex(Vec<Complex<P>>),
}

impl<P: Precision> Data<P> {
    pub fn len(&self) -> usize {
        match self {
            Data::Real(v) => v.len(),
            Data::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_complex(&self) -> bool {
        matches!(self, Data::Complex(_))
    }
}

/// Dense multi-dimensional array participating in the gradient tape.
///
/// The shape is a list of extents; `[]` denotes a scalar. The buffer length
/// always equals the product of the extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<P: Precision> {
    shape: Vec<usize>,
    data: Data<P>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<P: Precision> Tensor<P> {
    pub fn from_real(shape: impl Into<Vec<usize>>, values: Vec<P>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != values.len() {
            return Err(PtychoError::shape(format!(
                "buffer length {} does not match shape {:?}",
                values.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data: Data::Real(values) })
    }

    pub fn from_complex(shape: impl Into<Vec<usize>>, values: Vec<Complex<P>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != values.len() {
            return Err(PtychoError::shape(format!(
                "buffer length {} does not match shape {:?}",
                values.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data: Data::Complex(values) })
    }

    pub fn zeros_real(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor { shape, data: Data::Real(vec![P::zero(); n]) }
    }

    pub fn zeros_complex(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor { shape, data: Data::Complex(vec![Complex::new(P::zero(), P::zero()); n]) }
    }

    pub fn full_real(shape: impl Into<Vec<usize>>, value: P) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor { shape, data: Data::Real(vec![value; n]) }
    }

    pub fn scalar(value: P) -> Self {
        Tensor { shape: vec![], data: Data::Real(vec![value]) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_complex(&self) -> bool {
        self.data.is_complex()
    }

    pub fn dtype(&self) -> Dtype {
        if self.is_complex() { P::COMPLEX_DTYPE } else { P::REAL_DTYPE }
    }

    pub fn data(&self) -> &Data<P> {
        &self.data
    }

    pub fn real(&self) -> Result<&[P]> {
        match &self.data {
            Data::Real(v) => Ok(v),
            Data::Complex(_) => Err(PtychoError::dtype("expected real tensor, got complex")),
        }
    }

    pub fn complex(&self) -> Result<&[Complex<P>]> {
        match &self.data {
            Data::Complex(v) => Ok(v),
            Data::Real(_) => Err(PtychoError::dtype("expected complex tensor, got real")),
        }
    }

    pub fn real_mut(&mut self) -> Result<&mut [P]> {
        match &mut self.data {
            Data::Real(v) => Ok(v),
            Data::Complex(_) => Err(PtychoError::dtype("expected real tensor, got complex")),
        }
    }

    pub fn complex_mut(&mut self) -> Result<&mut [Complex<P>]> {
        match &mut self.data {
            Data::Complex(v) => Ok(v),
            Data::Real(_) => Err(PtychoError::dtype("expected complex tensor, got real")),
        }
    }

    /// Scalar value of a 0-dimensional (or single-element) real tensor.
    pub fn scalar_value(&self) -> Result<P> {
        if self.numel() != 1 {
            return Err(PtychoError::shape(format!(
                "expected single-element tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.real()?[0])
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(PtychoError::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.numel(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Promote a real tensor to complex with zero imaginary part.
    pub fn to_complex(&self) -> Self {
        match &self.data {
            Data::Real(v) => Tensor {
                shape: self.shape.clone(),
                data: Data::Complex(v.iter().map(|&x| Complex::new(x, P::zero())).collect()),
            },
            Data::Complex(_) => self.clone(),
        }
    }

    /// Sum of squared moduli over all elements.
    pub fn sum_sq(&self) -> P {
        match &self.data {
            Data::Real(v) => v.iter().fold(P::zero(), |acc, &x| acc + x * x),
            Data::Complex(v) => v.iter().fold(P::zero(), |acc, z| acc + z.norm_sqr()),
        }
    }

    pub fn has_nan(&self) -> bool {
        match &self.data {
            Data::Real(v) => v.iter().any(|x| !x.is_finite()),
            Data::Complex(v) => v.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()),
        }
    }

    /// Convert elementwise to another precision.
    pub fn cast<Q: Precision>(&self) -> Tensor<Q> {
        let data = match &self.data {
            Data::Real(v) => Data::Real(v.iter().map(|&x| Q::of_f64(x.as_f64())).collect()),
            Data::Complex(v) => Data::Complex(
                v.iter()
                    .map(|z| Complex::new(Q::of_f64(z.re.as_f64()), Q::of_f64(z.im.as_f64())))
                    .collect(),
            ),
        };
        Tensor { shape: self.shape.clone(), data }
    }

    /// Bitwise equality (exact bit patterns, not semantic float equality).
    pub fn bit_eq(&self, other: &Self) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (Data::Real(a), Data::Real(b)) => a
                .iter()
                .zip(b)
                .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits()),
            (Data::Complex(a), Data::Complex(b)) => a.iter().zip(b).all(|(x, y)| {
                x.re.as_f64().to_bits() == y.re.as_f64().to_bits()
                    && x.im.as_f64().to_bits() == y.im.as_f64().to_bits()
            }),
            _ => false,
        }
    }

    /// Roll the last two axes periodically (value-level helper, used by
    /// tests and probe centering).
    pub fn roll_hw(&self, dy: i64, dx: i64) -> Self {
        let nd = self.shape.len();
        assert!(nd >= 2, "roll_hw needs at least 2 dims");
        let h = self.shape[nd - 2];
        let w = self.shape[nd - 1];
        let lead: usize = self.shape[..nd - 2].iter().product();
        let wrap = |i: i64, n: usize| -> usize {
            (((i % n as i64) + n as i64) % n as i64) as usize
        };
        let mut out = self.clone();
        for b in 0..lead {
            for y in 0..h {
                for x in 0..w {
                    let sy = wrap(y as i64 - dy, h);
                    let sx = wrap(x as i64 - dx, w);
                    let dst = (b * h + y) * w + x;
                    let src = (b * h + sy) * w + sx;
                    match (&mut out.data, &self.data) {
                        (Data::Real(o), Data::Real(s)) => o[dst] = s[src],
                        (Data::Complex(o), Data::Complex(s)) => o[dst] = s[src],
                        _ => unreachable!(),
                    }
                }
            }
        }
        out
    }
}

pub use fft::fft_freqs;
pub(crate) use fft::fft2_raw;
