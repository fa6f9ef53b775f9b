//! Reverse-mode gradient tape over dense real/complex tensors.
//!
//! Nodes are recorded in topological order (every node after its inputs)
//! and owned by the tape; recorded values are never mutated. `backward`
//! sweeps the node list once in reverse, accumulating gradients additively
//! across fan-out. A tape is single-owner; batches that want parallelism
//! run on independent tapes and merge leaf gradients in index order.

use num_complex::Complex;

use super::kernels::{
    conv2d_backward_input, conv2d_backward_input_complex, conv2d_backward_kernel,
    conv2d_backward_kernel_complex, conv2d_forward, conv2d_forward_complex, conv2d_out_shape,
    upsample2x_backward, upsample2x_forward, ConvSpec,
};
use super::{fft2_raw, numel, Data, Precision, Tensor};
use crate::error::{PtychoError, Result};

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<P: Precision> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, P),
    MulScalar { scalar: NodeId, tensor: NodeId },
    MulBcast0 { small: NodeId, big: NodeId },
    BiasAdd { x: NodeId, bias: NodeId },
    Fft2(NodeId),
    Ifft2(NodeId),
    Conv2d { x: NodeId, kernel: NodeId, spec: ConvSpec },
    Upsample2x(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    SqrtNonneg(NodeId),
    LnShift(NodeId, P),
    Abs2(NodeId),
    CAbs(NodeId),
    CArg(NodeId),
    Cexp(NodeId),
    MakeComplex { re: NodeId, im: NodeId },
    Sum(NodeId),
    Mean(NodeId),
    AbsSum(NodeId),
    SumAxis0(NodeId),
    Concat0(Vec<NodeId>),
    SliceAxis0 { x: NodeId, start: usize, len: usize },
    CropHw { x: NodeId, off_y: usize, off_x: usize, out_h: usize, out_w: usize },
    PadHw { x: NodeId, before_y: usize, before_x: usize, out_h: usize, out_w: usize },
    Reshape(NodeId),
    StraightThrough(NodeId),
}

#[derive(Debug)]
struct Node<P: Precision> {
    value: Tensor<P>,
    op: Op<P>,
    needs_grad: bool,
    grad: Option<Tensor<P>>,
}

#[derive(Debug, Default)]
pub struct Tape<P: Precision> {
    nodes: Vec<Node<P>>,
    consumed: bool,
}

fn softplus_scalar<P: Precision>(x: P) -> P {
    // Overflow-safe branch: for large x, ln(1+e^x) = x to machine precision.
    if x > P::of_f64(20.0) {
        x
    } else {
        (P::one() + x.exp()).ln()
    }
}

fn sigmoid_scalar<P: Precision>(x: P) -> P {
    P::one() / (P::one() + (-x).exp())
}

impl<P: Precision> Tape<P> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<P> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<P>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Tensor<P>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<P>) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<P>, op: Op<P>, needs_grad: bool) -> NodeId {
        debug_assert!(!self.consumed, "tape already consumed by backward");
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, needs_grad, grad: None });
        id
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            return Err(PtychoError::contract("tape already consumed by backward"));
        }
        Ok(())
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(PtychoError::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn same_realness(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).is_complex() != self.value(b).is_complex() {
            return Err(PtychoError::dtype(format!("{what}: mixed real/complex operands")));
        }
        Ok(())
    }

    // ── elementwise binary ──────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        self.same_shape(a, b, "add")?;
        self.same_realness(a, b, "add")?;
        let value = match (self.value(a).data(), self.value(b).data()) {
            (Data::Real(x), Data::Real(y)) => Tensor::from_real(
                self.value(a).shape().to_vec(),
                x.iter().zip(y).map(|(&p, &q)| p + q).collect(),
            )?,
            (Data::Complex(x), Data::Complex(y)) => Tensor::from_complex(
                self.value(a).shape().to_vec(),
                x.iter().zip(y).map(|(&p, &q)| p + q).collect(),
            )?,
            _ => unreachable!(),
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        self.same_shape(a, b, "sub")?;
        self.same_realness(a, b, "sub")?;
        let value = match (self.value(a).data(), self.value(b).data()) {
            (Data::Real(x), Data::Real(y)) => Tensor::from_real(
                self.value(a).shape().to_vec(),
                x.iter().zip(y).map(|(&p, &q)| p - q).collect(),
            )?,
            (Data::Complex(x), Data::Complex(y)) => Tensor::from_complex(
                self.value(a).shape().to_vec(),
                x.iter().zip(y).map(|(&p, &q)| p - q).collect(),
            )?,
            _ => unreachable!(),
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        self.same_shape(a, b, "mul")?;
        self.same_realness(a, b, "mul")?;
        let value = match (self.value(a).data(), self.value(b).data()) {
            (Data::Real(x), Data::Real(y)) => Tensor::from_real(
                self.value(a).shape().to_vec(),
                x.iter().zip(y).map(|(&p, &q)| p * q).collect(),
            )?,
            (Data::Complex(x), Data::Complex(y)) => Tensor::from_complex(
                self.value(a).shape().to_vec(),
                x.iter().zip(y).map(|(&p, &q)| p * q).collect(),
            )?,
            _ => unreachable!(),
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// Multiply by a real constant.
    pub fn scale(&mut self, x: NodeId, factor: P) -> Result<NodeId> {
        self.check_live()?;
        let value = match self.value(x).data() {
            Data::Real(v) => {
                Tensor::from_real(self.value(x).shape().to_vec(), v.iter().map(|&p| p * factor).collect())?
            }
            Data::Complex(v) => Tensor::from_complex(
                self.value(x).shape().to_vec(),
                v.iter().map(|&p| p * factor).collect(),
            )?,
        };
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Scale(x, factor), ng))
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.scale(x, -P::one())
    }

    /// Broadcast multiply by a single-element tensor.
    pub fn mul_scalar(&mut self, scalar: NodeId, tensor: NodeId) -> Result<NodeId> {
        self.check_live()?;
        if self.value(scalar).numel() != 1 {
            return Err(PtychoError::shape("mul_scalar: scalar operand must have one element"));
        }
        self.same_realness(scalar, tensor, "mul_scalar")?;
        let value = match (self.value(scalar).data(), self.value(tensor).data()) {
            (Data::Real(s), Data::Real(v)) => {
                let s = s[0];
                Tensor::from_real(self.value(tensor).shape().to_vec(), v.iter().map(|&p| p * s).collect())?
            }
            (Data::Complex(s), Data::Complex(v)) => {
                let s = s[0];
                Tensor::from_complex(self.value(tensor).shape().to_vec(), v.iter().map(|&p| p * s).collect())?
            }
            _ => unreachable!(),
        };
        let ng = self.needs(&[scalar, tensor]);
        Ok(self.push(value, Op::MulScalar { scalar, tensor }, ng))
    }

    /// Multiply a `[..rest]` tensor into every leading-axis plane of a
    /// `[A, ..rest]` tensor.
    pub fn mul_bcast0(&mut self, small: NodeId, big: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let bs = self.value(big).shape();
        if bs.is_empty() || self.value(small).shape() != &bs[1..] {
            return Err(PtychoError::shape(format!(
                "mul_bcast0: small {:?} must match trailing dims of big {:?}",
                self.value(small).shape(),
                bs
            )));
        }
        self.same_realness(small, big, "mul_bcast0")?;
        let plane = self.value(small).numel();
        let value = match (self.value(small).data(), self.value(big).data()) {
            (Data::Real(s), Data::Real(b)) => Tensor::from_real(
                bs.to_vec(),
                b.iter().enumerate().map(|(i, &x)| x * s[i % plane]).collect(),
            )?,
            (Data::Complex(s), Data::Complex(b)) => Tensor::from_complex(
                bs.to_vec(),
                b.iter().enumerate().map(|(i, &x)| x * s[i % plane]).collect(),
            )?,
            _ => unreachable!(),
        };
        let ng = self.needs(&[small, big]);
        Ok(self.push(value, Op::MulBcast0 { small, big }, ng))
    }

    /// Add a `[C]` bias across a `[C,H,W]` tensor.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || self.value(bias).shape() != [xs[0]] {
            return Err(PtychoError::shape(format!(
                "bias_add: x {:?} with bias {:?}",
                xs,
                self.value(bias).shape()
            )));
        }
        self.same_realness(x, bias, "bias_add")?;
        let hw = xs[1] * xs[2];
        let value = match (self.value(x).data(), self.value(bias).data()) {
            (Data::Real(v), Data::Real(b)) => {
                Tensor::from_real(xs.clone(), v.iter().enumerate().map(|(i, &p)| p + b[i / hw]).collect())?
            }
            (Data::Complex(v), Data::Complex(b)) => Tensor::from_complex(
                xs.clone(),
                v.iter().enumerate().map(|(i, &p)| p + b[i / hw]).collect(),
            )?,
            _ => unreachable!(),
        };
        let ng = self.needs(&[x, bias]);
        Ok(self.push(value, Op::BiasAdd { x, bias }, ng))
    }

    // ── Fourier ─────────────────────────────────────────────────────

    fn fft_dims(&self, x: NodeId, name: &str) -> Result<(usize, usize, usize)> {
        let t = self.value(x);
        if !t.is_complex() {
            return Err(PtychoError::dtype(format!("{name}: real input (complex required)")));
        }
        let s = t.shape();
        if s.len() < 2 {
            return Err(PtychoError::shape(format!("{name}: need at least 2 dims, got {s:?}")));
        }
        let h = s[s.len() - 2];
        let w = s[s.len() - 1];
        let batch: usize = s[..s.len() - 2].iter().product();
        Ok((batch, h, w))
    }

    /// Unnormalized forward DFT over the last two axes.
    pub fn fft2(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (batch, h, w) = self.fft_dims(x, "fft2")?;
        let mut buf = self.value(x).complex()?.to_vec();
        fft2_raw(&mut buf, batch, h, w, false);
        let value = Tensor::from_complex(self.value(x).shape().to_vec(), buf)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Fft2(x), ng))
    }

    /// Inverse DFT over the last two axes, scaled by 1/(h*w).
    pub fn ifft2(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (batch, h, w) = self.fft_dims(x, "ifft2")?;
        let mut buf = self.value(x).complex()?.to_vec();
        fft2_raw(&mut buf, batch, h, w, true);
        let n = P::of_f64((h * w) as f64);
        for z in &mut buf {
            *z = *z / n;
        }
        let value = Tensor::from_complex(self.value(x).shape().to_vec(), buf)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Ifft2(x), ng))
    }

    // ── convolution / resampling ────────────────────────────────────

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.check_live()?;
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(PtychoError::shape(format!(
                "conv2d: expected x [C,H,W] and kernel [O,C,kh,kw], got {xs:?} and {ks:?}"
            )));
        }
        if xs[0] != ks[1] {
            return Err(PtychoError::shape(format!(
                "conv2d channel mismatch: input has {} channels, kernel expects {}",
                xs[0], ks[1]
            )));
        }
        if stride == 0 {
            return Err(PtychoError::contract("conv2d: stride must be >= 1"));
        }
        if xs[1] + 2 * pad < ks[2] || xs[2] + 2 * pad < ks[3] {
            return Err(PtychoError::shape("conv2d: kernel larger than padded input"));
        }
        self.same_realness(x, kernel, "conv2d")?;
        let spec = ConvSpec {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            c_out: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
        };
        let (h_out, w_out) = conv2d_out_shape(&spec);
        let out_shape = vec![spec.c_out, h_out, w_out];
        let value = match (self.value(x).data(), self.value(kernel).data()) {
            (Data::Real(xv), Data::Real(kv)) => {
                Tensor::from_real(out_shape, conv2d_forward(xv, kv, &spec))?
            }
            (Data::Complex(xv), Data::Complex(kv)) => {
                Tensor::from_complex(out_shape, conv2d_forward_complex(xv, kv, &spec))?
            }
            _ => unreachable!(),
        };
        let ng = self.needs(&[x, kernel]);
        Ok(self.push(value, Op::Conv2d { x, kernel, spec }, ng))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(PtychoError::shape(format!("upsample2x: expected [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let value = match self.value(x).data() {
            Data::Real(v) => Tensor::from_real(vec![c, 2 * h, 2 * w], upsample2x_forward(v, c, h, w))?,
            Data::Complex(v) => {
                Tensor::from_complex(vec![c, 2 * h, 2 * w], upsample2x_forward(v, c, h, w))?
            }
        };
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Upsample2x(x), ng))
    }

    // ── activations & pointwise ─────────────────────────────────────

    /// ReLU; complex inputs are rectified on real and imaginary parts
    /// independently.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let value = match self.value(x).data() {
            Data::Real(v) => Tensor::from_real(
                self.value(x).shape().to_vec(),
                v.iter().map(|&p| if p > P::zero() { p } else { P::zero() }).collect(),
            )?,
            Data::Complex(v) => Tensor::from_complex(
                self.value(x).shape().to_vec(),
                v.iter()
                    .map(|z| {
                        Complex::new(
                            if z.re > P::zero() { z.re } else { P::zero() },
                            if z.im > P::zero() { z.im } else { P::zero() },
                        )
                    })
                    .collect(),
            )?,
        };
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Relu(x), ng))
    }

    /// softplus(x) = ln(1+e^x), applied per real/imaginary part for
    /// complex inputs.
    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let value = match self.value(x).data() {
            Data::Real(v) => Tensor::from_real(
                self.value(x).shape().to_vec(),
                v.iter().map(|&p| softplus_scalar(p)).collect(),
            )?,
            Data::Complex(v) => Tensor::from_complex(
                self.value(x).shape().to_vec(),
                v.iter()
                    .map(|z| Complex::new(softplus_scalar(z.re), softplus_scalar(z.im)))
                    .collect(),
            )?,
        };
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Softplus(x), ng))
    }

    /// sqrt(max(x, 0)) with subgradient 0 at the clamp.
    pub fn sqrt_nonneg(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x).real().map_err(|_| PtychoError::dtype("sqrt_nonneg: real input required"))?;
        let value = Tensor::from_real(
            self.value(x).shape().to_vec(),
            v.iter().map(|&p| if p > P::zero() { p.sqrt() } else { P::zero() }).collect(),
        )?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::SqrtNonneg(x), ng))
    }

    /// ln(x + shift) on real tensors.
    pub fn ln_shift(&mut self, x: NodeId, shift: P) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x).real().map_err(|_| PtychoError::dtype("ln_shift: real input required"))?;
        let value = Tensor::from_real(
            self.value(x).shape().to_vec(),
            v.iter().map(|&p| (p + shift).ln()).collect(),
        )?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::LnShift(x, shift), ng))
    }

    /// Squared modulus. Real output for real or complex input.
    pub fn abs2(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let value = match self.value(x).data() {
            Data::Real(v) => {
                Tensor::from_real(self.value(x).shape().to_vec(), v.iter().map(|&p| p * p).collect())?
            }
            Data::Complex(v) => Tensor::from_real(
                self.value(x).shape().to_vec(),
                v.iter().map(|z| z.norm_sqr()).collect(),
            )?,
        };
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Abs2(x), ng))
    }

    /// Complex modulus |z|, subgradient 0 at z = 0.
    pub fn cabs(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x).complex().map_err(|_| PtychoError::dtype("cabs: complex input required"))?;
        let value =
            Tensor::from_real(self.value(x).shape().to_vec(), v.iter().map(|z| z.norm()).collect())?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::CAbs(x), ng))
    }

    /// Complex argument (phase), subgradient 0 at z = 0.
    pub fn carg(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x).complex().map_err(|_| PtychoError::dtype("carg: complex input required"))?;
        let value =
            Tensor::from_real(self.value(x).shape().to_vec(), v.iter().map(|z| z.arg()).collect())?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::CArg(x), ng))
    }

    /// Complex exponential.
    pub fn cexp(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x).complex().map_err(|_| PtychoError::dtype("cexp: complex input required"))?;
        let value =
            Tensor::from_complex(self.value(x).shape().to_vec(), v.iter().map(|z| z.exp()).collect())?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Cexp(x), ng))
    }

    /// Combine two real tensors into one complex tensor.
    pub fn make_complex(&mut self, re: NodeId, im: NodeId) -> Result<NodeId> {
        self.check_live()?;
        self.same_shape(re, im, "make_complex")?;
        let rv = self.value(re).real().map_err(|_| PtychoError::dtype("make_complex: real parts required"))?;
        let iv = self.value(im).real().map_err(|_| PtychoError::dtype("make_complex: real parts required"))?;
        let value = Tensor::from_complex(
            self.value(re).shape().to_vec(),
            rv.iter().zip(iv).map(|(&a, &b)| Complex::new(a, b)).collect(),
        )?;
        let ng = self.needs(&[re, im]);
        Ok(self.push(value, Op::MakeComplex { re, im }, ng))
    }

    /// Promote a real tensor to complex (zero imaginary part).
    pub fn to_complex(&mut self, x: NodeId) -> Result<NodeId> {
        let zeros = self.constant(Tensor::zeros_real(self.value(x).shape().to_vec()));
        self.make_complex(x, zeros)
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x).real().map_err(|_| PtychoError::dtype("sum: real input required"))?;
        let total = v.iter().fold(P::zero(), |a, &b| a + b);
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), ng))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x).real().map_err(|_| PtychoError::dtype("mean: real input required"))?;
        if v.is_empty() {
            return Err(PtychoError::contract("mean of empty tensor"));
        }
        let total = v.iter().fold(P::zero(), |a, &b| a + b) / P::of_f64(v.len() as f64);
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Mean(x), ng))
    }

    /// L1 reduction sum(|x|) on real tensors, subgradient 0 at 0.
    pub fn abs_sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x).real().map_err(|_| PtychoError::dtype("abs_sum: real input required"))?;
        let total = v.iter().fold(P::zero(), |a, &b| a + b.abs());
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::AbsSum(x), ng))
    }

    /// Sum over the leading axis: [A, ..rest] -> [..rest].
    pub fn sum_axis0(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let s = self.value(x).shape().to_vec();
        if s.is_empty() {
            return Err(PtychoError::shape("sum_axis0: scalar input"));
        }
        let plane = numel(&s[1..]);
        let value = match self.value(x).data() {
            Data::Real(v) => {
                let mut out = vec![P::zero(); plane];
                for (i, &p) in v.iter().enumerate() {
                    out[i % plane] += p;
                }
                Tensor::from_real(s[1..].to_vec(), out)?
            }
            Data::Complex(v) => {
                let mut out = vec![Complex::new(P::zero(), P::zero()); plane];
                for (i, &p) in v.iter().enumerate() {
                    out[i % plane] += p;
                }
                Tensor::from_complex(s[1..].to_vec(), out)?
            }
        };
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::SumAxis0(x), ng))
    }

    // ── structure ───────────────────────────────────────────────────

    /// Concatenate along the leading axis.
    pub fn concat0(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.check_live()?;
        if parts.is_empty() {
            return Err(PtychoError::contract("concat0 of zero tensors"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.is_empty() {
            return Err(PtychoError::shape("concat0: scalar input"));
        }
        let mut axis0 = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(PtychoError::shape(format!(
                    "concat0: trailing dims differ: {s:?} vs {first:?}"
                )));
            }
            self.same_realness(parts[0], p, "concat0")?;
            axis0 += s[0];
        }
        let mut shape = first.clone();
        shape[0] = axis0;
        let value = if self.value(parts[0]).is_complex() {
            let mut buf = Vec::with_capacity(numel(&shape));
            for &p in parts {
                buf.extend_from_slice(self.value(p).complex()?);
            }
            Tensor::from_complex(shape, buf)?
        } else {
            let mut buf = Vec::with_capacity(numel(&shape));
            for &p in parts {
                buf.extend_from_slice(self.value(p).real()?);
            }
            Tensor::from_real(shape, buf)?
        };
        let ng = self.needs(parts);
        Ok(self.push(value, Op::Concat0(parts.to_vec()), ng))
    }

    /// Select `[start, start+len)` along the leading axis.
    pub fn slice_axis0(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check_live()?;
        let s = self.value(x).shape().to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(PtychoError::shape(format!(
                "slice_axis0 [{start}, {start}+{len}) out of bounds for {s:?}"
            )));
        }
        let plane = numel(&s[1..]);
        let mut shape = s.clone();
        shape[0] = len;
        let value = match self.value(x).data() {
            Data::Real(v) => {
                Tensor::from_real(shape, v[start * plane..(start + len) * plane].to_vec())?
            }
            Data::Complex(v) => {
                Tensor::from_complex(shape, v[start * plane..(start + len) * plane].to_vec())?
            }
        };
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::SliceAxis0 { x, start, len }, ng))
    }

    /// Crop a window out of the last two axes.
    pub fn crop_hw(
        &mut self,
        x: NodeId,
        off_y: usize,
        off_x: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<NodeId> {
        self.check_live()?;
        let s = self.value(x).shape().to_vec();
        if s.len() < 2 {
            return Err(PtychoError::shape("crop_hw: need at least 2 dims"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if off_y + out_h > h || off_x + out_w > w {
            return Err(PtychoError::shape(format!(
                "crop_hw window ({off_y}+{out_h}, {off_x}+{out_w}) exceeds ({h}, {w})"
            )));
        }
        let lead: usize = s[..s.len() - 2].iter().product();
        let mut shape = s.clone();
        let n = shape.len();
        shape[n - 2] = out_h;
        shape[n - 1] = out_w;
        fn crop_buf<E: Copy>(
            v: &[E],
            lead: usize,
            h: usize,
            w: usize,
            off_y: usize,
            off_x: usize,
            out_h: usize,
            out_w: usize,
        ) -> Vec<E> {
            let mut out = Vec::with_capacity(lead * out_h * out_w);
            for b in 0..lead {
                for y in 0..out_h {
                    let row = (b * h + off_y + y) * w + off_x;
                    out.extend_from_slice(&v[row..row + out_w]);
                }
            }
            out
        }
        let value = match self.value(x).data() {
            Data::Real(v) => {
                Tensor::from_real(shape, crop_buf(v, lead, h, w, off_y, off_x, out_h, out_w))?
            }
            Data::Complex(v) => {
                Tensor::from_complex(shape, crop_buf(v, lead, h, w, off_y, off_x, out_h, out_w))?
            }
        };
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::CropHw { x, off_y, off_x, out_h, out_w }, ng))
    }

    /// Zero-pad the last two axes, placing the input at (before_y, before_x).
    pub fn pad_hw(
        &mut self,
        x: NodeId,
        before_y: usize,
        before_x: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<NodeId> {
        self.check_live()?;
        let s = self.value(x).shape().to_vec();
        if s.len() < 2 {
            return Err(PtychoError::shape("pad_hw: need at least 2 dims"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if before_y + h > out_h || before_x + w > out_w {
            return Err(PtychoError::shape("pad_hw: input does not fit in padded extent"));
        }
        let lead: usize = s[..s.len() - 2].iter().product();
        let mut shape = s.clone();
        let n = shape.len();
        shape[n - 2] = out_h;
        shape[n - 1] = out_w;
        fn pad_buf<E: Copy + num_traits::Zero>(
            v: &[E],
            lead: usize,
            h: usize,
            w: usize,
            before_y: usize,
            before_x: usize,
            out_h: usize,
            out_w: usize,
        ) -> Vec<E> {
            let mut out = vec![E::zero(); lead * out_h * out_w];
            for b in 0..lead {
                for y in 0..h {
                    let src = (b * h + y) * w;
                    let dst = (b * out_h + before_y + y) * out_w + before_x;
                    out[dst..dst + w].copy_from_slice(&v[src..src + w]);
                }
            }
            out
        }
        let value = match self.value(x).data() {
            Data::Real(v) => {
                Tensor::from_real(shape, pad_buf(v, lead, h, w, before_y, before_x, out_h, out_w))?
            }
            Data::Complex(v) => {
                Tensor::from_complex(shape, pad_buf(v, lead, h, w, before_y, before_x, out_h, out_w))?
            }
        };
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::PadHw { x, before_y, before_x, out_h, out_w }, ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        self.check_live()?;
        let value = self.value(x).clone().reshaped(shape)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Replace a node's value while passing gradients through unchanged.
    /// Used to apply hard-constraint projections between iterations without
    /// differentiating through them.
    pub fn straight_through(&mut self, x: NodeId, replacement: Tensor<P>) -> Result<NodeId> {
        self.check_live()?;
        if replacement.shape() != self.value(x).shape()
            || replacement.is_complex() != self.value(x).is_complex()
        {
            return Err(PtychoError::shape("straight_through: replacement must match node"));
        }
        let ng = self.needs(&[x]);
        Ok(self.push(replacement, Op::StraightThrough(x), ng))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Backpropagate from a real scalar loss. Populates `grad` on every
    /// node that requires it and consumes the tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let t = self.value(loss);
        if !t.shape().is_empty() || t.is_complex() {
            return Err(PtychoError::contract(format!(
                "backward: loss must be a real scalar, got {:?} ({})",
                t.shape(),
                if t.is_complex() { "complex" } else { "real" }
            )));
        }
        self.backward_seeded(vec![(loss, Tensor::scalar(P::one()))])
    }

    /// Backpropagate from explicit seed gradients. Used when merging
    /// gradients computed on other tapes into this one.
    pub fn backward_seeded(&mut self, seeds: Vec<(NodeId, Tensor<P>)>) -> Result<()> {
        self.check_live()?;
        self.consumed = true;
        for (id, seed) in seeds {
            let node = &self.nodes[id.0];
            if seed.shape() != node.value.shape() || seed.is_complex() != node.value.is_complex() {
                return Err(PtychoError::shape("backward seed does not match node"));
            }
            accumulate_into(&mut self.nodes[id.0].grad, seed);
        }
        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g_out) = self.nodes[idx].grad.clone() else { continue };
            let op = self.nodes[idx].op.clone();
            self.backward_op(idx, op, g_out)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor<P>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        accumulate_into(&mut self.nodes[id.0].grad, delta);
    }

    fn backward_op(&mut self, idx: usize, op: Op<P>, g_out: Tensor<P>) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g_out.clone());
                self.accumulate(b, g_out);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g_out.clone());
                self.accumulate(b, neg_tensor(&g_out));
            }
            Op::Mul(a, b) => {
                let ga = mul_conj(&g_out, self.value(b));
                let gb = mul_conj(&g_out, self.value(a));
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Scale(x, c) => {
                self.accumulate(x, scale_tensor(&g_out, c));
            }
            Op::MulScalar { scalar, tensor } => {
                let g_t = mul_scalar_conj(&g_out, self.value(scalar));
                let g_s = dot_conj(&g_out, self.value(tensor), self.value(scalar).shape().to_vec());
                self.accumulate(tensor, g_t);
                self.accumulate(scalar, g_s);
            }
            Op::MulBcast0 { small, big } => {
                let plane = self.value(small).numel();
                // d big[a,..] = g[a,..] * conj(small); d small = sum_a g[a,..] * conj(big[a,..])
                let g_big = match (g_out.data(), self.value(small).data()) {
                    (Data::Real(g), Data::Real(s)) => Tensor::from_real(
                        self.value(big).shape().to_vec(),
                        g.iter().enumerate().map(|(i, &p)| p * s[i % plane]).collect(),
                    )?,
                    (Data::Complex(g), Data::Complex(s)) => Tensor::from_complex(
                        self.value(big).shape().to_vec(),
                        g.iter().enumerate().map(|(i, &p)| p * s[i % plane].conj()).collect(),
                    )?,
                    _ => unreachable!(),
                };
                let g_small = match (g_out.data(), self.value(big).data()) {
                    (Data::Real(g), Data::Real(b)) => {
                        let mut acc = vec![P::zero(); plane];
                        for (i, &p) in g.iter().enumerate() {
                            acc[i % plane] += p * b[i];
                        }
                        Tensor::from_real(self.value(small).shape().to_vec(), acc)?
                    }
                    (Data::Complex(g), Data::Complex(b)) => {
                        let mut acc = vec![Complex::new(P::zero(), P::zero()); plane];
                        for (i, &p) in g.iter().enumerate() {
                            acc[i % plane] += p * b[i].conj();
                        }
                        Tensor::from_complex(self.value(small).shape().to_vec(), acc)?
                    }
                    _ => unreachable!(),
                };
                self.accumulate(big, g_big);
                self.accumulate(small, g_small);
            }
            Op::BiasAdd { x, bias } => {
                let xs = self.value(x).shape();
                let hw = xs[1] * xs[2];
                let g_bias = match g_out.data() {
                    Data::Real(g) => {
                        let mut acc = vec![P::zero(); xs[0]];
                        for (i, &p) in g.iter().enumerate() {
                            acc[i / hw] += p;
                        }
                        Tensor::from_real(vec![xs[0]], acc)?
                    }
                    Data::Complex(g) => {
                        let mut acc = vec![Complex::new(P::zero(), P::zero()); xs[0]];
                        for (i, &p) in g.iter().enumerate() {
                            acc[i / hw] += p;
                        }
                        Tensor::from_complex(vec![xs[0]], acc)?
                    }
                };
                self.accumulate(x, g_out);
                self.accumulate(bias, g_bias);
            }
            Op::Fft2(x) => {
                // Adjoint of the unnormalized forward DFT is the
                // unnormalized inverse DFT.
                let s = self.value(x).shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let batch: usize = s[..s.len() - 2].iter().product();
                let mut buf = g_out.complex()?.to_vec();
                fft2_raw(&mut buf, batch, h, w, true);
                self.accumulate(x, Tensor::from_complex(s.to_vec(), buf)?);
            }
            Op::Ifft2(x) => {
                let s = self.value(x).shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let batch: usize = s[..s.len() - 2].iter().product();
                let n = P::of_f64((h * w) as f64);
                let mut buf = g_out.complex()?.to_vec();
                fft2_raw(&mut buf, batch, h, w, false);
                for z in &mut buf {
                    *z = *z / n;
                }
                self.accumulate(x, Tensor::from_complex(s.to_vec(), buf)?);
            }
            Op::Conv2d { x, kernel, spec } => {
                match (g_out.data(), self.value(x).data(), self.value(kernel).data()) {
                    (Data::Real(g), Data::Real(xv), Data::Real(kv)) => {
                        let gx = conv2d_backward_input(g, kv, &spec);
                        let gk = conv2d_backward_kernel(g, xv, &spec);
                        let gxt = Tensor::from_real(self.value(x).shape().to_vec(), gx)?;
                        let gkt = Tensor::from_real(self.value(kernel).shape().to_vec(), gk)?;
                        self.accumulate(x, gxt);
                        self.accumulate(kernel, gkt);
                    }
                    (Data::Complex(g), Data::Complex(xv), Data::Complex(kv)) => {
                        let gx = conv2d_backward_input_complex(g, kv, &spec);
                        let gk = conv2d_backward_kernel_complex(g, xv, &spec);
                        let gxt = Tensor::from_complex(self.value(x).shape().to_vec(), gx)?;
                        let gkt = Tensor::from_complex(self.value(kernel).shape().to_vec(), gk)?;
                        self.accumulate(x, gxt);
                        self.accumulate(kernel, gkt);
                    }
                    _ => unreachable!(),
                }
            }
            Op::Upsample2x(x) => {
                let s = self.value(x).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let g_x = match g_out.data() {
                    Data::Real(g) => Tensor::from_real(s.to_vec(), upsample2x_backward(g, c, h, w))?,
                    Data::Complex(g) => {
                        Tensor::from_complex(s.to_vec(), upsample2x_backward(g, c, h, w))?
                    }
                };
                self.accumulate(x, g_x);
            }
            Op::Relu(x) => {
                let g_x = match (g_out.data(), self.value(x).data()) {
                    (Data::Real(g), Data::Real(v)) => Tensor::from_real(
                        g_out.shape().to_vec(),
                        g.iter()
                            .zip(v)
                            .map(|(&gp, &xp)| if xp > P::zero() { gp } else { P::zero() })
                            .collect(),
                    )?,
                    (Data::Complex(g), Data::Complex(v)) => Tensor::from_complex(
                        g_out.shape().to_vec(),
                        g.iter()
                            .zip(v)
                            .map(|(&gp, &zp)| {
                                Complex::new(
                                    if zp.re > P::zero() { gp.re } else { P::zero() },
                                    if zp.im > P::zero() { gp.im } else { P::zero() },
                                )
                            })
                            .collect(),
                    )?,
                    _ => unreachable!(),
                };
                self.accumulate(x, g_x);
            }
            Op::Softplus(x) => {
                let g_x = match (g_out.data(), self.value(x).data()) {
                    (Data::Real(g), Data::Real(v)) => Tensor::from_real(
                        g_out.shape().to_vec(),
                        g.iter().zip(v).map(|(&gp, &xp)| gp * sigmoid_scalar(xp)).collect(),
                    )?,
                    (Data::Complex(g), Data::Complex(v)) => Tensor::from_complex(
                        g_out.shape().to_vec(),
                        g.iter()
                            .zip(v)
                            .map(|(&gp, &zp)| {
                                Complex::new(
                                    gp.re * sigmoid_scalar(zp.re),
                                    gp.im * sigmoid_scalar(zp.im),
                                )
                            })
                            .collect(),
                    )?,
                    _ => unreachable!(),
                };
                self.accumulate(x, g_x);
            }
            Op::SqrtNonneg(x) => {
                let out = self.nodes[idx].value.real()?.to_vec();
                let v = self.value(x).real()?;
                let g = g_out.real()?;
                let half = P::of_f64(0.5);
                let g_x = Tensor::from_real(
                    g_out.shape().to_vec(),
                    g.iter()
                        .zip(v.iter().zip(&out))
                        .map(|(&gp, (&xp, &op))| {
                            if xp > P::zero() { gp * half / op } else { P::zero() }
                        })
                        .collect(),
                )?;
                self.accumulate(x, g_x);
            }
            Op::LnShift(x, shift) => {
                let v = self.value(x).real()?;
                let g = g_out.real()?;
                let g_x = Tensor::from_real(
                    g_out.shape().to_vec(),
                    g.iter().zip(v).map(|(&gp, &xp)| gp / (xp + shift)).collect(),
                )?;
                self.accumulate(x, g_x);
            }
            Op::Abs2(x) => {
                let two = P::of_f64(2.0);
                let g = g_out.real()?;
                let g_x = match self.value(x).data() {
                    Data::Real(v) => Tensor::from_real(
                        self.value(x).shape().to_vec(),
                        g.iter().zip(v).map(|(&gp, &xp)| two * gp * xp).collect(),
                    )?,
                    Data::Complex(v) => Tensor::from_complex(
                        self.value(x).shape().to_vec(),
                        g.iter().zip(v).map(|(&gp, &zp)| zp * (two * gp)).collect(),
                    )?,
                };
                self.accumulate(x, g_x);
            }
            Op::CAbs(x) => {
                let g = g_out.real()?;
                let v = self.value(x).complex()?;
                let g_x = Tensor::from_complex(
                    self.value(x).shape().to_vec(),
                    g.iter()
                        .zip(v)
                        .map(|(&gp, &zp)| {
                            let m = zp.norm();
                            if m > P::zero() { zp * (gp / m) } else { Complex::new(P::zero(), P::zero()) }
                        })
                        .collect(),
                )?;
                self.accumulate(x, g_x);
            }
            Op::CArg(x) => {
                let g = g_out.real()?;
                let v = self.value(x).complex()?;
                let g_x = Tensor::from_complex(
                    self.value(x).shape().to_vec(),
                    g.iter()
                        .zip(v)
                        .map(|(&gp, &zp)| {
                            let m2 = zp.norm_sqr();
                            if m2 > P::zero() {
                                Complex::new(-zp.im, zp.re) * (gp / m2)
                            } else {
                                Complex::new(P::zero(), P::zero())
                            }
                        })
                        .collect(),
                )?;
                self.accumulate(x, g_x);
            }
            Op::Cexp(x) => {
                let out = self.nodes[idx].value.complex()?.to_vec();
                let g = g_out.complex()?;
                let g_x = Tensor::from_complex(
                    self.value(x).shape().to_vec(),
                    g.iter().zip(&out).map(|(&gp, op)| gp * op.conj()).collect(),
                )?;
                self.accumulate(x, g_x);
            }
            Op::MakeComplex { re, im } => {
                let g = g_out.complex()?;
                let g_re =
                    Tensor::from_real(g_out.shape().to_vec(), g.iter().map(|z| z.re).collect())?;
                let g_im =
                    Tensor::from_real(g_out.shape().to_vec(), g.iter().map(|z| z.im).collect())?;
                self.accumulate(re, g_re);
                self.accumulate(im, g_im);
            }
            Op::Sum(x) => {
                let g = g_out.scalar_value()?;
                self.accumulate(x, Tensor::full_real(self.value(x).shape().to_vec(), g));
            }
            Op::Mean(x) => {
                let n = P::of_f64(self.value(x).numel() as f64);
                let g = g_out.scalar_value()? / n;
                self.accumulate(x, Tensor::full_real(self.value(x).shape().to_vec(), g));
            }
            Op::AbsSum(x) => {
                let g = g_out.scalar_value()?;
                let v = self.value(x).real()?;
                let g_x = Tensor::from_real(
                    self.value(x).shape().to_vec(),
                    v.iter()
                        .map(|&xp| {
                            if xp > P::zero() {
                                g
                            } else if xp < P::zero() {
                                -g
                            } else {
                                P::zero()
                            }
                        })
                        .collect(),
                )?;
                self.accumulate(x, g_x);
            }
            Op::SumAxis0(x) => {
                let s = self.value(x).shape().to_vec();
                let plane = numel(&s[1..]);
                let g_x = match g_out.data() {
                    Data::Real(g) => {
                        let mut buf = Vec::with_capacity(numel(&s));
                        for _ in 0..s[0] {
                            buf.extend_from_slice(g);
                        }
                        let _ = plane;
                        Tensor::from_real(s, buf)?
                    }
                    Data::Complex(g) => {
                        let mut buf = Vec::with_capacity(numel(&s));
                        for _ in 0..s[0] {
                            buf.extend_from_slice(g);
                        }
                        Tensor::from_complex(s, buf)?
                    }
                };
                self.accumulate(x, g_x);
            }
            Op::Concat0(parts) => {
                let mut start = 0usize;
                for p in parts {
                    let len = self.value(p).shape()[0];
                    let plane: usize = self.value(p).shape()[1..].iter().product();
                    let g_p = match g_out.data() {
                        Data::Real(g) => Tensor::from_real(
                            self.value(p).shape().to_vec(),
                            g[start * plane..(start + len) * plane].to_vec(),
                        )?,
                        Data::Complex(g) => Tensor::from_complex(
                            self.value(p).shape().to_vec(),
                            g[start * plane..(start + len) * plane].to_vec(),
                        )?,
                    };
                    self.accumulate(p, g_p);
                    start += len;
                }
            }
            Op::SliceAxis0 { x, start, len } => {
                let s = self.value(x).shape().to_vec();
                let plane = numel(&s[1..]);
                let g_x = match g_out.data() {
                    Data::Real(g) => {
                        let mut buf = vec![P::zero(); numel(&s)];
                        buf[start * plane..(start + len) * plane].copy_from_slice(g);
                        Tensor::from_real(s, buf)?
                    }
                    Data::Complex(g) => {
                        let mut buf = vec![Complex::new(P::zero(), P::zero()); numel(&s)];
                        buf[start * plane..(start + len) * plane].copy_from_slice(g);
                        Tensor::from_complex(s, buf)?
                    }
                };
                self.accumulate(x, g_x);
            }
            Op::CropHw { x, off_y, off_x, out_h, out_w } => {
                let s = self.value(x).shape().to_vec();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let lead: usize = s[..s.len() - 2].iter().product();
                fn scatter<E: Copy + num_traits::Zero>(
                    g: &[E],
                    lead: usize,
                    h: usize,
                    w: usize,
                    off_y: usize,
                    off_x: usize,
                    out_h: usize,
                    out_w: usize,
                ) -> Vec<E> {
                    let mut buf = vec![E::zero(); lead * h * w];
                    for b in 0..lead {
                        for y in 0..out_h {
                            let dst = (b * h + off_y + y) * w + off_x;
                            let src = (b * out_h + y) * out_w;
                            buf[dst..dst + out_w].copy_from_slice(&g[src..src + out_w]);
                        }
                    }
                    buf
                }
                let g_x = match g_out.data() {
                    Data::Real(g) => Tensor::from_real(
                        s.clone(),
                        scatter(g, lead, h, w, off_y, off_x, out_h, out_w),
                    )?,
                    Data::Complex(g) => Tensor::from_complex(
                        s.clone(),
                        scatter(g, lead, h, w, off_y, off_x, out_h, out_w),
                    )?,
                };
                self.accumulate(x, g_x);
            }
            Op::PadHw { x, before_y, before_x, out_h, out_w } => {
                let s = self.value(x).shape().to_vec();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let lead: usize = s[..s.len() - 2].iter().product();
                fn gather<E: Copy>(
                    g: &[E],
                    lead: usize,
                    h: usize,
                    w: usize,
                    before_y: usize,
                    before_x: usize,
                    out_h: usize,
                    out_w: usize,
                ) -> Vec<E> {
                    let mut buf = Vec::with_capacity(lead * h * w);
                    for b in 0..lead {
                        for y in 0..h {
                            let src = (b * out_h + before_y + y) * out_w + before_x;
                            buf.extend_from_slice(&g[src..src + w]);
                        }
                    }
                    buf
                }
                let g_x = match g_out.data() {
                    Data::Real(g) => Tensor::from_real(
                        s.clone(),
                        gather(g, lead, h, w, before_y, before_x, out_h, out_w),
                    )?,
                    Data::Complex(g) => Tensor::from_complex(
                        s.clone(),
                        gather(g, lead, h, w, before_y, before_x, out_h, out_w),
                    )?,
                };
                self.accumulate(x, g_x);
            }
            Op::Reshape(x) => {
                let g_x = g_out.reshaped(self.value(x).shape().to_vec())?;
                self.accumulate(x, g_x);
            }
            Op::StraightThrough(x) => {
                self.accumulate(x, g_out);
            }
        }
        Ok(())
    }
}

fn accumulate_into<P: Precision>(slot: &mut Option<Tensor<P>>, delta: Tensor<P>) {
    match slot {
        Some(g) => match (g, &delta) {
            (g_t, d) => {
                match (g_t.is_complex(), d.is_complex()) {
                    (false, false) => {
                        let gv = g_t.real_mut().unwrap();
                        for (a, b) in gv.iter_mut().zip(d.real().unwrap()) {
                            *a += *b;
                        }
                    }
                    (true, true) => {
                        let gv = g_t.complex_mut().unwrap();
                        for (a, b) in gv.iter_mut().zip(d.complex().unwrap()) {
                            *a += *b;
                        }
                    }
                    _ => unreachable!("gradient realness mismatch"),
                }
            }
        },
        None => *slot = Some(delta),
    }
}

fn neg_tensor<P: Precision>(t: &Tensor<P>) -> Tensor<P> {
    match t.data() {
        Data::Real(v) => {
            Tensor::from_real(t.shape().to_vec(), v.iter().map(|&x| -x).collect()).unwrap()
        }
        Data::Complex(v) => {
            Tensor::from_complex(t.shape().to_vec(), v.iter().map(|&x| -x).collect()).unwrap()
        }
    }
}

fn scale_tensor<P: Precision>(t: &Tensor<P>, c: P) -> Tensor<P> {
    match t.data() {
        Data::Real(v) => {
            Tensor::from_real(t.shape().to_vec(), v.iter().map(|&x| x * c).collect()).unwrap()
        }
        Data::Complex(v) => {
            Tensor::from_complex(t.shape().to_vec(), v.iter().map(|&x| x * c).collect()).unwrap()
        }
    }
}

/// Elementwise g * conj(other) — the product-rule factor for bilinear ops.
fn mul_conj<P: Precision>(g: &Tensor<P>, other: &Tensor<P>) -> Tensor<P> {
    match (g.data(), other.data()) {
        (Data::Real(gv), Data::Real(ov)) => Tensor::from_real(
            g.shape().to_vec(),
            gv.iter().zip(ov).map(|(&a, &b)| a * b).collect(),
        )
        .unwrap(),
        (Data::Complex(gv), Data::Complex(ov)) => Tensor::from_complex(
            g.shape().to_vec(),
            gv.iter().zip(ov).map(|(&a, &b)| a * b.conj()).collect(),
        )
        .unwrap(),
        _ => unreachable!(),
    }
}

/// g scaled by conj(scalar value).
fn mul_scalar_conj<P: Precision>(g: &Tensor<P>, scalar: &Tensor<P>) -> Tensor<P> {
    match (g.data(), scalar.data()) {
        (Data::Real(gv), Data::Real(s)) => {
            let s = s[0];
            Tensor::from_real(g.shape().to_vec(), gv.iter().map(|&a| a * s).collect()).unwrap()
        }
        (Data::Complex(gv), Data::Complex(s)) => {
            let s = s[0].conj();
            Tensor::from_complex(g.shape().to_vec(), gv.iter().map(|&a| a * s).collect()).unwrap()
        }
        _ => unreachable!(),
    }
}

/// sum over elements of g * conj(other), shaped like the scalar operand.
fn dot_conj<P: Precision>(g: &Tensor<P>, other: &Tensor<P>, scalar_shape: Vec<usize>) -> Tensor<P> {
    match (g.data(), other.data()) {
        (Data::Real(gv), Data::Real(ov)) => {
            let total = gv.iter().zip(ov).fold(P::zero(), |acc, (&a, &b)| acc + a * b);
            Tensor::from_real(scalar_shape, vec![total]).unwrap()
        }
        (Data::Complex(gv), Data::Complex(ov)) => {
            let total = gv
                .iter()
                .zip(ov)
                .fold(Complex::new(P::zero(), P::zero()), |acc, (&a, &b)| acc + a * b.conj());
            Tensor::from_complex(scalar_shape, vec![total]).unwrap()
        }
        _ => unreachable!(),
    }
}
