//! U-Net deep generative priors for object and probe.
//!
//! The network regenerates its anchor input (the estimated object or
//! probe) from a noise-perturbed copy of it; the architecture itself is
//! the regularizer. Downsampling is a stride-2 convolution and upsampling
//! is nearest-neighbor followed by a convolution, skip connections
//! concatenate, and there are no normalization layers.

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::adam::{AdamParams, AdamState};
use crate::error::{PtychoError, Result};
use crate::tensor::{Data, NodeId, Precision, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Realness {
    Real,
    Complex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FinalActivation {
    #[default]
    Identity,
    Softplus,
}

/// Architecture hyperparameters. `depth` counts encoder levels including
/// the bottleneck, so spatial extents must divide 2^(depth-1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub depth: usize,
    pub start_filters: usize,
    pub channels: usize,
    pub realness: Realness,
    pub final_activation: FinalActivation,
}

impl UNetSpec {
    pub fn new(depth: usize, start_filters: usize, channels: usize, realness: Realness) -> Self {
        UNetSpec { depth, start_filters, channels, realness, final_activation: FinalActivation::Identity }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.start_filters == 0 || self.channels == 0 {
            return Err(PtychoError::config("unet depth, filters and channels must be positive"));
        }
        if self.final_activation == FinalActivation::Softplus && self.realness == Realness::Complex {
            return Err(PtychoError::config(
                "softplus final activation is only for real (potential) outputs",
            ));
        }
        Ok(())
    }

    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    fn width(&self, level: usize) -> usize {
        self.start_filters << level
    }
}

/// One convolution with bias.
#[derive(Debug, Clone)]
pub struct ConvLayer<P: Precision> {
    pub name: String,
    pub weight: Tensor<P>,
    pub bias: Tensor<P>,
    pub stride: usize,
    pub pad: usize,
}

impl<P: Precision> ConvLayer<P> {
    fn init(
        name: String,
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        complex: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // He fan-in scaling. For complex weights each part gets
        // sqrt(1/fan_in): the CReLU pair behaves like a real network of
        // twice the width, and sqrt(2/fan_in) per part would double the
        // activation variance at every layer.
        let fan_in = (c_in * k * k) as f64;
        let std = if complex { (1.0 / fan_in).sqrt() } else { (2.0 / fan_in).sqrt() };
        let normal = Normal::new(0.0f64, std).unwrap();
        let n = c_out * c_in * k * k;
        let weight = if complex {
            Tensor::from_complex(
                vec![c_out, c_in, k, k],
                (0..n)
                    .map(|_| {
                        Complex::new(P::of_f64(normal.sample(rng)), P::of_f64(normal.sample(rng)))
                    })
                    .collect(),
            )
            .unwrap()
        } else {
            Tensor::from_real(
                vec![c_out, c_in, k, k],
                (0..n).map(|_| P::of_f64(normal.sample(rng))).collect(),
            )
            .unwrap()
        };
        // Slightly positive bias keeps most rectified units active at
        // initialization.
        let b0 = P::of_f64(0.05);
        let bias = if complex {
            Tensor::from_complex(vec![c_out], vec![Complex::new(b0, b0); c_out]).unwrap()
        } else {
            Tensor::from_real(vec![c_out], vec![b0; c_out]).unwrap()
        };
        ConvLayer { name, weight, bias, stride, pad: k / 2 }
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Encoder/decoder convolutional network with concatenating skips.
#[derive(Debug, Clone)]
pub struct UNet<P: Precision> {
    pub spec: UNetSpec,
    layers: Vec<ConvLayer<P>>,
}

/// Handles to one registration of the network's parameters on a tape.
pub struct ParamNodes {
    nodes: Vec<(NodeId, NodeId)>,
}

impl ParamNodes {
    pub fn flat(&self) -> Vec<NodeId> {
        self.nodes.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

impl<P: Precision> UNet<P> {
    /// Deterministic construction from a seed.
    pub fn build(spec: UNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let complex = spec.realness == Realness::Complex;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let d = spec.depth;
        for l in 0..d.saturating_sub(1) {
            let c_in = if l == 0 { spec.channels } else { spec.width(l - 1) };
            let w = spec.width(l);
            layers.push(ConvLayer::init(format!("enc{l}/conv1"), w, c_in, 3, 1, complex, &mut rng));
            layers.push(ConvLayer::init(format!("enc{l}/conv2"), w, w, 3, 1, complex, &mut rng));
            layers.push(ConvLayer::init(format!("enc{l}/down"), w, w, 3, 2, complex, &mut rng));
        }
        let mid_in = if d == 1 { spec.channels } else { spec.width(d - 2) };
        let mid_w = spec.width(d - 1);
        layers.push(ConvLayer::init("mid/conv1".into(), mid_w, mid_in, 3, 1, complex, &mut rng));
        layers.push(ConvLayer::init("mid/conv2".into(), mid_w, mid_w, 3, 1, complex, &mut rng));
        for l in (0..d.saturating_sub(1)).rev() {
            let c_in = if l == d - 2 { spec.width(d - 1) } else { spec.width(l + 1) };
            let w = spec.width(l);
            layers.push(ConvLayer::init(format!("dec{l}/conv_a"), w, c_in, 3, 1, complex, &mut rng));
            layers.push(ConvLayer::init(format!("dec{l}/conv_b"), w, 2 * w, 3, 1, complex, &mut rng));
        }
        let head_in = if d == 1 { mid_w } else { spec.width(0) };
        layers.push(ConvLayer::init("head".into(), spec.channels, head_in, 1, 1, complex, &mut rng));
        Ok(UNet { spec, layers })
    }

    pub fn layers(&self) -> &[ConvLayer<P>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer<P>] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.num_params()).sum()
    }

    /// Push every weight and bias onto a tape, in layer order.
    pub fn register(&self, tape: &mut Tape<P>, trainable: bool) -> ParamNodes {
        let nodes = self
            .layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone(), trainable), tape.leaf(l.bias.clone(), trainable)))
            .collect();
        ParamNodes { nodes }
    }

    /// Apply gradients collected from a registration back onto the
    /// parameter tensors via the given optimizer group.
    pub fn apply_grads(
        &mut self,
        tape: &Tape<P>,
        nodes: &ParamNodes,
        opt: &mut AdamState<P>,
        hp: &AdamParams,
    ) -> Result<()> {
        let mut grads: Vec<Tensor<P>> = Vec::with_capacity(2 * self.layers.len());
        for (i, &(w, b)) in nodes.nodes.iter().enumerate() {
            let gw = tape.grad(w).cloned().unwrap_or_else(|| {
                zero_like(&self.layers[i].weight)
            });
            let gb = tape.grad(b).cloned().unwrap_or_else(|| zero_like(&self.layers[i].bias));
            grads.push(gw);
            grads.push(gb);
        }
        let mut params: Vec<&mut Tensor<P>> = Vec::with_capacity(grads.len());
        for layer in &mut self.layers {
            params.push(&mut layer.weight);
            params.push(&mut layer.bias);
        }
        let grad_refs: Vec<&Tensor<P>> = grads.iter().collect();
        opt.step(&mut params, &grad_refs, hp)
    }

    fn conv(
        &self,
        tape: &mut Tape<P>,
        x: NodeId,
        idx: usize,
        nodes: &ParamNodes,
        activate: bool,
    ) -> Result<NodeId> {
        let layer = &self.layers[idx];
        let (w, b) = nodes.nodes[idx];
        let y = tape.conv2d(x, w, layer.stride, layer.pad)?;
        let y = tape.bias_add(y, b)?;
        if activate {
            tape.relu(y)
        } else {
            Ok(y)
        }
    }

    /// Forward pass. `input` must be [C, H, W] with H, W divisible by
    /// 2^(depth-1); the output has the same shape.
    pub fn forward(&self, tape: &mut Tape<P>, input: NodeId, nodes: &ParamNodes) -> Result<NodeId> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.spec.channels {
            return Err(PtychoError::shape(format!(
                "unet input must be [{}, H, W], got {:?}",
                self.spec.channels, shape
            )));
        }
        let div = self.spec.divisor();
        if shape[1] % div != 0 || shape[2] % div != 0 {
            return Err(PtychoError::shape(format!(
                "unet spatial extents {:?} must divide {div}",
                &shape[1..]
            )));
        }
        let d = self.spec.depth;
        let mut idx = 0;
        let mut x = input;
        let mut skips = Vec::with_capacity(d.saturating_sub(1));
        for _l in 0..d.saturating_sub(1) {
            x = self.conv(tape, x, idx, nodes, true)?;
            idx += 1;
            x = self.conv(tape, x, idx, nodes, true)?;
            idx += 1;
            skips.push(x);
            x = self.conv(tape, x, idx, nodes, true)?;
            idx += 1;
        }
        x = self.conv(tape, x, idx, nodes, true)?;
        idx += 1;
        x = self.conv(tape, x, idx, nodes, true)?;
        idx += 1;
        for l in (0..d.saturating_sub(1)).rev() {
            x = tape.upsample2x(x)?;
            x = self.conv(tape, x, idx, nodes, true)?;
            idx += 1;
            x = tape.concat0(&[x, skips[l]])?;
            x = self.conv(tape, x, idx, nodes, true)?;
            idx += 1;
        }
        x = self.conv(tape, x, idx, nodes, false)?;
        match self.spec.final_activation {
            FinalActivation::Identity => Ok(x),
            FinalActivation::Softplus => tape.softplus(x),
        }
    }
}

fn zero_like<P: Precision>(t: &Tensor<P>) -> Tensor<P> {
    if t.is_complex() {
        Tensor::zeros_complex(t.shape().to_vec())
    } else {
        Tensor::zeros_real(t.shape().to_vec())
    }
}

/// A deep generative prior: a U-Net plus its fixed anchor input and the
/// input-noise level.
#[derive(Debug, Clone)]
pub struct DgpState<P: Precision> {
    pub unet: UNet<P>,
    anchor: Option<Tensor<P>>,
    pub noise_sigma: f64,
    /// Second-moment decay used by the pre-training optimizer.
    pub pretrain_beta2: f64,
}

pub const DEFAULT_NOISE_SIGMA: f64 = 0.025;

impl<P: Precision> DgpState<P> {
    pub fn new(unet: UNet<P>) -> Self {
        // Short second-moment memory converges much faster when fitting a
        // single anchor image full-batch.
        DgpState { unet, anchor: None, noise_sigma: DEFAULT_NOISE_SIGMA, pretrain_beta2: 0.9 }
    }

    pub fn anchor(&self) -> Option<&Tensor<P>> {
        self.anchor.as_ref()
    }

    /// Set the anchor input (the estimated object or probe). Shape and
    /// realness must match the network spec.
    pub fn set_anchor(&mut self, anchor: Tensor<P>) -> Result<()> {
        let s = anchor.shape();
        if s.len() != 3 || s[0] != self.unet.spec.channels {
            return Err(PtychoError::shape(format!(
                "anchor must be [{}, H, W], got {:?}",
                self.unet.spec.channels, s
            )));
        }
        let complex = self.unet.spec.realness == Realness::Complex;
        if anchor.is_complex() != complex {
            return Err(PtychoError::dtype("anchor realness does not match network spec"));
        }
        let div = self.unet.spec.divisor();
        if s[1] % div != 0 || s[2] % div != 0 {
            return Err(PtychoError::shape(format!(
                "anchor spatial extents {:?} must divide {div}",
                &s[1..]
            )));
        }
        self.anchor = Some(anchor);
        Ok(())
    }

    /// Fresh noise-perturbed copy of the anchor. Noise is resampled from
    /// the original anchor every call (never cumulative); complex noise
    /// has independent real/imaginary parts, each with sigma.
    pub fn perturbed_input(&self, training: bool, rng: &mut ChaCha8Rng) -> Result<Tensor<P>> {
        let anchor = self
            .anchor
            .as_ref()
            .ok_or_else(|| PtychoError::contract("dgp anchor input not set"))?;
        if !training || self.noise_sigma == 0.0 {
            return Ok(anchor.clone());
        }
        let normal = Normal::new(0.0f64, self.noise_sigma).unwrap();
        Ok(match anchor.data() {
            Data::Real(v) => Tensor::from_real(
                anchor.shape().to_vec(),
                v.iter().map(|&x| x + P::of_f64(normal.sample(rng))).collect::<Vec<_>>(),
            )?,
            Data::Complex(v) => Tensor::from_complex(
                anchor.shape().to_vec(),
                v.iter()
                    .map(|&z| {
                        z + Complex::new(P::of_f64(normal.sample(rng)), P::of_f64(normal.sample(rng)))
                    })
                    .collect::<Vec<_>>(),
            )?,
        })
    }

    /// Run the network on the (optionally noise-perturbed) anchor.
    /// Returns the output node and the parameter registration.
    pub fn generate(
        &self,
        tape: &mut Tape<P>,
        training: bool,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, ParamNodes)> {
        let input = self.perturbed_input(training, rng)?;
        let input = tape.constant(input);
        let nodes = self.unet.register(tape, trainable);
        let out = self.unet.forward(tape, input, &nodes)?;
        Ok((out, nodes))
    }

    /// Deterministic (noiseless) output values.
    pub fn infer(&self) -> Result<Tensor<P>> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, _) = self.generate(&mut tape, false, false, &mut rng)?;
        Ok(tape.value(out).clone())
    }
}

/// Autoencoder pre-training: anchor the DGP at `target` and fit the
/// network to reproduce it under input noise. Returns the per-iteration
/// loss history.
pub fn pretrain_autoencoder<P: Precision>(
    dgp: &mut DgpState<P>,
    target: &Tensor<P>,
    iters: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if target.has_nan() {
        return Err(PtychoError::data("pretraining target contains non-finite values"));
    }
    dgp.set_anchor(target.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<&Tensor<P>> = dgp
        .unet
        .layers()
        .iter()
        .flat_map(|l| [&l.weight, &l.bias])
        .collect();
    let mut opt = AdamState::new_like(&params);
    drop(params);
    let mut history = Vec::with_capacity(iters);
    for it in 0..iters {
        // Cosine decay to ~5% of the peak rate: fast early progress, then
        // a shrinking step size so the fit settles well below the
        // input-noise level.
        let frac = it as f64 / iters.max(1) as f64;
        let decay = 0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        let hp = AdamParams { lr: lr * decay, beta2: dgp.pretrain_beta2, ..Default::default() };
        let mut tape = Tape::new();
        let (out, nodes) = dgp.generate(&mut tape, true, true, &mut rng)?;
        let tgt = tape.constant(target.clone());
        let diff = tape.sub(out, tgt)?;
        let sq = tape.abs2(diff)?;
        let loss = tape.mean(sq)?;
        let value = tape.value(loss).scalar_value()?.as_f64();
        if !value.is_finite() {
            return Err(PtychoError::divergence(format!(
                "pretraining loss became non-finite at iteration {it}"
            )));
        }
        history.push(value);
        tape.backward(loss)?;
        dgp.unet.apply_grads(&tape, &nodes, &mut opt, &hp)?;
    }
    Ok(history)
}
