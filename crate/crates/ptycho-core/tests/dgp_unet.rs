//! U-Net DGP contract tests: shapes, determinism, parameter counting,
//! input-noise statistics, gradient flow, and pre-training convergence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ptycho_core::dgp::{pretrain_autoencoder, DgpState, FinalActivation, Realness, UNet, UNetSpec};
use ptycho_core::physics::make_ideal_probe;
use ptycho_core::tensor::{Precision, Tape, Tensor};

fn rand_anchor_real(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_real(vec![c, h, w], (0..c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .unwrap()
}

#[test]
fn output_shape_matches_input_shape() {
    let spec = UNetSpec::new(3, 16, 16, Realness::Real);
    let unet = UNet::<f32>::build(spec, 7).unwrap();
    let mut tape = Tape::new();
    let input = tape.constant(Tensor::zeros_real(vec![16, 64, 64]));
    let nodes = unet.register(&mut tape, false);
    let out = unet.forward(&mut tape, input, &nodes).unwrap();
    assert_eq!(tape.value(out).shape(), &[16, 64, 64]);
}

#[test]
fn shape_preserved_across_specs() {
    for (depth, f, c, h) in [(1usize, 4usize, 2usize, 8usize), (2, 8, 3, 16), (3, 8, 5, 24), (4, 4, 2, 32)] {
        let spec = UNetSpec::new(depth, f, c, Realness::Real);
        let unet = UNet::<f32>::build(spec, 1).unwrap();
        let mut tape = Tape::new();
        let input = tape.constant(Tensor::zeros_real(vec![c, h, h]));
        let nodes = unet.register(&mut tape, false);
        let out = unet.forward(&mut tape, input, &nodes).unwrap();
        assert_eq!(tape.value(out).shape(), &[c, h, h], "depth {depth}");
    }
}

#[test]
fn indivisible_extent_is_rejected() {
    let spec = UNetSpec::new(3, 8, 2, Realness::Real);
    let unet = UNet::<f32>::build(spec, 1).unwrap();
    let mut tape = Tape::new();
    let input = tape.constant(Tensor::zeros_real(vec![2, 18, 18]));
    let nodes = unet.register(&mut tape, false);
    assert!(unet.forward(&mut tape, input, &nodes).is_err());
}

#[test]
fn identical_seeds_give_bitwise_identical_weights() {
    let spec = UNetSpec::new(3, 16, 4, Realness::Complex);
    let a = UNet::<f32>::build(spec, 42).unwrap();
    let b = UNet::<f32>::build(spec, 42).unwrap();
    for (la, lb) in a.layers().iter().zip(b.layers()) {
        assert!(la.weight.bit_eq(&lb.weight), "layer {}", la.name);
        assert!(la.bias.bit_eq(&lb.bias));
    }
    let c = UNet::<f32>::build(spec, 43).unwrap();
    assert!(!a.layers()[0].weight.bit_eq(&c.layers()[0].weight));
}

/// Independent per-layer enumeration of the architecture:
/// encoder level l: conv3(in->w_l), conv3(w_l->w_l), stride-2 conv3(w_l->w_l);
/// bottleneck: conv3(w_{d-2}->w_{d-1}), conv3(w_{d-1}->w_{d-1});
/// decoder level l: conv3(next->w_l) after upsample, conv3(2w_l->w_l) after
/// the skip concat; head: conv1(w_0->C). Biases included; complex elements
/// counted once.
fn expected_param_count(depth: usize, f: usize, c: usize) -> usize {
    let w = |l: usize| f << l;
    let conv = |c_out: usize, c_in: usize, k: usize| c_out * c_in * k * k + c_out;
    let mut total = 0;
    for l in 0..depth - 1 {
        let c_in = if l == 0 { c } else { w(l - 1) };
        total += conv(w(l), c_in, 3) + conv(w(l), w(l), 3) + conv(w(l), w(l), 3);
    }
    let mid_in = if depth == 1 { c } else { w(depth - 2) };
    total += conv(w(depth - 1), mid_in, 3) + conv(w(depth - 1), w(depth - 1), 3);
    for l in (0..depth - 1).rev() {
        let c_in = if l == depth - 2 { w(depth - 1) } else { w(l + 1) };
        total += conv(w(l), c_in, 3) + conv(w(l), 2 * w(l), 3);
    }
    total += conv(c, w(0), 1);
    total
}

#[test]
fn parameter_count_matches_enumeration_oracle() {
    for (depth, f, c) in [(2usize, 8usize, 4usize), (3, 16, 16), (4, 8, 2)] {
        let spec = UNetSpec::new(depth, f, c, Realness::Real);
        let unet = UNet::<f32>::build(spec, 0).unwrap();
        assert_eq!(
            unet.num_params(),
            expected_param_count(depth, f, c),
            "depth={depth} f={f} c={c}"
        );
    }
}

#[test]
fn generate_without_noise_is_deterministic() {
    let spec = UNetSpec::new(2, 8, 2, Realness::Real);
    let unet = UNet::<f32>::build(spec, 3).unwrap();
    let mut dgp = DgpState::new(unet);
    dgp.noise_sigma = 0.0;
    dgp.set_anchor(rand_anchor_real(2, 16, 16, 5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = {
        let mut tape = Tape::new();
        let (out, _) = dgp.generate(&mut tape, true, false, &mut rng).unwrap();
        tape.value(out).clone()
    };
    let b = {
        let mut tape = Tape::new();
        let (out, _) = dgp.generate(&mut tape, true, false, &mut rng).unwrap();
        tape.value(out).clone()
    };
    assert!(a.bit_eq(&b));

    // Non-training mode is deterministic regardless of sigma.
    dgp.noise_sigma = 0.025;
    let c = dgp.infer().unwrap();
    let d = dgp.infer().unwrap();
    assert!(c.bit_eq(&d));
}

#[test]
fn input_noise_sigma_matches_statistics() {
    // sigma = 0.025, measured over ~2e6 gaussian components.
    let spec = UNetSpec::new(1, 1, 4, Realness::Complex);
    let unet = UNet::<f32>::build(spec, 0).unwrap();
    let mut dgp = DgpState::new(unet);
    dgp.set_anchor(Tensor::zeros_complex(vec![4, 512, 512])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let perturbed = dgp.perturbed_input(true, &mut rng).unwrap();
    let mut sum_sq = 0.0f64;
    let mut n = 0usize;
    for z in perturbed.complex().unwrap() {
        sum_sq += (z.re as f64).powi(2) + (z.im as f64).powi(2);
        n += 2;
    }
    let std = (sum_sq / n as f64).sqrt();
    assert!((std - 0.025).abs() < 0.001, "measured std {std}");

    // Noise is resampled fresh each call, never accumulated.
    let again = dgp.perturbed_input(true, &mut rng).unwrap();
    assert!(!again.bit_eq(&perturbed));
    let sum_sq2: f64 = again
        .complex()
        .unwrap()
        .iter()
        .map(|z| (z.re as f64).powi(2) + (z.im as f64).powi(2))
        .sum();
    let std2 = (sum_sq2 / n as f64).sqrt();
    assert!((std2 - 0.025).abs() < 0.001, "second draw std {std2}");
}

#[test]
fn every_layer_receives_gradient() {
    let spec = UNetSpec::new(3, 8, 2, Realness::Complex);
    let unet = UNet::<f32>::build(spec, 11).unwrap();
    let mut dgp = DgpState::new(unet);
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let anchor = Tensor::from_complex(
        vec![2, 16, 16],
        (0..512)
            .map(|_| num_complex::Complex::new(rng.random_range(-1.0f32..1.0), rng.random_range(-1.0f32..1.0)))
            .collect(),
    )
    .unwrap();
    dgp.set_anchor(anchor).unwrap();
    let mut tape = Tape::new();
    let (out, nodes) = dgp.generate(&mut tape, true, true, &mut rng).unwrap();
    let p = tape.abs2(out).unwrap();
    let loss = tape.sum(p).unwrap();
    tape.backward(loss).unwrap();
    for (i, id) in nodes.flat().iter().enumerate() {
        let g = tape.grad(*id).unwrap_or_else(|| panic!("no grad for param {i}"));
        let mag = g.sum_sq().as_f64();
        assert!(mag > 0.0, "dead parameter tensor {i} ({})", dgp.unet.layers()[i / 2].name);
    }
}

#[test]
fn pretrain_constant_target_converges_monotonically() {
    let spec = UNetSpec::new(2, 8, 1, Realness::Real);
    let unet = UNet::<f32>::build(spec, 21).unwrap();
    let mut dgp = DgpState::new(unet);
    let target = Tensor::full_real(vec![1, 16, 16], 0.8f32);
    let history = pretrain_autoencoder(&mut dgp, &target, 200, 1e-3, 77).unwrap();

    let out = dgp.infer().unwrap();
    let num: f64 = out
        .real()
        .unwrap()
        .iter()
        .zip(target.real().unwrap())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum();
    let den: f64 = target.real().unwrap().iter().map(|&b| (b as f64).powi(2)).sum();
    let rel_l2 = (num / den).sqrt();
    assert!(rel_l2 < 1e-2, "relative L2 {rel_l2}");

    // Trailing 50-iteration averages decrease monotonically.
    let block = |i: usize| -> f64 { history[i..i + 50].iter().sum::<f64>() / 50.0 };
    let mut prev = block(0);
    for start in (50..=150).step_by(50) {
        let cur = block(start);
        assert!(cur <= prev * 1.0001, "trailing average rose: {prev} -> {cur} at {start}");
        prev = cur;
    }
}

#[test]
fn pretrain_zero_iterations_only_sets_anchor() {
    let spec = UNetSpec::new(2, 4, 1, Realness::Real);
    let unet = UNet::<f32>::build(spec, 2).unwrap();
    let weights_before: Vec<Tensor<f32>> =
        unet.layers().iter().map(|l| l.weight.clone()).collect();
    let mut dgp = DgpState::new(unet);
    let target = rand_anchor_real(1, 8, 8, 4);
    assert!(dgp.anchor().is_none());
    pretrain_autoencoder(&mut dgp, &target, 0, 1e-3, 0).unwrap();
    assert!(dgp.anchor().unwrap().bit_eq(&target));
    for (l, before) in dgp.unet.layers().iter().zip(&weights_before) {
        assert!(l.weight.bit_eq(before));
    }
}

#[test]
fn pretrain_reproduces_ideal_probe() {
    // Engine convention: anchors are scaled to unit RMS by the caller, so
    // the sigma=0.025 input noise is meaningful relative to the signal.
    let probe = make_ideal_probe::<f32>(200.0, 25.0, 50.0, 0.0, (64, 64), (0.1, 0.1)).unwrap();
    let rms = (probe.modes.sum_sq() / 4096.0).sqrt();
    let scale = 1.0 / rms;
    let target = Tensor::from_complex(
        vec![1, 64, 64],
        probe.modes.complex().unwrap().iter().map(|z| z * scale).collect::<Vec<_>>(),
    )
    .unwrap();

    let spec = UNetSpec::new(3, 16, 1, Realness::Complex);
    let unet = UNet::<f32>::build(spec, 33).unwrap();
    let mut dgp = DgpState::new(unet);
    pretrain_autoencoder(&mut dgp, &target, 500, 1e-3, 55).unwrap();

    let out = dgp.infer().unwrap();
    let num: f64 = out
        .complex()
        .unwrap()
        .iter()
        .zip(target.complex().unwrap())
        .map(|(a, b)| (a - b).norm_sqr() as f64)
        .sum();
    let den: f64 = target.complex().unwrap().iter().map(|b| b.norm_sqr() as f64).sum();
    let rel_l2 = (num / den).sqrt();
    assert!(rel_l2 < 1e-2, "relative L2 {rel_l2}");
    assert!(!out.bit_eq(&target)); // the network reproduces, not copies
}

#[test]
fn real_spec_rejects_complex_anchor_and_softplus_guards_realness() {
    let spec = UNetSpec::new(2, 4, 1, Realness::Real);
    let unet = UNet::<f32>::build(spec, 0).unwrap();
    let mut dgp = DgpState::new(unet);
    assert!(dgp.set_anchor(Tensor::zeros_complex(vec![1, 8, 8])).is_err());

    let mut bad = UNetSpec::new(2, 4, 1, Realness::Complex);
    bad.final_activation = FinalActivation::Softplus;
    assert!(UNet::<f32>::build(bad, 0).is_err());

    // Softplus head on a real potential network produces nonnegative output.
    let mut spec = UNetSpec::new(2, 4, 2, Realness::Real);
    spec.final_activation = FinalActivation::Softplus;
    let unet = UNet::<f32>::build(spec, 5).unwrap();
    let mut dgp = DgpState::new(unet);
    dgp.set_anchor(rand_anchor_real(2, 8, 8, 1)).unwrap();
    let out = dgp.infer().unwrap();
    assert!(!out.is_complex());
    assert!(out.real().unwrap().iter().all(|&x| x >= 0.0));
}
