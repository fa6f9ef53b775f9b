//! Finite-difference oracles and contract tests for every tape primitive.

use num_complex::Complex;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ptycho_core::tensor::gradcheck::{self, GradCheckReport};
use ptycho_core::tensor::{NodeId, Tape, Tensor};
use ptycho_core::PtychoError;

type T64 = Tensor<f64>;

fn rand_real(shape: &[usize], rng: &mut ChaCha8Rng) -> T64 {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_real(shape.to_vec(), v).unwrap()
}

fn rand_complex(shape: &[usize], rng: &mut ChaCha8Rng) -> T64 {
    let n: usize = shape.iter().product();
    let v: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    Tensor::from_complex(shape.to_vec(), v).unwrap()
}

/// Offset random values away from zero so kinked ops (|.|, relu, sqrt)
/// are checked at differentiable points.
fn rand_real_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> T64 {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) { x } else { -x }
        })
        .collect();
    Tensor::from_real(shape.to_vec(), v).unwrap()
}

fn fd_check<F>(params: &[T64], build: F) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
{
    let f = |ps: &[T64]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<_> = ps.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).scalar_value().unwrap()
    };
    let analytic = |ps: &[T64]| -> Vec<T64> {
        let mut tape = Tape::new();
        let ids: Vec<_> = ps.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let loss = build(&mut tape, &ids);
        tape.backward(loss).unwrap();
        ids.iter().map(|&id| tape.grad(id).unwrap().clone()).collect()
    };
    gradcheck::check(params, f, analytic, 1e-5)
}

fn assert_fd(report: GradCheckReport) {
    assert!(
        report.within(1e-4),
        "finite-difference mismatch: rel={:.3e} abs={:.3e} over {} components",
        report.max_rel_err,
        report.max_abs_err,
        report.components
    );
}

// ── fft2 / ifft2 ────────────────────────────────────────────────────

#[test]
fn fft2_of_zeros_is_zeros() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros_complex(vec![4, 4]));
    let y = tape.fft2(x).unwrap();
    assert!(tape.value(y).complex().unwrap().iter().all(|z| z.norm() == 0.0));
}

#[test]
fn fft2_roundtrip_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_complex(&[8, 8], &mut rng);
    let mut tape = Tape::<f64>::new();
    let xid = tape.constant(x.clone());
    let f = tape.fft2(xid).unwrap();
    let b = tape.ifft2(f).unwrap();
    let err = tape
        .value(b)
        .complex()
        .unwrap()
        .iter()
        .zip(x.complex().unwrap())
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    assert!(err < 1e-10, "roundtrip err {err}");
}

#[test]
fn fft2_parseval_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_complex(&[16, 16], &mut rng);
    // Direct-summation oracle for both sides.
    let spatial: f64 = x.complex().unwrap().iter().map(|z| z.norm_sqr()).sum();
    let mut tape = Tape::<f64>::new();
    let xid = tape.constant(x);
    let f = tape.fft2(xid).unwrap();
    let spectral: f64 = tape.value(f).complex().unwrap().iter().map(|z| z.norm_sqr()).sum();
    let rel = (spatial - spectral / 256.0).abs() / spatial;
    assert!(rel < 1e-10, "Parseval rel err {rel}");
}

#[test]
fn fft2_rejects_real_input() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros_real(vec![4, 4]));
    assert!(matches!(tape.fft2(x), Err(PtychoError::Dtype(_))));
}

#[test]
fn fft2_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_complex(&[4, 6], &mut rng);
    assert_fd(fd_check(&[x], |tape, ids| {
        let f = tape.fft2(ids[0]).unwrap();
        let p = tape.abs2(f).unwrap();
        tape.mean(p).unwrap()
    }));
}

#[test]
fn ifft2_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_complex(&[4, 4], &mut rng);
    assert_fd(fd_check(&[x], |tape, ids| {
        let f = tape.ifft2(ids[0]).unwrap();
        let p = tape.abs2(f).unwrap();
        tape.sum(p).unwrap()
    }));
}

// ── conv2d ──────────────────────────────────────────────────────────

#[test]
fn conv2d_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_real(&[1, 5, 5], &mut rng);
    let k = Tensor::from_real(vec![1, 1, 1, 1], vec![1.0]).unwrap();
    let mut tape = Tape::<f64>::new();
    let xid = tape.constant(x.clone());
    let kid = tape.constant(k);
    let y = tape.conv2d(xid, kid, 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv2d_ones_kernel_constant_input() {
    let c = 0.7;
    let x = Tensor::full_real(vec![1, 6, 6], c);
    let k = Tensor::full_real(vec![1, 1, 3, 3], 1.0);
    let mut tape = Tape::<f64>::new();
    let xid = tape.constant(x);
    let kid = tape.constant(k);
    let y = tape.conv2d(xid, kid, 1, 1).unwrap();
    let v = tape.value(y).real().unwrap();
    // Interior (away from the zero-padded border) sums all nine taps.
    for yy in 1..5 {
        for xx in 1..5 {
            assert!((v[yy * 6 + xx] - 9.0 * c).abs() < 1e-12);
        }
    }
    // Corner touches only four in-bounds taps.
    assert!((v[0] - 4.0 * c).abs() < 1e-12);
}

#[test]
fn conv2d_channel_mismatch_is_shape_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros_real(vec![2, 4, 4]));
    let k = tape.constant(Tensor::zeros_real(vec![1, 3, 3, 3]));
    assert!(matches!(tape.conv2d(x, k, 1, 1), Err(PtychoError::Shape(_))));
}

#[test]
fn conv2d_gradient_matches_fd_real() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_real(&[2, 5, 5], &mut rng);
    let k = rand_real(&[3, 2, 3, 3], &mut rng);
    assert_fd(fd_check(&[x, k], |tape, ids| {
        let y = tape.conv2d(ids[0], ids[1], 1, 1).unwrap();
        let p = tape.abs2(y).unwrap();
        tape.sum(p).unwrap()
    }));
}

#[test]
fn conv2d_gradient_matches_fd_complex_strided() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_complex(&[2, 6, 6], &mut rng);
    let k = rand_complex(&[2, 2, 3, 3], &mut rng);
    assert_fd(fd_check(&[x, k], |tape, ids| {
        let y = tape.conv2d(ids[0], ids[1], 2, 1).unwrap();
        let p = tape.abs2(y).unwrap();
        tape.sum(p).unwrap()
    }));
}

// ── upsample2x ──────────────────────────────────────────────────────

#[test]
fn upsample2x_single_pixel() {
    let x = Tensor::from_real(vec![1, 1, 1], vec![1.0]).unwrap();
    let mut tape = Tape::<f64>::new();
    let xid = tape.constant(x);
    let y = tape.upsample2x(xid).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 2, 2]);
    assert_eq!(tape.value(y).real().unwrap(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn upsample2x_preserves_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_real(&[3, 4, 4], &mut rng);
    let mean_in: f64 = x.real().unwrap().iter().sum::<f64>() / x.numel() as f64;
    let mut tape = Tape::<f64>::new();
    let xid = tape.constant(x);
    let y = tape.upsample2x(xid).unwrap();
    let mean_out: f64 =
        tape.value(y).real().unwrap().iter().sum::<f64>() / tape.value(y).numel() as f64;
    assert!((mean_in - mean_out).abs() < 1e-12);
}

#[test]
fn upsample2x_sum_gradient_is_all_fours() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_real(&[1, 3, 3], &mut rng);
    let mut tape = Tape::<f64>::new();
    let xid = tape.leaf(x, true);
    let y = tape.upsample2x(xid).unwrap();
    let loss = tape.sum(y).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(xid).unwrap().real().unwrap().iter().all(|&g| g == 4.0));
}

// ── activations ─────────────────────────────────────────────────────

#[test]
fn relu_definition() {
    let x = Tensor::from_real(vec![2], vec![-2.0, 3.0]).unwrap();
    let mut tape = Tape::<f64>::new();
    let xid = tape.constant(x);
    let y = tape.relu(xid).unwrap();
    assert_eq!(tape.value(y).real().unwrap(), &[0.0, 3.0]);
}

#[test]
fn softplus_closed_forms() {
    let x = Tensor::from_real(vec![2], vec![0.0, 40.0]).unwrap();
    let mut tape = Tape::<f64>::new();
    let xid = tape.constant(x);
    let y = tape.softplus(xid).unwrap();
    let v = tape.value(y).real().unwrap();
    assert!((v[0] - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((v[1] - 40.0).abs() < 1e-12);
}

#[test]
fn activation_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_real_off_zero(&[3, 4], &mut rng);
    assert_fd(fd_check(&[x.clone()], |tape, ids| {
        let y = tape.relu(ids[0]).unwrap();
        let p = tape.abs2(y).unwrap();
        tape.sum(p).unwrap()
    }));
    assert_fd(fd_check(&[x], |tape, ids| {
        let y = tape.softplus(ids[0]).unwrap();
        let p = tape.abs2(y).unwrap();
        tape.mean(p).unwrap()
    }));
    let z = rand_complex(&[3, 3], &mut rng);
    assert_fd(fd_check(&[z], |tape, ids| {
        let y = tape.relu(ids[0]).unwrap();
        let p = tape.abs2(y).unwrap();
        tape.sum(p).unwrap()
    }));
}

// ── complex-specific ops ────────────────────────────────────────────

#[test]
fn cexp_cabs_carg_make_complex_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z = rand_complex(&[3, 3], &mut rng);
    assert_fd(fd_check(&[z.clone()], |tape, ids| {
        let y = tape.cexp(ids[0]).unwrap();
        let p = tape.abs2(y).unwrap();
        tape.sum(p).unwrap()
    }));
    // |z| and arg(z) away from the origin.
    let shifted: Vec<Complex<f64>> =
        z.complex().unwrap().iter().map(|w| w + Complex::new(3.0, 0.5)).collect();
    let zs = Tensor::from_complex(vec![3, 3], shifted).unwrap();
    assert_fd(fd_check(&[zs.clone()], |tape, ids| {
        let m = tape.cabs(ids[0]).unwrap();
        let p = tape.abs2(m).unwrap();
        tape.sum(p).unwrap()
    }));
    assert_fd(fd_check(&[zs], |tape, ids| {
        let a = tape.carg(ids[0]).unwrap();
        let p = tape.abs2(a).unwrap();
        tape.mean(p).unwrap()
    }));
    let re = rand_real(&[4], &mut rng);
    let im = rand_real(&[4], &mut rng);
    assert_fd(fd_check(&[re, im], |tape, ids| {
        let z = tape.make_complex(ids[0], ids[1]).unwrap();
        let e = tape.cexp(z).unwrap();
        let p = tape.abs2(e).unwrap();
        tape.sum(p).unwrap()
    }));
}

// ── reductions, structure, misc ─────────────────────────────────────

#[test]
fn remaining_primitives_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);

    // mul (complex), scale, mul_scalar, mul_bcast0, bias_add
    let a = rand_complex(&[2, 3], &mut rng);
    let b = rand_complex(&[2, 3], &mut rng);
    assert_fd(fd_check(&[a, b], |tape, ids| {
        let y = tape.mul(ids[0], ids[1]).unwrap();
        let p = tape.abs2(y).unwrap();
        tape.sum(p).unwrap()
    }));

    let x = rand_real(&[5], &mut rng);
    assert_fd(fd_check(&[x], |tape, ids| {
        let y = tape.scale(ids[0], -1.7).unwrap();
        let p = tape.abs2(y).unwrap();
        tape.sum(p).unwrap()
    }));

    let s = rand_real(&[], &mut rng);
    let t = rand_real(&[3, 3], &mut rng);
    assert_fd(fd_check(&[s, t], |tape, ids| {
        let y = tape.mul_scalar(ids[0], ids[1]).unwrap();
        let p = tape.abs2(y).unwrap();
        tape.sum(p).unwrap()
    }));

    let small = rand_complex(&[3, 3], &mut rng);
    let big = rand_complex(&[2, 3, 3], &mut rng);
    assert_fd(fd_check(&[small, big], |tape, ids| {
        let y = tape.mul_bcast0(ids[0], ids[1]).unwrap();
        let p = tape.abs2(y).unwrap();
        tape.sum(p).unwrap()
    }));

    let xc = rand_complex(&[2, 3, 3], &mut rng);
    let bias = rand_complex(&[2], &mut rng);
    assert_fd(fd_check(&[xc, bias], |tape, ids| {
        let y = tape.bias_add(ids[0], ids[1]).unwrap();
        let p = tape.abs2(y).unwrap();
        tape.sum(p).unwrap()
    }));

    // sqrt_nonneg and ln_shift on strictly positive input
    let pos = Tensor::from_real(
        vec![4],
        (0..4).map(|i| 0.5 + 0.3 * i as f64).collect::<Vec<_>>(),
    )
    .unwrap();
    assert_fd(fd_check(&[pos.clone()], |tape, ids| {
        let y = tape.sqrt_nonneg(ids[0]).unwrap();
        let p = tape.abs2(y).unwrap();
        tape.sum(p).unwrap()
    }));
    assert_fd(fd_check(&[pos], |tape, ids| {
        let y = tape.ln_shift(ids[0], 1e-9).unwrap();
        let p = tape.abs2(y).unwrap();
        tape.mean(p).unwrap()
    }));

    // abs_sum away from zero
    let off = rand_real_off_zero(&[6], &mut rng);
    assert_fd(fd_check(&[off], |tape, ids| tape.abs_sum(ids[0]).unwrap()));

    // sum_axis0, concat0, slice_axis0, crop, pad, reshape
    let v = rand_complex(&[3, 2, 2], &mut rng);
    assert_fd(fd_check(&[v], |tape, ids| {
        let y = tape.sum_axis0(ids[0]).unwrap();
        let p = tape.abs2(y).unwrap();
        tape.sum(p).unwrap()
    }));

    let p1 = rand_real(&[1, 2, 2], &mut rng);
    let p2 = rand_real(&[2, 2, 2], &mut rng);
    assert_fd(fd_check(&[p1, p2], |tape, ids| {
        let y = tape.concat0(&[ids[0], ids[1]]).unwrap();
        let s = tape.slice_axis0(y, 1, 2).unwrap();
        let p = tape.abs2(s).unwrap();
        tape.sum(p).unwrap()
    }));

    let img = rand_complex(&[2, 5, 5], &mut rng);
    assert_fd(fd_check(&[img], |tape, ids| {
        let c = tape.crop_hw(ids[0], 1, 2, 3, 3).unwrap();
        let padded = tape.pad_hw(c, 1, 1, 6, 6).unwrap();
        let r = tape.reshape(padded, vec![2 * 36]).unwrap();
        let p = tape.abs2(r).unwrap();
        tape.sum(p).unwrap()
    }));
}

#[test]
fn quadratic_loss_gradient() {
    let x = Tensor::from_real(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let mut tape = Tape::<f64>::new();
    let xid = tape.leaf(x, true);
    let sq = tape.abs2(xid).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(xid).unwrap().real().unwrap(), &[2.0, -4.0, 1.0]);
}

#[test]
fn complex_gradient_is_descent_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let z = rand_complex(&[4, 4], &mut rng);
    let mut tape = Tape::<f64>::new();
    let zid = tape.leaf(z.clone(), true);
    let p = tape.abs2(zid).unwrap();
    let loss = tape.sum(p).unwrap();
    let l0 = tape.value(loss).scalar_value().unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(zid).unwrap().clone();

    let eta = 0.05;
    let stepped: Vec<Complex<f64>> = z
        .complex()
        .unwrap()
        .iter()
        .zip(g.complex().unwrap())
        .map(|(&zi, &gi)| zi - gi * eta)
        .collect();
    let l1: f64 = stepped.iter().map(|w| w.norm_sqr()).sum();
    assert!(l1 < l0, "descent step did not decrease loss: {l0} -> {l1}");
}

#[test]
fn backward_rejects_nonscalar_and_complex_losses() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros_real(vec![3]), true);
    assert!(matches!(tape.backward(x), Err(PtychoError::Contract(_))));

    let mut tape = Tape::<f64>::new();
    let z = tape.leaf(Tensor::zeros_complex(vec![]), true);
    assert!(matches!(tape.backward(z), Err(PtychoError::Contract(_))));
}

#[test]
fn tape_consumed_after_backward() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(2.0), true);
    let loss = tape.abs2(x).unwrap();
    let loss = tape.reshape(loss, Vec::<usize>::new()).unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.add(x, x), Err(PtychoError::Contract(_))));
}

#[test]
fn straight_through_passes_gradient_and_replaces_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_real(&[2, 2], &mut rng);
    let replacement = Tensor::full_real(vec![2, 2], 5.0);
    let mut tape = Tape::<f64>::new();
    let xid = tape.leaf(x, true);
    let y = tape.straight_through(xid, replacement.clone()).unwrap();
    assert_eq!(tape.value(y), &replacement);
    let loss = tape.sum(y).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(xid).unwrap().real().unwrap().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rand_complex(&[4, 4], &mut rng);
        let k = rand_complex(&[2, 1, 3, 3], &mut rng);
        let mut tape = Tape::<f64>::new();
        let xid = tape.leaf(x, true);
        let kid = tape.leaf(k, true);
        let x3 = tape.reshape(xid, vec![1, 4, 4]).unwrap();
        let y = tape.conv2d(x3, kid, 1, 1).unwrap();
        let f = tape.fft2(y).unwrap();
        let p = tape.abs2(f).unwrap();
        let loss = tape.mean(p).unwrap();
        tape.backward(loss).unwrap();
        tape.grad(xid)
            .unwrap()
            .complex()
            .unwrap()
            .iter()
            .flat_map(|z| [z.re.to_bits(), z.im.to_bits()])
            .collect()
    };
    assert_eq!(run(), run());
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = rand_real(&[4], &mut rng);
    let (alpha, beta) = (0.7, -1.3);

    let grad_of = |which: u8| -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let xid = tape.leaf(x.clone(), true);
        let sq = tape.abs2(xid).unwrap();
        let l1 = tape.sum(sq).unwrap();
        let sp = tape.softplus(xid).unwrap();
        let l2 = tape.mean(sp).unwrap();
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => {
                let a = tape.scale(l1, alpha).unwrap();
                let b = tape.scale(l2, beta).unwrap();
                tape.add(a, b).unwrap()
            }
        };
        tape.backward(loss).unwrap();
        tape.grad(xid).unwrap().real().unwrap().to_vec()
    };

    let g1 = grad_of(1);
    let g2 = grad_of(2);
    let gc = grad_of(0);
    for i in 0..4 {
        assert!((gc[i] - (alpha * g1[i] + beta * g2[i])).abs() < 1e-12);
    }
}

// ── property tests ──────────────────────────────────────────────────

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prop_fft_roundtrip(h in 2usize..9, w in 2usize..9, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_complex(&[h, w], &mut rng);
        let mut tape = Tape::<f64>::new();
        let xid = tape.constant(x.clone());
        let f = tape.fft2(xid).unwrap();
        let b = tape.ifft2(f).unwrap();
        let err = tape.value(b).complex().unwrap().iter()
            .zip(x.complex().unwrap())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        prop_assert!(err < 1e-10);
    }

    #[test]
    fn prop_slice_of_concat_is_identity(a0 in 1usize..4, b0 in 1usize..4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_real(&[a0, 3], &mut rng);
        let b = rand_real(&[b0, 3], &mut rng);
        let mut tape = Tape::<f64>::new();
        let aid = tape.constant(a.clone());
        let bid = tape.constant(b);
        let cat = tape.concat0(&[aid, bid]).unwrap();
        let back = tape.slice_axis0(cat, 0, a0).unwrap();
        prop_assert_eq!(tape.value(back), &a);
    }
}
