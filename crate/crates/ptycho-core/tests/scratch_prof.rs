//! Temporary profiling harness (run with --ignored --nocapture).

use std::time::Instant;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ptycho_core::dgp::{DgpState, Realness, UNet, UNetSpec};
use ptycho_core::tensor::{Tape, Tensor};

fn randc(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_complex(
        shape.to_vec(),
        (0..n)
            .map(|_| Complex::new(rng.random_range(-1.0f32..1.0), rng.random_range(-1.0f32..1.0)))
            .collect::<Vec<_>>(),
    )
    .unwrap()
}

#[test]
#[ignore]
fn profile_unet_iteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // Dominant conv shape: complex 16->16 3x3 on 64x64.
    let x = randc(&[16, 64, 64], &mut rng);
    let k = randc(&[16, 16, 3, 3], &mut rng);
    let reps = 20;
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let xi = tape.constant(x.clone());
        let ki = tape.constant(k.clone());
        let _ = tape.conv2d(xi, ki, 1, 1).unwrap();
    }
    println!("conv fwd 16x16x64x64 c32: {:.1} ms", t0.elapsed().as_millis() as f64 / reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let xi = tape.leaf(x.clone(), true);
        let ki = tape.leaf(k.clone(), true);
        let y = tape.conv2d(xi, ki, 1, 1).unwrap();
        let p = tape.abs2(y).unwrap();
        let l = tape.sum(p).unwrap();
        tape.backward(l).unwrap();
    }
    println!("conv fwd+bwd: {:.1} ms", t0.elapsed().as_millis() as f64 / reps as f64);

    // Full DGP generate forward only vs with backward.
    let spec = UNetSpec::new(3, 16, 1, Realness::Complex);
    let unet = UNet::<f32>::build(spec, 33).unwrap();
    let mut dgp = DgpState::new(unet);
    dgp.set_anchor(randc(&[1, 64, 64], &mut rng)).unwrap();

    let t0 = Instant::now();
    for _ in 0..5 {
        let mut tape = Tape::<f32>::new();
        let _ = dgp.generate(&mut tape, true, false, &mut rng).unwrap();
    }
    println!("unet fwd: {:.1} ms", t0.elapsed().as_millis() as f64 / 5.0);

    let t0 = Instant::now();
    for _ in 0..5 {
        let mut tape = Tape::<f32>::new();
        let (out, _) = dgp.generate(&mut tape, true, true, &mut rng).unwrap();
        let p = tape.abs2(out).unwrap();
        let l = tape.mean(p).unwrap();
        tape.backward(l).unwrap();
    }
    println!("unet fwd+bwd: {:.1} ms", t0.elapsed().as_millis() as f64 / 5.0);

    // Real conv of same size for comparison.
    let xr = Tensor::<f32>::from_real(
        vec![16, 64, 64],
        (0..16 * 64 * 64).map(|i| (i % 17) as f32).collect::<Vec<_>>(),
    )
    .unwrap();
    let kr = Tensor::<f32>::from_real(
        vec![16, 16, 3, 3],
        (0..16 * 16 * 9).map(|i| (i % 5) as f32 - 2.0).collect::<Vec<_>>(),
    )
    .unwrap();
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let xi = tape.constant(xr.clone());
        let ki = tape.constant(kr.clone());
        let _ = tape.conv2d(xi, ki, 1, 1).unwrap();
    }
    println!("conv fwd real: {:.1} ms", t0.elapsed().as_millis() as f64 / reps as f64);

    ptycho_core::tensor::set_compute_threads(2);
    let t0 = Instant::now();
    for _ in 0..5 {
        let mut tape = Tape::<f32>::new();
        let (out, _) = dgp.generate(&mut tape, true, true, &mut rng).unwrap();
        let p = tape.abs2(out).unwrap();
        let l = tape.mean(p).unwrap();
        tape.backward(l).unwrap();
    }
    println!("unet fwd+bwd 2 threads: {:.1} ms", t0.elapsed().as_millis() as f64 / 5.0);
    ptycho_core::tensor::set_compute_threads(1);
}
