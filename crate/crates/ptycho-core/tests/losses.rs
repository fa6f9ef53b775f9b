//! Exact hand-computed loss values, constraint projections, and gradient
//! oracles for the regularizers.

use num_complex::Complex;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ptycho_core::loss::{
    fidelity_loss, gram_offdiag_ratio, orthogonalize_modes, surface_zero_loss, tie_slices,
    tv_loss, FidelityKind,
};
use ptycho_core::tensor::{gradcheck, NodeId, Tape, Tensor};
use ptycho_core::PtychoError;

fn scalar_of(tape: &Tape<f64>, id: NodeId) -> f64 {
    tape.value(id).scalar_value().unwrap()
}

// ── anisotropic TV (Eq. 1 behavior) ─────────────────────────────────

#[test]
fn tv_hand_case() {
    // X=2, Y=2, Z=1, values [[0,1],[2,3]], l_xy=1, l_z=0:
    // (|2-0| + |3-1| + |1-0| + |3-2|) / 4 = 1.5
    let v = Tensor::from_real(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let mut tape = Tape::<f64>::new();
    let vid = tape.constant(v);
    let loss = tv_loss(&mut tape, vid, 1.0, 0.0).unwrap();
    assert!((scalar_of(&tape, loss) - 1.5).abs() < 1e-12);
}

#[test]
fn tv_constant_volume_is_zero() {
    let v = Tensor::full_real(vec![3, 4, 4], 2.7);
    let mut tape = Tape::<f64>::new();
    let vid = tape.constant(v);
    let loss = tv_loss(&mut tape, vid, 1.0, 0.5).unwrap();
    assert_eq!(scalar_of(&tape, loss), 0.0);
}

#[test]
fn tv_zero_weights_give_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let v: Vec<f64> = (0..2 * 3 * 3).map(|_| rng.random_range(-5.0..5.0)).collect();
    let v = Tensor::from_real(vec![2, 3, 3], v).unwrap();
    let mut tape = Tape::<f64>::new();
    let vid = tape.constant(v);
    let loss = tv_loss(&mut tape, vid, 0.0, 0.0).unwrap();
    assert_eq!(scalar_of(&tape, loss), 0.0);
}

#[test]
fn tv_z_direction_hand_case() {
    // Two slices of constants 0 and 3 on a 2x2 plane: only z-differences,
    // sum = 4*3 = 12, over XYZ = 8, l_z = 0.5 -> 0.75.
    let v = Tensor::from_real(vec![2, 2, 2], vec![0.0, 0.0, 0.0, 0.0, 3.0, 3.0, 3.0, 3.0]).unwrap();
    let mut tape = Tape::<f64>::new();
    let vid = tape.constant(v);
    let loss = tv_loss(&mut tape, vid, 1.0, 0.5).unwrap();
    assert!((scalar_of(&tape, loss) - 0.75).abs() < 1e-12);
}

#[test]
fn tv_gradient_matches_fd_away_from_kinks() {
    // Strictly increasing values keep all |.| arguments away from zero.
    let v: Vec<f64> = (0..2 * 3 * 3).map(|i| (i as f64) * 0.37 + 0.1).collect();
    let v = Tensor::from_real(vec![2, 3, 3], v).unwrap();
    let f = |ps: &[Tensor<f64>]| {
        let mut tape = Tape::<f64>::new();
        let id = tape.leaf(ps[0].clone(), false);
        let l = tv_loss(&mut tape, id, 0.8, 0.3).unwrap();
        scalar_of(&tape, l)
    };
    let analytic = |ps: &[Tensor<f64>]| {
        let mut tape = Tape::<f64>::new();
        let id = tape.leaf(ps[0].clone(), true);
        let l = tv_loss(&mut tape, id, 0.8, 0.3).unwrap();
        tape.backward(l).unwrap();
        vec![tape.grad(id).unwrap().clone()]
    };
    let report = gradcheck::check(&[v], f, analytic, 1e-5);
    assert!(report.within(1e-4), "tv rel err {:.2e}", report.max_rel_err);
}

#[test]
fn tv_complex_volume_penalizes_phase_and_amplitude() {
    // Constant amplitude, varying phase: only the phase branch fires.
    let phases = [0.1, 0.5, 0.1, 0.5];
    let v: Vec<Complex<f64>> = phases.iter().map(|&p| Complex::from_polar(2.0, p)).collect();
    let v = Tensor::from_complex(vec![1, 2, 2], v).unwrap();
    let mut tape = Tape::<f64>::new();
    let vid = tape.constant(v);
    let loss = tv_loss(&mut tape, vid, 1.0, 0.0).unwrap();
    // Per row |0.5-0.1| twice in x, amplitude contributes nothing;
    // y-differences are zero. (0.4+0.4)/4 = 0.2
    assert!((scalar_of(&tape, loss) - 0.2).abs() < 1e-12);
}

// ── surface-zero (Eq. 2 behavior) ───────────────────────────────────

#[test]
fn surface_zero_hand_case() {
    // X=2, Y=2, Z=3, top slice all 1, bottom all 2, l_surf=1:
    // (4 + 8) / (2*4) = 1.5
    let mut v = vec![0.0f64; 12];
    v[..4].fill(1.0);
    v[8..].fill(2.0);
    let v = Tensor::from_real(vec![3, 2, 2], v).unwrap();
    let mut tape = Tape::<f64>::new();
    let vid = tape.constant(v);
    let loss = surface_zero_loss(&mut tape, vid, 1.0).unwrap();
    assert!((scalar_of(&tape, loss) - 1.5).abs() < 1e-12);
}

#[test]
fn surface_zero_vanishes_for_empty_surfaces() {
    let mut v = vec![0.0f64; 3 * 4];
    v[4..8].fill(9.0); // interior slice only
    let v = Tensor::from_real(vec![3, 2, 2], v).unwrap();
    let mut tape = Tape::<f64>::new();
    let vid = tape.constant(v);
    let loss = surface_zero_loss(&mut tape, vid, 2.0).unwrap();
    assert_eq!(scalar_of(&tape, loss), 0.0);
}

#[test]
fn surface_zero_is_linear_in_its_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let v: Vec<f64> = (0..3 * 2 * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
    let v = Tensor::from_real(vec![3, 2, 2], v).unwrap();
    let eval = |lambda: f64| {
        let mut tape = Tape::<f64>::new();
        let vid = tape.constant(v.clone());
        let loss = surface_zero_loss(&mut tape, vid, lambda).unwrap();
        scalar_of(&tape, loss)
    };
    assert!((eval(2.0) - 2.0 * eval(1.0)).abs() < 1e-12);
}

#[test]
fn surface_zero_requires_two_slices() {
    let v = Tensor::zeros_real(vec![1, 4, 4]);
    let mut tape = Tape::<f64>::new();
    let vid = tape.constant(v);
    assert!(matches!(
        surface_zero_loss(&mut tape, vid, 1.0),
        Err(PtychoError::Contract(_))
    ));
}

#[test]
fn surface_zero_gradient_matches_fd() {
    let v: Vec<f64> = (0..3 * 2 * 2).map(|i| 0.3 + 0.21 * i as f64).collect();
    let v = Tensor::from_real(vec![3, 2, 2], v).unwrap();
    let f = |ps: &[Tensor<f64>]| {
        let mut tape = Tape::<f64>::new();
        let id = tape.leaf(ps[0].clone(), false);
        let l = surface_zero_loss(&mut tape, id, 1.3).unwrap();
        scalar_of(&tape, l)
    };
    let analytic = |ps: &[Tensor<f64>]| {
        let mut tape = Tape::<f64>::new();
        let id = tape.leaf(ps[0].clone(), true);
        let l = surface_zero_loss(&mut tape, id, 1.3).unwrap();
        tape.backward(l).unwrap();
        vec![tape.grad(id).unwrap().clone()]
    };
    let report = gradcheck::check(&[v], f, analytic, 1e-5);
    assert!(report.within(1e-4));
}

// ── fidelity ────────────────────────────────────────────────────────

#[test]
fn amplitude_mse_perfect_fit_is_zero() {
    let meas = Tensor::from_real(vec![2, 2], vec![1.0, 4.0, 9.0, 0.25]).unwrap();
    let mut tape = Tape::<f64>::new();
    let pred = tape.constant(meas.clone());
    let l = fidelity_loss(&mut tape, pred, &meas, FidelityKind::AmplitudeMse).unwrap();
    assert_eq!(scalar_of(&tape, l), 0.0);
}

#[test]
fn amplitude_mse_hand_value() {
    // pred=[4], measured=[1]: (2-1)^2 = 1
    let meas = Tensor::from_real(vec![1], vec![1.0]).unwrap();
    let mut tape = Tape::<f64>::new();
    let pred = tape.constant(Tensor::from_real(vec![1], vec![4.0]).unwrap());
    let l = fidelity_loss(&mut tape, pred, &meas, FidelityKind::AmplitudeMse).unwrap();
    assert!((scalar_of(&tape, l) - 1.0).abs() < 1e-12);
}

#[test]
fn negative_measured_is_a_data_error() {
    let meas = Tensor::from_real(vec![1], vec![-0.5]).unwrap();
    let mut tape = Tape::<f64>::new();
    let pred = tape.constant(Tensor::from_real(vec![1], vec![1.0]).unwrap());
    assert!(matches!(
        fidelity_loss(&mut tape, pred, &meas, FidelityKind::AmplitudeMse),
        Err(PtychoError::Data(_))
    ));
}

#[test]
fn fidelity_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let pred: Vec<f64> = (0..9).map(|_| rng.random_range(0.5..4.0)).collect();
    let meas: Vec<f64> = (0..9).map(|_| rng.random_range(0.5..4.0)).collect();
    let pred = Tensor::from_real(vec![3, 3], pred).unwrap();
    let meas = Tensor::from_real(vec![3, 3], meas).unwrap();
    for kind in [FidelityKind::AmplitudeMse, FidelityKind::PoissonNll] {
        let meas2 = meas.clone();
        let f = move |ps: &[Tensor<f64>]| {
            let mut tape = Tape::<f64>::new();
            let id = tape.leaf(ps[0].clone(), false);
            let l = fidelity_loss(&mut tape, id, &meas2, kind).unwrap();
            scalar_of(&tape, l)
        };
        let meas3 = meas.clone();
        let analytic = move |ps: &[Tensor<f64>]| {
            let mut tape = Tape::<f64>::new();
            let id = tape.leaf(ps[0].clone(), true);
            let l = fidelity_loss(&mut tape, id, &meas3, kind).unwrap();
            tape.backward(l).unwrap();
            vec![tape.grad(id).unwrap().clone()]
        };
        let report = gradcheck::check(&[pred.clone()], f, analytic, 1e-5);
        assert!(report.within(1e-4), "{kind:?} rel err {:.2e}", report.max_rel_err);
    }
}

// ── hard constraints ────────────────────────────────────────────────

fn rand_modes(m: usize, n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let v: Vec<Complex<f64>> = (0..m * n * n)
        .map(|_| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    Tensor::from_complex(vec![m, n, n], v).unwrap()
}

#[test]
fn single_mode_is_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let modes = rand_modes(1, 8, &mut rng);
    let out = orthogonalize_modes(&modes).unwrap();
    assert_eq!(out, modes);
}

#[test]
fn duplicate_modes_become_orthogonal_with_zero_second_power() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let single = rand_modes(1, 8, &mut rng);
    let mut doubled = single.complex().unwrap().to_vec();
    doubled.extend_from_slice(single.complex().unwrap());
    let modes = Tensor::from_complex(vec![2, 8, 8], doubled).unwrap();
    let out = orthogonalize_modes(&modes).unwrap();

    let ratio = gram_offdiag_ratio(&out).unwrap();
    assert!(ratio < 1e-12, "off-diag ratio {ratio}");

    let n = 64;
    let b = out.complex().unwrap();
    let p0: f64 = b[..n].iter().map(|z| z.norm_sqr()).sum();
    let p1: f64 = b[n..].iter().map(|z| z.norm_sqr()).sum();
    assert!(p1 < 1e-12 * p0, "second mode power {p1}");
    let rel = (out.sum_sq() - modes.sum_sq()).abs() / modes.sum_sq();
    assert!(rel < 1e-6);
    assert!(p0 >= p1, "modes must be ordered by power");
}

#[test]
fn orthogonalization_satisfies_gram_test_and_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let modes = rand_modes(3, 8, &mut rng);
    let once = orthogonalize_modes(&modes).unwrap();
    assert!(gram_offdiag_ratio(&once).unwrap() < 1e-6);
    let rel = (once.sum_sq() - modes.sum_sq()).abs() / modes.sum_sq();
    assert!(rel < 1e-6, "intensity drift {rel}");

    // Already-orthogonal input: projection acts as identity (up to
    // per-mode phase; the Gram matrix is already diagonal so nothing
    // rotates).
    let twice = orthogonalize_modes(&once).unwrap();
    let diff = twice
        .complex()
        .unwrap()
        .iter()
        .zip(once.complex().unwrap())
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    assert!(diff < 1e-8, "projection not idempotent: {diff}");
}

#[test]
fn tie_slices_hand_cases() {
    // Z=1 identity.
    let v1 = Tensor::from_real(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(tie_slices(&v1).unwrap(), v1);

    // Slices of constants 0 and 2 average to 1.
    let v = Tensor::from_real(vec![2, 2, 2], vec![0.0; 4].into_iter().chain(vec![2.0; 4]).collect::<Vec<_>>())
        .unwrap();
    let tied = tie_slices(&v).unwrap();
    assert!(tied.real().unwrap().iter().all(|&x| x == 1.0));

    // Idempotence.
    assert_eq!(tie_slices(&tied).unwrap(), tied);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn prop_soft_losses_nonnegative(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..3*3*3).map(|_| rng.random_range(-4.0..4.0)).collect();
        let v = Tensor::from_real(vec![3, 3, 3], v).unwrap();
        let mut tape = Tape::<f64>::new();
        let vid = tape.constant(v);
        let tv = tv_loss(&mut tape, vid, 0.7, 0.4).unwrap();
        let sz = surface_zero_loss(&mut tape, vid, 1.1).unwrap();
        prop_assert!(scalar_of(&tape, tv) >= 0.0);
        prop_assert!(scalar_of(&tape, sz) >= 0.0);
    }

    #[test]
    fn prop_tie_slices_idempotent(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..4*2*2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = Tensor::from_real(vec![4, 2, 2], v).unwrap();
        let once = tie_slices(&v).unwrap();
        prop_assert_eq!(tie_slices(&once).unwrap(), once);
    }
}
