//! Central finite-difference gradient oracle.
//!
//! Evaluates a scalar functional at perturbed parameter values only — it
//! never touches the tape's backward pass, so it stays an independent
//! check of it. Complex parameters are perturbed on their real and
//! imaginary parts separately, which is exactly what the stored gradient
//! convention (dL/da + i dL/db) must match.

use num_complex::Complex;

use super::{Data, Tensor};

/// Worst observed deviation between analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub components: usize,
}

impl GradCheckReport {
    pub fn within(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }
}

/// Numeric gradient of `f` w.r.t. every component of every parameter,
/// via central differences with step `h`.
pub fn numeric_gradients<F>(params: &[Tensor<f64>], f: &F, h: f64) -> Vec<Tensor<f64>>
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        match p.data() {
            Data::Real(v) => {
                let mut g = vec![0.0f64; v.len()];
                for i in 0..v.len() {
                    let mut plus = params.to_vec();
                    plus[pi].real_mut().unwrap()[i] += h;
                    let mut minus = params.to_vec();
                    minus[pi].real_mut().unwrap()[i] -= h;
                    g[i] = (f(&plus) - f(&minus)) / (2.0 * h);
                }
                grads.push(Tensor::from_real(p.shape().to_vec(), g).unwrap());
            }
            Data::Complex(v) => {
                let mut g = vec![Complex::new(0.0f64, 0.0); v.len()];
                for i in 0..v.len() {
                    let mut plus = params.to_vec();
                    plus[pi].complex_mut().unwrap()[i].re += h;
                    let mut minus = params.to_vec();
                    minus[pi].complex_mut().unwrap()[i].re -= h;
                    g[i].re = (f(&plus) - f(&minus)) / (2.0 * h);

                    let mut plus = params.to_vec();
                    plus[pi].complex_mut().unwrap()[i].im += h;
                    let mut minus = params.to_vec();
                    minus[pi].complex_mut().unwrap()[i].im -= h;
                    g[i].im = (f(&plus) - f(&minus)) / (2.0 * h);
                }
                grads.push(Tensor::from_complex(p.shape().to_vec(), g).unwrap());
            }
        }
    }
    grads
}

/// Compare analytic gradients against the finite-difference oracle.
///
/// Relative error per component is |a-n| / max(|a|, |n|, floor); the floor
/// keeps near-zero gradients from blowing up the ratio and defaults to a
/// scale appropriate for O(1) losses.
pub fn compare_gradients(
    analytic: &[Tensor<f64>],
    numeric: &[Tensor<f64>],
    floor: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, components: 0 };
    let push = |a: f64, n: f64, report: &mut GradCheckReport| {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.components += 1;
    };
    for (a_t, n_t) in analytic.iter().zip(numeric) {
        assert_eq!(a_t.shape(), n_t.shape(), "gradcheck shape mismatch");
        match (a_t.data(), n_t.data()) {
            (Data::Real(a), Data::Real(n)) => {
                for (&ai, &ni) in a.iter().zip(n) {
                    push(ai, ni, &mut report);
                }
            }
            (Data::Complex(a), Data::Complex(n)) => {
                for (ai, ni) in a.iter().zip(n) {
                    push(ai.re, ni.re, &mut report);
                    push(ai.im, ni.im, &mut report);
                }
            }
            _ => panic!("gradcheck realness mismatch"),
        }
    }
    report
}

/// Run the full check: `loss_and_grads` computes the loss and analytic
/// gradients (typically via a tape), `f` evaluates the loss alone.
pub fn check<F, G>(params: &[Tensor<f64>], f: F, loss_and_grads: G, h: f64) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> f64,
    G: FnOnce(&[Tensor<f64>]) -> Vec<Tensor<f64>>,
{
    let analytic = loss_and_grads(params);
    let numeric = numeric_gradients(params, &f, h);
    compare_gradients(&analytic, &numeric, 1e-6)
}
