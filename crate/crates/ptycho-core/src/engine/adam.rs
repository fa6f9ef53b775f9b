//! Adam with bias correction. Complex parameters update real and
//! imaginary parts with a shared second moment of |g|^2.

use serde::{Deserialize, Serialize};

use crate::error::{PtychoError, Result};
use crate::tensor::{Data, Precision, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams { lr, ..Default::default() }
    }
}

#[derive(Debug, Clone)]
struct Moment<P: Precision> {
    /// First moment, same realness as the parameter.
    m: Tensor<P>,
    /// Second moment of |g|^2, always real.
    v: Tensor<P>,
}

/// Optimizer state for one parameter group (one or more tensors updated
/// with shared hyperparameters and a shared timestep).
#[derive(Debug, Clone)]
pub struct AdamState<P: Precision> {
    t: u64,
    moments: Vec<Moment<P>>,
}

impl<P: Precision> AdamState<P> {
    pub fn new_like(params: &[&Tensor<P>]) -> Self {
        let moments = params
            .iter()
            .map(|p| Moment {
                m: if p.is_complex() {
                    Tensor::zeros_complex(p.shape().to_vec())
                } else {
                    Tensor::zeros_real(p.shape().to_vec())
                },
                v: Tensor::zeros_real(p.shape().to_vec()),
            })
            .collect();
        AdamState { t: 0, moments }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    /// One update over the whole group. Gradients must be finite.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<P>],
        grads: &[&Tensor<P>],
        hp: &AdamParams,
    ) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != params.len() {
            return Err(PtychoError::shape("adam group size mismatch"));
        }
        for g in grads {
            if g.has_nan() {
                return Err(PtychoError::divergence("non-finite gradient in adam step"));
            }
        }
        self.t += 1;
        let b1 = P::of_f64(hp.beta1);
        let b2 = P::of_f64(hp.beta2);
        let one = P::one();
        let bc1 = P::of_f64(1.0 - hp.beta1.powi(self.t as i32));
        let bc2 = P::of_f64(1.0 - hp.beta2.powi(self.t as i32));
        let lr = P::of_f64(hp.lr);
        let eps = P::of_f64(hp.eps);

        for ((param, grad), moment) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            if param.shape() != grad.shape() || param.is_complex() != grad.is_complex() {
                return Err(PtychoError::shape("adam parameter/gradient mismatch"));
            }
            match (param.data(), grad.data()) {
                (Data::Real(_), Data::Real(g)) => {
                    let m = moment.m.real_mut()?;
                    let v = moment.v.real_mut()?;
                    let p = param.real_mut()?;
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (one - b1) * g[i];
                        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
                (Data::Complex(_), Data::Complex(g)) => {
                    let m = moment.m.complex_mut()?;
                    let v = moment.v.real_mut()?;
                    let p = param.complex_mut()?;
                    for i in 0..p.len() {
                        m[i] = m[i] * b1 + g[i] * (one - b1);
                        v[i] = b2 * v[i] + (one - b2) * g[i].norm_sqr();
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        let denom = v_hat.sqrt() + eps;
                        p[i] = p[i] - m_hat * (lr / denom);
                    }
                }
                _ => return Err(PtychoError::dtype("adam parameter/gradient realness mismatch")),
            }
        }
        Ok(())
    }

    /// Moments as named tensors for snapshotting, in group order.
    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor<P>)> {
        let mut out = Vec::with_capacity(2 * self.moments.len());
        for (i, mom) in self.moments.iter().enumerate() {
            out.push((format!("{prefix}/{i}/m"), mom.m.clone()));
            out.push((format!("{prefix}/{i}/v"), mom.v.clone()));
        }
        out
    }

    /// Rebuild from exported tensors; inverse of `export`.
    pub fn import(t: u64, tensors: Vec<(Tensor<P>, Tensor<P>)>) -> Self {
        AdamState { t, moments: tensors.into_iter().map(|(m, v)| Moment { m, v }).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::from_real(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let g = Tensor::zeros_real(vec![3]);
        let mut state = AdamState::new_like(&[&p]);
        let before = p.clone();
        state.step(&mut [&mut p], &[&g], &AdamParams::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias-corrected first step with g=1: delta = lr * 1/(1+eps).
        let mut p = Tensor::from_real(vec![1], vec![3.0f64]).unwrap();
        let g = Tensor::from_real(vec![1], vec![1.0f64]).unwrap();
        let mut state = AdamState::new_like(&[&p]);
        let hp = AdamParams { lr: 0.1, ..Default::default() };
        state.step(&mut [&mut p], &[&g], &hp).unwrap();
        let moved = 3.0 - p.real().unwrap()[0];
        assert!((moved - 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_is_a_divergence_error() {
        let mut p = Tensor::from_real(vec![1], vec![0.0f64]).unwrap();
        let g = Tensor::from_real(vec![1], vec![f64::NAN]).unwrap();
        let mut state = AdamState::new_like(&[&p]);
        assert!(matches!(
            state.step(&mut [&mut p], &[&g], &AdamParams::default()),
            Err(PtychoError::Divergence(_))
        ));
    }

    #[test]
    fn complex_update_is_descent_on_quadratic() {
        let mut p = Tensor::from_complex(vec![2], vec![Complex::new(1.0f64, -2.0), Complex::new(-0.5, 0.3)])
            .unwrap();
        let hp = AdamParams { lr: 0.05, ..Default::default() };
        let mut state = AdamState::new_like(&[&p]);
        let mut last = p.sum_sq();
        for _ in 0..50 {
            // grad of sum |z|^2 is 2z in the stored convention.
            let g = Tensor::from_complex(
                vec![2],
                p.complex().unwrap().iter().map(|z| z * 2.0).collect::<Vec<_>>(),
            )
            .unwrap();
            state.step(&mut [&mut p], &[&g], &hp).unwrap();
            let now = p.sum_sq();
            assert!(now <= last + 1e-12);
            last = now;
        }
        assert!(last < 0.5);
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut p = Tensor::from_real(vec![2], vec![0.3f64, -0.9]).unwrap();
            let mut state = AdamState::new_like(&[&p]);
            for i in 0..20 {
                let g = Tensor::from_real(vec![2], vec![(i as f64).sin(), 0.5]).unwrap();
                state.step(&mut [&mut p], &[&g], &AdamParams::default()).unwrap();
            }
            p.real().unwrap().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
