//! Jacobi eigendecomposition for small complex Hermitian matrices.
//!
//! Probe-mode orthogonalization needs the eigensystem of the M x M Gram
//! matrix with M rarely above 8, so cyclic Jacobi sweeps are plenty.

use num_complex::Complex;

use crate::tensor::Precision;

/// Eigen-decomposition H = V diag(lambda) V^H of a Hermitian matrix given
/// row-major. Returns eigenvalues (descending) and V with eigenvectors as
/// columns (row-major m x m).
pub fn eigh<P: Precision>(h: &[Complex<P>], m: usize) -> (Vec<P>, Vec<Complex<P>>) {
    assert_eq!(h.len(), m * m);
    let mut a: Vec<Complex<f64>> =
        h.iter().map(|z| Complex::new(z.re.as_f64(), z.im.as_f64())).collect();
    let mut v: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); m * m];
    for i in 0..m {
        v[i * m + i] = Complex::new(1.0, 0.0);
    }

    let scale: f64 = (0..m).map(|i| a[i * m + i].re.abs()).sum::<f64>().max(1e-300);
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..m {
            for q in (p + 1)..m {
                off += a[p * m + q].norm_sqr();
            }
        }
        if off.sqrt() < 1e-15 * scale {
            break;
        }
        for p in 0..m {
            for q in (p + 1)..m {
                let apq = a[p * m + q];
                if apq.norm() < 1e-300 {
                    continue;
                }
                let phi = apq / apq.norm(); // e^{i arg}
                let app = a[p * m + p].re;
                let aqq = a[q * m + q].re;
                let tau = (aqq - app) / (2.0 * apq.norm());
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Column rotation J: J[p][p]=c, J[p][q]=s*phi, J[q][p]=-s*conj(phi), J[q][q]=c
                // Apply A <- J^H A J, V <- V J.
                for k in 0..m {
                    let akp = a[k * m + p];
                    let akq = a[k * m + q];
                    a[k * m + p] = akp * c - akq * s * phi.conj();
                    a[k * m + q] = akp * s * phi + akq * c;
                }
                for k in 0..m {
                    let apk = a[p * m + k];
                    let aqk = a[q * m + k];
                    a[p * m + k] = apk * c - aqk * s * phi;
                    a[q * m + k] = apk * s * phi.conj() + aqk * c;
                }
                for k in 0..m {
                    let vkp = v[k * m + p];
                    let vkq = v[k * m + q];
                    v[k * m + p] = vkp * c - vkq * s * phi.conj();
                    v[k * m + q] = vkp * s * phi + vkq * c;
                }
            }
        }
    }

    // Sort by descending eigenvalue, permuting eigenvector columns.
    let mut order: Vec<usize> = (0..m).collect();
    let eig: Vec<f64> = (0..m).map(|i| a[i * m + i].re).collect();
    order.sort_by(|&i, &j| eig[j].partial_cmp(&eig[i]).unwrap());
    let mut values = Vec::with_capacity(m);
    let mut vectors = vec![Complex::new(P::zero(), P::zero()); m * m];
    for (new_col, &old_col) in order.iter().enumerate() {
        values.push(P::of_f64(eig[old_col]));
        for row in 0..m {
            let z = v[row * m + old_col];
            vectors[row * m + new_col] = Complex::new(P::of_f64(z.re), P::of_f64(z.im));
        }
    }
    (values, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    #[test]
    fn real_symmetric_2x2() {
        let h = vec![c(2.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(2.0, 0.0)];
        let (vals, _) = eigh::<f64>(&h, 2);
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn complex_hermitian_reconstructs() {
        // H = V L V^H must hold and V must be unitary.
        let h = vec![
            c(3.0, 0.0),
            c(1.0, 2.0),
            c(0.5, -0.3),
            c(1.0, -2.0),
            c(1.0, 0.0),
            c(0.0, 1.1),
            c(0.5, 0.3),
            c(0.0, -1.1),
            c(2.0, 0.0),
        ];
        let m = 3;
        let (vals, v) = eigh::<f64>(&h, m);
        // Unitarity.
        for i in 0..m {
            for j in 0..m {
                let mut dot = c(0.0, 0.0);
                for k in 0..m {
                    dot += v[k * m + i].conj() * v[k * m + j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - c(expect, 0.0)).norm() < 1e-12);
            }
        }
        // Reconstruction.
        for r in 0..m {
            for s in 0..m {
                let mut sum = c(0.0, 0.0);
                for k in 0..m {
                    sum += v[r * m + k] * vals[k] * v[s * m + k].conj();
                }
                assert!((sum - h[r * m + s]).norm() < 1e-12, "H mismatch at ({r},{s})");
            }
        }
        // Descending order.
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
    }
}
