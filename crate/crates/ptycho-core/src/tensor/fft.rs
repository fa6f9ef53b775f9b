//! 2-D FFT kernels over the last two axes of a batched buffer.
//!
//! Both directions are unnormalized here; the tape's `ifft2` divides by the
//! per-image element count.

use num_complex::Complex;
use rustfft::FftPlanner;

use super::Precision;

/// In-place DFT over the last two axes of `data`, interpreted as
/// `[batch, h, w]` row-major. `inverse` selects the conjugate-exponent
/// transform. No normalization in either direction.
pub fn fft2_raw<P: Precision>(data: &mut [Complex<P>], batch: usize, h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(data.len(), batch * h * w);
    let mut planner = FftPlanner::<P>::new();
    let row_fft = if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };
    let col_fft = if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };

    // Rows are contiguous.
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }

    // Columns via gather/scatter into a scratch buffer.
    let mut col = vec![Complex::new(P::zero(), P::zero()); h];
    for b in 0..batch {
        let img = &mut data[b * h * w..(b + 1) * h * w];
        for x in 0..w {
            for y in 0..h {
                col[y] = img[y * w + x];
            }
            col_fft.process(&mut col);
            for y in 0..h {
                img[y * w + x] = col[y];
            }
        }
    }
}

/// Unshifted FFT sample frequencies in cycles per unit, matching the
/// layout `fft2_raw` produces: `[0, 1, .., n/2-1, -n/2, .., -1] / (n*d)`.
pub fn fft_freqs(n: usize, d: f64) -> Vec<f64> {
    let mut k = Vec::with_capacity(n);
    for i in 0..n {
        let idx = if i < n.div_ceil(2) { i as i64 } else { i as i64 - n as i64 };
        k.push(idx as f64 / (n as f64 * d));
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freqs_match_standard_layout() {
        let k = fft_freqs(4, 1.0);
        assert_eq!(k, vec![0.0, 0.25, -0.5, -0.25]);
        let k = fft_freqs(5, 1.0);
        assert_eq!(k, vec![0.0, 0.2, 0.4, -0.4, -0.2]);
    }

    #[test]
    fn roundtrip_identity() {
        let (h, w) = (4, 8);
        let mut data: Vec<Complex<f64>> = (0..h * w)
            .map(|i| Complex::new((i % 7) as f64 - 3.0, (i % 5) as f64))
            .collect();
        let orig = data.clone();
        fft2_raw(&mut data, 1, h, w, false);
        fft2_raw(&mut data, 1, h, w, true);
        let n = (h * w) as f64;
        for (a, b) in data.iter().zip(&orig) {
            assert!((a / n - b).norm() < 1e-12);
        }
    }
}
