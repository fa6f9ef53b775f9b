//! Quantitative evaluation: SSIM, power spectra, radial profiles,
//! information-limit estimation, and depth profiles.

use num_complex::Complex;

use crate::error::{PtychoError, Result};
use crate::tensor::{fft_freqs, Precision, Tensor};

/// 2-D real image with its extent, the working currency of this module.
#[derive(Debug, Clone)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(PtychoError::shape("image buffer does not match extent"));
        }
        Ok(Image { h, w, data })
    }

    /// Projected (mean over slices) real representation of an object
    /// volume: phase for complex objects, the data itself otherwise.
    pub fn project_volume<P: Precision>(t: &Tensor<P>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(PtychoError::shape("expected [Z,Y,X] volume"));
        }
        let (z, h, w) = (s[0], s[1], s[2]);
        let mut data = vec![0.0f64; h * w];
        match t.data() {
            crate::tensor::Data::Real(v) => {
                for (i, &x) in v.iter().enumerate() {
                    data[i % (h * w)] += x.as_f64();
                }
            }
            crate::tensor::Data::Complex(v) => {
                for (i, zv) in v.iter().enumerate() {
                    data[i % (h * w)] += zv.arg().as_f64();
                }
            }
        }
        for x in &mut data {
            *x /= z as f64;
        }
        Image::new(h, w, data)
    }
}

// ── SSIM ────────────────────────────────────────────────────────────

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for x in &mut w {
        *x /= sum;
    }
    w
}

/// Standard SSIM with a Gaussian window (sigma 1.5, K1 = 0.01,
/// K2 = 0.03), averaged over valid window positions. `data_range`
/// defaults to the combined value range of both images, which keeps the
/// metric symmetric; callers comparing against ground truth pass the
/// truth's range explicitly.
pub fn ssim(a: &Image, b: &Image, window: usize, data_range: Option<f64>) -> Result<f64> {
    if a.h != b.h || a.w != b.w {
        return Err(PtychoError::shape(format!(
            "ssim: {}x{} vs {}x{}",
            a.h, a.w, b.h, b.w
        )));
    }
    if window == 0 || window > a.h.min(a.w) {
        return Err(PtychoError::contract("ssim window must fit inside the images"));
    }
    let range = match data_range {
        Some(r) => r,
        None => {
            let mut max = f64::NEG_INFINITY;
            let mut min = f64::INFINITY;
            for v in a.data.iter().chain(&b.data) {
                max = max.max(*v);
                min = min.min(*v);
            }
            (max - min).max(f64::MIN_POSITIVE)
        }
    };
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let g = gaussian_window(window, 1.5);

    // Separable weighted filtering of the five moment maps.
    let filter = |img: &[f64]| -> Vec<f64> {
        let (h, w) = (a.h, a.w);
        let out_w = w - window + 1;
        let out_h = h - window + 1;
        let mut rows = vec![0.0f64; h * out_w];
        for y in 0..h {
            for x in 0..out_w {
                let mut acc = 0.0;
                for (k, &gk) in g.iter().enumerate() {
                    acc += gk * img[y * w + x + k];
                }
                rows[y * out_w + x] = acc;
            }
        }
        let mut out = vec![0.0f64; out_h * out_w];
        for y in 0..out_h {
            for x in 0..out_w {
                let mut acc = 0.0;
                for (k, &gk) in g.iter().enumerate() {
                    acc += gk * rows[(y + k) * out_w + x];
                }
                out[y * out_w + x] = acc;
            }
        }
        out
    };

    let aa: Vec<f64> = a.data.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.data.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    let mu_a = filter(&a.data);
    let mu_b = filter(&b.data);
    let e_aa = filter(&aa);
    let e_bb = filter(&bb);
    let e_ab = filter(&ab);

    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let va = e_aa[i] - mu_a[i] * mu_a[i];
        let vb = e_bb[i] - mu_b[i] * mu_b[i];
        let cov = e_ab[i] - mu_a[i] * mu_b[i];
        let s = ((2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2))
            / ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
        total += s;
    }
    Ok(total / mu_a.len() as f64)
}

/// Remove the least-squares plane (constant + linear ramp) of
/// `a - reference` from `a`: reconstructed phase is only determined up to
/// this gauge.
pub fn remove_plane_gauge(a: &Image, reference: &Image) -> Result<Image> {
    if a.h != reference.h || a.w != reference.w {
        return Err(PtychoError::shape("gauge removal: image extents differ"));
    }
    let (h, w) = (a.h, a.w);
    // Normal equations for f(y,x) = p0 + p1 y + p2 x over the residual.
    let mut s = [[0.0f64; 3]; 3];
    let mut rhs = [0.0f64; 3];
    for y in 0..h {
        for x in 0..w {
            let r = a.data[y * w + x] - reference.data[y * w + x];
            let basis = [1.0, y as f64, x as f64];
            for i in 0..3 {
                for j in 0..3 {
                    s[i][j] += basis[i] * basis[j];
                }
                rhs[i] += basis[i] * r;
            }
        }
    }
    // 3x3 solve by Cramer's rule.
    let det = |m: &[[f64; 3]; 3]| -> f64 {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&s);
    if d.abs() < 1e-12 {
        return Ok(a.clone());
    }
    let mut p = [0.0f64; 3];
    for k in 0..3 {
        let mut m = s;
        for i in 0..3 {
            m[i][k] = rhs[i];
        }
        p[k] = det(&m) / d;
    }
    let mut out = a.data.clone();
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] -= p[0] + p[1] * y as f64 + p[2] * x as f64;
        }
    }
    Image::new(h, w, out)
}

// ── power spectra ───────────────────────────────────────────────────

/// |F(x - mean)|^2 / N, zero-frequency centered. The 1/N factor makes the
/// spectrum total equal N times the image variance (Parseval after mean
/// removal).
pub fn power_spectrum(img: &Image) -> Image {
    let (h, w) = (img.h, img.w);
    let n = (h * w) as f64;
    let mean = img.data.iter().sum::<f64>() / n;
    let mut buf: Vec<Complex<f64>> =
        img.data.iter().map(|&x| Complex::new(x - mean, 0.0)).collect();
    crate::tensor::fft2_raw(&mut buf, 1, h, w, false);
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            // fftshift: move zero frequency to (h/2, w/2).
            let sy = (y + h / 2) % h;
            let sx = (x + w / 2) % w;
            out[sy * w + sx] = buf[y * w + x].norm_sqr() / n;
        }
    }
    Image { h, w, data: out }
}

/// Radially binned power with a smooth background fit and the
/// background-subtracted profile.
#[derive(Debug, Clone)]
pub struct RadialProfile {
    /// Bin centers in 1/angstrom, monotonically increasing.
    pub k: Vec<f64>,
    /// Mean power per bin.
    pub power: Vec<f64>,
    /// Fitted smooth background (non-negative).
    pub background: Vec<f64>,
    /// power - background.
    pub net: Vec<f64>,
}

/// Azimuthal average of a centered power spectrum. Bin width is one
/// reciprocal pixel.
pub fn radial_profile(spectrum: &Image, sampling: (f64, f64)) -> RadialProfile {
    let (h, w) = (spectrum.h, spectrum.w);
    let ky = fft_freqs(h, sampling.0);
    let kx = fft_freqs(w, sampling.1);
    let dk = (1.0 / (h as f64 * sampling.0)).max(1.0 / (w as f64 * sampling.1));
    let k_max = (0.5 / sampling.0).min(0.5 / sampling.1);
    let nbins = (k_max / dk).floor() as usize;
    let mut sums = vec![0.0f64; nbins];
    let mut counts = vec![0usize; nbins];
    for y in 0..h {
        for x in 0..w {
            // Undo the fftshift indexing: frequency of shifted pixel.
            let fy = ky[(y + h - h / 2) % h];
            let fx = kx[(x + w - w / 2) % w];
            let k = (fy * fy + fx * fx).sqrt();
            let bin = (k / dk).floor() as usize;
            if bin < nbins {
                sums[bin] += spectrum.data[y * w + x];
                counts[bin] += 1;
            }
        }
    }
    let k: Vec<f64> = (0..nbins).map(|i| (i as f64 + 0.5) * dk).collect();
    let power: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();

    // Smooth monotone-decay background: quadratic fit of log-power vs k,
    // refined once with outliers (peaks) excluded.
    let floor = power.iter().cloned().fold(f64::INFINITY, f64::min).max(1e-300);
    let logp: Vec<f64> = power.iter().map(|&p| (p.max(floor * 1e-3)).log10()).collect();
    let fit = |mask: &[bool]| -> [f64; 3] {
        let mut s = [[0.0f64; 3]; 3];
        let mut rhs = [0.0f64; 3];
        for i in 0..nbins {
            if !mask[i] {
                continue;
            }
            let basis = [1.0, k[i], k[i] * k[i]];
            for a in 0..3 {
                for b in 0..3 {
                    s[a][b] += basis[a] * basis[b];
                }
                rhs[a] += basis[a] * logp[i];
            }
        }
        let det = |m: &[[f64; 3]; 3]| -> f64 {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d = det(&s);
        if d.abs() < 1e-20 {
            return [logp.iter().sum::<f64>() / nbins as f64, 0.0, 0.0];
        }
        let mut p = [0.0f64; 3];
        for c in 0..3 {
            let mut m = s;
            for r in 0..3 {
                m[r][c] = rhs[r];
            }
            p[c] = det(&m) / d;
        }
        p
    };
    let all = vec![true; nbins];
    let p0 = fit(&all);
    let resid: Vec<f64> = (0..nbins)
        .map(|i| logp[i] - (p0[0] + p0[1] * k[i] + p0[2] * k[i] * k[i]))
        .collect();
    let sigma = {
        let m = resid.iter().sum::<f64>() / nbins as f64;
        (resid.iter().map(|r| (r - m).powi(2)).sum::<f64>() / nbins as f64).sqrt()
    };
    let mask: Vec<bool> = resid.iter().map(|&r| r < 2.0 * sigma).collect();
    let p1 = if mask.iter().filter(|&&m| m).count() >= 4 { fit(&mask) } else { p0 };
    let background: Vec<f64> = (0..nbins)
        .map(|i| 10f64.powf(p1[0] + p1[1] * k[i] + p1[2] * k[i] * k[i]))
        .collect();
    let net: Vec<f64> = (0..nbins).map(|i| power[i] - background[i]).collect();
    RadialProfile { k, power, background, net }
}

/// Information limit: the outermost radial bin whose background-subtracted
/// power exceeds 3x the local noise level, reported as a real-space
/// distance. `None` means no significant peak (unresolved).
pub fn info_limit(profile: &RadialProfile) -> Option<f64> {
    let n = profile.k.len();
    if n < 8 {
        return None;
    }
    // Robust local noise: median absolute deviation over a sliding window.
    let half = 6usize.min(n / 4).max(2);
    let local_sigma = |i: usize| -> f64 {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        let mut win: Vec<f64> = profile.net[lo..hi].to_vec();
        win.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = win[win.len() / 2];
        let mut dev: Vec<f64> = win.iter().map(|v| (v - med).abs()).collect();
        dev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        (dev[dev.len() / 2] * 1.4826).max(f64::MIN_POSITIVE)
    };
    // Skip the lowest bins: the DC neighborhood is dominated by the
    // object envelope, not a lattice peak.
    for i in (2..n).rev() {
        if profile.net[i] > 3.0 * local_sigma(i) {
            return Some(1.0 / profile.k[i]);
        }
    }
    None
}

// ── depth profiles ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DepthProfile {
    /// Integrated |density| per slice inside the region.
    pub per_slice: Vec<f64>,
    /// Weighted centroid (in slice units) of each contiguous cluster
    /// above threshold.
    pub centroids: Vec<f64>,
}

/// Z-profile of integrated density over a [y, x, h, w] region, with the
/// per-layer centroids of contiguous above-threshold runs. Complex
/// volumes contribute |z|.
pub fn depth_profile<P: Precision>(
    volume: &Tensor<P>,
    region: (usize, usize, usize, usize),
) -> Result<DepthProfile> {
    let s = volume.shape();
    if s.len() != 3 {
        return Err(PtychoError::shape("depth_profile expects [Z,Y,X]"));
    }
    let (z, h, w) = (s[0], s[1], s[2]);
    let (y0, x0, rh, rw) = region;
    if y0 + rh > h || x0 + rw > w {
        return Err(PtychoError::shape("region exceeds the volume plane"));
    }
    let mut per_slice = vec![0.0f64; z];
    for zi in 0..z {
        let mut acc = 0.0;
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                let idx = (zi * h + y) * w + x;
                acc += match volume.data() {
                    crate::tensor::Data::Real(v) => v[idx].as_f64().abs(),
                    crate::tensor::Data::Complex(v) => v[idx].norm().as_f64(),
                };
            }
        }
        per_slice[zi] = acc;
    }
    let min = per_slice.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = per_slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut centroids = Vec::new();
    if span <= 1e-12 * max.abs().max(1e-300) {
        // Flat profile (e.g. tied slices): one cluster covering everything.
        let total: f64 = per_slice.iter().sum();
        if total > 0.0 {
            let c =
                per_slice.iter().enumerate().map(|(i, &p)| i as f64 * p).sum::<f64>() / total;
            centroids.push(c);
        }
    } else {
        let threshold = min + 0.3 * span;
        let mut run_start: Option<usize> = None;
        for zi in 0..=z {
            let above = zi < z && per_slice[zi] > threshold;
            match (run_start, above) {
                (None, true) => run_start = Some(zi),
                (Some(start), false) => {
                    let seg = &per_slice[start..zi];
                    let wsum: f64 = seg.iter().map(|p| p - min).sum();
                    if wsum > 0.0 {
                        let c = seg
                            .iter()
                            .enumerate()
                            .map(|(i, &p)| (start + i) as f64 * (p - min))
                            .sum::<f64>()
                            / wsum;
                        centroids.push(c);
                    }
                    run_start = None;
                }
                _ => {}
            }
        }
    }
    Ok(DepthProfile { per_slice, centroids })
}
