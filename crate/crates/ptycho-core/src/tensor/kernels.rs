//! Convolution and resampling kernels shared by the tape's forward and
//! backward passes. Cross-correlation convention throughout.

use std::sync::atomic::{AtomicUsize, Ordering};

use num_complex::Complex;
use num_traits::Zero;

use super::Precision;

/// Worker threads the convolution kernels may use. Output slices are
/// disjoint per thread, so results are bitwise-identical for any setting.
static COMPUTE_THREADS: AtomicUsize = AtomicUsize::new(1);

pub fn set_compute_threads(n: usize) {
    COMPUTE_THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn compute_threads() -> usize {
    COMPUTE_THREADS.load(Ordering::Relaxed)
}

/// Element type a convolution can run over. `conj_` is the identity for
/// reals; backward passes use it so bilinear products get the right
/// gradient for complex kernels.
pub trait ConvElem:
    Copy + Zero + core::ops::Mul<Output = Self> + core::ops::AddAssign + Send + Sync + 'static
{
    fn conj_(self) -> Self;
}

impl<P: Precision> ConvElem for P {
    fn conj_(self) -> Self {
        self
    }
}

impl<P: Precision> ConvElem for Complex<P> {
    fn conj_(self) -> Self {
        self.conj()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

pub fn conv2d_out_shape(spec: &ConvSpec) -> (usize, usize) {
    let h_out = (spec.h + 2 * spec.pad - spec.kh) / spec.stride + 1;
    let w_out = (spec.w + 2 * spec.pad - spec.kw) / spec.stride + 1;
    (h_out, w_out)
}

/// Valid output-column range [lo, hi) for a kernel tap at offset `v` with
/// padding `p` and stride `s`: all ox with 0 <= ox*s + v - p < w.
fn tap_range(w: usize, w_out: usize, v: usize, p: usize, s: usize) -> (usize, usize) {
    let off = v as i64 - p as i64;
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
    let hi_excl = (w as i64 - off - 1).div_euclid(s as i64) + 1;
    let hi = hi_excl.clamp(0, w_out as i64) as usize;
    (lo.min(hi), hi)
}

/// Forward cross-correlation: x [C_in,H,W], k [C_out,C_in,kh,kw].
pub fn conv2d_forward<E: ConvElem>(x: &[E], k: &[E], spec: &ConvSpec) -> Vec<E> {
    let (h_out, w_out) = conv2d_out_shape(spec);
    let mut out = vec![E::zero(); spec.c_out * h_out * w_out];
    let threads = compute_threads().min(spec.c_out);
    if threads <= 1 {
        conv2d_forward_block(x, k, spec, 0, &mut out);
    } else {
        let chunk = spec.c_out.div_ceil(threads);
        std::thread::scope(|scope| {
            for (t, slice) in out.chunks_mut(chunk * h_out * w_out).enumerate() {
                scope.spawn(move || conv2d_forward_block(x, k, spec, t * chunk, slice));
            }
        });
    }
    out
}

/// Fill `out` with output channels [o0, o0 + out.len()/(h*w)).
fn conv2d_forward_block<E: ConvElem>(x: &[E], k: &[E], spec: &ConvSpec, o0: usize, out: &mut [E]) {
    let (h_out, w_out) = conv2d_out_shape(spec);
    let o_count = out.len() / (h_out * w_out);
    let s = spec.stride;
    let p = spec.pad;
    for oo in 0..o_count {
        let o = o0 + oo;
        for i in 0..spec.c_in {
            let x_plane = &x[i * spec.h * spec.w..(i + 1) * spec.h * spec.w];
            for u in 0..spec.kh {
                let (oy_lo, oy_hi) = tap_range(spec.h, h_out, u, p, s);
                for v in 0..spec.kw {
                    let kv = k[((o * spec.c_in + i) * spec.kh + u) * spec.kw + v];
                    let (ox_lo, ox_hi) = tap_range(spec.w, w_out, v, p, s);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + u - p;
                        let x_row = &x_plane[iy * spec.w..(iy + 1) * spec.w];
                        let out_row =
                            &mut out[(oo * h_out + oy) * w_out..(oo * h_out + oy + 1) * w_out];
                        if s == 1 {
                            let ix0 = ox_lo + v - p;
                            for (dst, &src) in out_row[ox_lo..ox_hi]
                                .iter_mut()
                                .zip(&x_row[ix0..ix0 + (ox_hi - ox_lo)])
                            {
                                *dst += src * kv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += x_row[ox * s + v - p] * kv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the input: scatter of `g_out * conj(k)`.
pub fn conv2d_backward_input<E: ConvElem>(g_out: &[E], k: &[E], spec: &ConvSpec) -> Vec<E> {
    let mut g_x = vec![E::zero(); spec.c_in * spec.h * spec.w];
    let threads = compute_threads().min(spec.c_in);
    if threads <= 1 {
        conv2d_backward_input_block(g_out, k, spec, 0, &mut g_x);
    } else {
        let chunk = spec.c_in.div_ceil(threads);
        std::thread::scope(|scope| {
            for (t, slice) in g_x.chunks_mut(chunk * spec.h * spec.w).enumerate() {
                scope.spawn(move || conv2d_backward_input_block(g_out, k, spec, t * chunk, slice));
            }
        });
    }
    g_x
}

fn conv2d_backward_input_block<E: ConvElem>(
    g_out: &[E],
    k: &[E],
    spec: &ConvSpec,
    i0: usize,
    g_x: &mut [E],
) {
    let (h_out, w_out) = conv2d_out_shape(spec);
    let i_count = g_x.len() / (spec.h * spec.w);
    let s = spec.stride;
    let p = spec.pad;
    for o in 0..spec.c_out {
        for ii in 0..i_count {
            let i = i0 + ii;
            let gx_plane = &mut g_x[ii * spec.h * spec.w..(ii + 1) * spec.h * spec.w];
            for u in 0..spec.kh {
                let (oy_lo, oy_hi) = tap_range(spec.h, h_out, u, p, s);
                for v in 0..spec.kw {
                    let kv = k[((o * spec.c_in + i) * spec.kh + u) * spec.kw + v].conj_();
                    let (ox_lo, ox_hi) = tap_range(spec.w, w_out, v, p, s);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + u - p;
                        let g_row = &g_out[(o * h_out + oy) * w_out..(o * h_out + oy + 1) * w_out];
                        let gx_row = &mut gx_plane[iy * spec.w..(iy + 1) * spec.w];
                        if s == 1 {
                            let ix0 = ox_lo + v - p;
                            for (dst, &src) in gx_row[ix0..ix0 + (ox_hi - ox_lo)]
                                .iter_mut()
                                .zip(&g_row[ox_lo..ox_hi])
                            {
                                *dst += src * kv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                gx_row[ox * s + v - p] += g_row[ox] * kv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the kernel: row dot products of `g_out` with `conj(x)`.
pub fn conv2d_backward_kernel<E: ConvElem>(g_out: &[E], x: &[E], spec: &ConvSpec) -> Vec<E> {
    let mut g_k = vec![E::zero(); spec.c_out * spec.c_in * spec.kh * spec.kw];
    let threads = compute_threads().min(spec.c_out);
    if threads <= 1 {
        conv2d_backward_kernel_block(g_out, x, spec, 0, &mut g_k);
    } else {
        let chunk = spec.c_out.div_ceil(threads);
        let per_o = spec.c_in * spec.kh * spec.kw;
        std::thread::scope(|scope| {
            for (t, slice) in g_k.chunks_mut(chunk * per_o).enumerate() {
                scope.spawn(move || conv2d_backward_kernel_block(g_out, x, spec, t * chunk, slice));
            }
        });
    }
    g_k
}

fn conv2d_backward_kernel_block<E: ConvElem>(
    g_out: &[E],
    x: &[E],
    spec: &ConvSpec,
    o0: usize,
    g_k: &mut [E],
) {
    let (h_out, w_out) = conv2d_out_shape(spec);
    let per_o = spec.c_in * spec.kh * spec.kw;
    let o_count = g_k.len() / per_o;
    let s = spec.stride;
    let p = spec.pad;
    for oo in 0..o_count {
        let o = o0 + oo;
        for i in 0..spec.c_in {
            let x_plane = &x[i * spec.h * spec.w..(i + 1) * spec.h * spec.w];
            for u in 0..spec.kh {
                let (oy_lo, oy_hi) = tap_range(spec.h, h_out, u, p, s);
                for v in 0..spec.kw {
                    let (ox_lo, ox_hi) = tap_range(spec.w, w_out, v, p, s);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = E::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + u - p;
                        let x_row = &x_plane[iy * spec.w..(iy + 1) * spec.w];
                        let g_row = &g_out[(o * h_out + oy) * w_out..(o * h_out + oy + 1) * w_out];
                        if s == 1 {
                            let ix0 = ox_lo + v - p;
                            for (&g, &xv) in
                                g_row[ox_lo..ox_hi].iter().zip(&x_row[ix0..ix0 + (ox_hi - ox_lo)])
                            {
                                acc += g * xv.conj_();
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                acc += g_row[ox] * x_row[ox * s + v - p].conj_();
                            }
                        }
                    }
                    g_k[(oo * spec.c_in + i) * spec.kh * spec.kw + u * spec.kw + v] += acc;
                }
            }
        }
    }
}

fn split_complex<P: Precision>(v: &[Complex<P>]) -> (Vec<P>, Vec<P>) {
    let mut re = Vec::with_capacity(v.len());
    let mut im = Vec::with_capacity(v.len());
    for z in v {
        re.push(z.re);
        im.push(z.im);
    }
    (re, im)
}

fn join_sub<P: Precision>(a: &[P], b: &[P], c: &[P], d: &[P]) -> Vec<Complex<P>> {
    // (a - b) + i (c + d)
    a.iter()
        .zip(b)
        .zip(c.iter().zip(d))
        .map(|((&a, &b), (&c, &d))| Complex::new(a - b, c + d))
        .collect()
}

/// Complex convolution lowered to four real passes; real planes keep the
/// inner loops vectorizable.
pub fn conv2d_forward_complex<P: Precision>(
    x: &[Complex<P>],
    k: &[Complex<P>],
    spec: &ConvSpec,
) -> Vec<Complex<P>> {
    let (xr, xi) = split_complex(x);
    let (kr, ki) = split_complex(k);
    let rr = conv2d_forward(&xr, &kr, spec);
    let ii = conv2d_forward(&xi, &ki, spec);
    let ri = conv2d_forward(&xr, &ki, spec);
    let ir = conv2d_forward(&xi, &kr, spec);
    join_sub(&rr, &ii, &ri, &ir)
}

/// Complex input gradient: scatter of g * conj(k).
pub fn conv2d_backward_input_complex<P: Precision>(
    g: &[Complex<P>],
    k: &[Complex<P>],
    spec: &ConvSpec,
) -> Vec<Complex<P>> {
    let (gr, gi) = split_complex(g);
    let (kr, ki) = split_complex(k);
    // re = gr*kr + gi*ki ; im = gi*kr - gr*ki
    let a = conv2d_backward_input(&gr, &kr, spec);
    let b = conv2d_backward_input(&gi, &ki, spec);
    let c = conv2d_backward_input(&gi, &kr, spec);
    let d = conv2d_backward_input(&gr, &ki, spec);
    a.iter()
        .zip(&b)
        .zip(c.iter().zip(&d))
        .map(|((&a, &b), (&c, &d))| Complex::new(a + b, c - d))
        .collect()
}

/// Complex kernel gradient: correlation of g with conj(x).
pub fn conv2d_backward_kernel_complex<P: Precision>(
    g: &[Complex<P>],
    x: &[Complex<P>],
    spec: &ConvSpec,
) -> Vec<Complex<P>> {
    let (gr, gi) = split_complex(g);
    let (xr, xi) = split_complex(x);
    let a = conv2d_backward_kernel(&gr, &xr, spec);
    let b = conv2d_backward_kernel(&gi, &xi, spec);
    let c = conv2d_backward_kernel(&gi, &xr, spec);
    let d = conv2d_backward_kernel(&gr, &xi, spec);
    a.iter()
        .zip(&b)
        .zip(c.iter().zip(&d))
        .map(|((&a, &b), (&c, &d))| Complex::new(a + b, c - d))
        .collect()
}

/// Nearest-neighbor 2x upsampling of [C,H,W].
pub fn upsample2x_forward<E: Copy>(x: &[E], c: usize, h: usize, w: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(c * 4 * h * w);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for y in 0..2 * h {
            let sy = y / 2;
            for x_ in 0..2 * w {
                out.push(plane[sy * w + x_ / 2]);
            }
        }
    }
    out
}

/// Backward of nearest-neighbor upsampling: each source cell collects its
/// 2x2 block.
pub fn upsample2x_backward<E: ConvElem>(g_out: &[E], c: usize, h: usize, w: usize) -> Vec<E> {
    let mut g_x = vec![E::zero(); c * h * w];
    let (h2, w2) = (2 * h, 2 * w);
    for ci in 0..c {
        let g_plane = &g_out[ci * h2 * w2..(ci + 1) * h2 * w2];
        let x_plane = &mut g_x[ci * h * w..(ci + 1) * h * w];
        for y in 0..h2 {
            for x_ in 0..w2 {
                x_plane[(y / 2) * w + x_ / 2] += g_plane[y * w2 + x_];
            }
        }
    }
    g_x
}
