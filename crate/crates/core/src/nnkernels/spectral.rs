//! Overlap-save FFT engine behind the scale-invariant convolution.
//!
//! Every kernel `h_j[., c, o]` is `K` taps long and the layer computes the
//! correlation `y[n] = sum_l x[n + l - offset] h[l]` with zeros outside the
//! input. Inputs are cut into segments of `L` samples whose first
//! `P = L - K + 1` outputs are free of wrap-around; each kernel is transformed
//! once per parameter update and reused across every segment.
//!
//! With `X`, `H`, `G` the spectra of an input segment, a kernel and an output
//! gradient segment:
//! - forward: `Y = X conj(H)`
//! - input gradient: `GX = G H` (overlap-added back onto the input)
//! - kernel gradient: `GH = X conj(G)`, accumulated over all segments.
//!
//! Spectra are stored bin-major with separate real and imaginary planes so
//! that, per frequency bin, the channel mixing is a small dense product over
//! contiguous memory.

use std::sync::{Arc, Mutex};

use ndarray::{Array2, Array4, ArrayView2, ArrayView4};
use rayon::prelude::*;
use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

type C64 = Complex<f64>;

#[derive(Clone)]
pub struct Fft {
    len: usize,
    fwd: Arc<dyn RealToComplex<f64>>,
    inv: Arc<dyn ComplexToReal<f64>>,
}

impl std::fmt::Debug for Fft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft({})", self.len)
    }
}

impl Fft {
    pub fn new(len: usize) -> Fft {
        let mut planner = RealFftPlanner::<f64>::new();
        Fft {
            len,
            fwd: planner.plan_fft_forward(len),
            inv: planner.plan_fft_inverse(len),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn bins(&self) -> usize {
        self.len / 2 + 1
    }

    fn scratch(&self) -> Scratch {
        let n = self.fwd.get_scratch_len().max(self.inv.get_scratch_len());
        Scratch {
            real: vec![0.0; self.len],
            spec: vec![C64::new(0.0, 0.0); self.bins()],
            work: vec![C64::new(0.0, 0.0); n],
            block: vec![C64::new(0.0, 0.0); BLOCK * self.bins()],
        }
    }

    /// Transforms `w <= BLOCK` signals written by `fill(q, buf)` (on a zeroed
    /// buffer) into `s.block`.
    fn forward_block(&self, s: &mut Scratch, w: usize, mut fill: impl FnMut(usize, &mut [f64])) {
        let bins = self.bins();
        for q in 0..w {
            s.real.iter_mut().for_each(|v| *v = 0.0);
            fill(q, &mut s.real);
            self.forward(s);
            s.block[q * bins..(q + 1) * bins].copy_from_slice(&s.spec);
        }
    }

    /// Inverse transforms the first `w` spectra of `s.block`, handing each
    /// result to `take(q, buf)`.
    fn inverse_block(&self, s: &mut Scratch, w: usize, mut take: impl FnMut(usize, &[f64])) {
        let bins = self.bins();
        for q in 0..w {
            let (spec, block) = (&mut s.spec, &s.block);
            spec.copy_from_slice(&block[q * bins..(q + 1) * bins]);
            self.inverse(s);
            take(q, &s.real);
        }
    }

    /// Transforms `s.real` into `s.spec`, clobbering the real buffer.
    fn forward(&self, s: &mut Scratch) {
        self.fwd
            .process_with_scratch(&mut s.real, &mut s.spec, &mut s.work)
            .expect("fft buffer sizes are fixed at plan time");
    }

    /// Unnormalised inverse transform of `s.spec` into `s.real`.
    fn inverse(&self, s: &mut Scratch) {
        s.spec[0].im = 0.0;
        if self.len % 2 == 0 {
            s.spec[self.len / 2].im = 0.0;
        }
        // Imaginary parts of DC/Nyquist are zeroed above, so the only possible
        // error is the value check, which cannot trigger.
        let _ = self
            .inv
            .process_with_scratch(&mut s.spec, &mut s.real, &mut s.work);
    }
}

struct Scratch {
    real: Vec<f64>,
    spec: Vec<C64>,
    work: Vec<C64>,
    block: Vec<C64>,
}

/// Spectra transposed at once between layouts.
const BLOCK: usize = 16;

fn blocks(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).step_by(BLOCK).map(move |q0| (q0, BLOCK.min(n - q0)))
}

/// Complex values as separate real and imaginary planes.
///
/// The buffers are large and short-lived, so they are recycled through a
/// pool instead of being handed back to the allocator.
#[derive(Debug)]
struct Planes {
    re: Vec<f64>,
    im: Vec<f64>,
}

static POOL: Mutex<Vec<Vec<f64>>> = Mutex::new(Vec::new());
const POOL_LIMIT: usize = 48;

fn pooled_zeros(n: usize) -> Vec<f64> {
    let reused = {
        let mut pool = POOL.lock().unwrap_or_else(|e| e.into_inner());
        let best = pool
            .iter()
            .enumerate()
            .filter(|(_, v)| v.capacity() >= n)
            .min_by_key(|(_, v)| v.capacity())
            .map(|(i, _)| i);
        best.map(|i| pool.swap_remove(i))
    };
    match reused {
        Some(mut v) => {
            v.clear();
            v.resize(n, 0.0);
            v
        }
        None => vec![0.0; n],
    }
}

fn recycle(v: Vec<f64>) {
    if v.capacity() < 4096 {
        return;
    }
    let mut pool = POOL.lock().unwrap_or_else(|e| e.into_inner());
    if pool.len() >= POOL_LIMIT {
        // drop the smallest buffer
        if let Some((i, _)) = pool.iter().enumerate().min_by_key(|(_, v)| v.capacity()) {
            if pool[i].capacity() < v.capacity() {
                pool.swap_remove(i);
            } else {
                return;
            }
        }
    }
    pool.push(v);
}

impl Drop for Planes {
    fn drop(&mut self) {
        recycle(std::mem::take(&mut self.re));
        recycle(std::mem::take(&mut self.im));
    }
}

impl Clone for Planes {
    fn clone(&self) -> Planes {
        let mut p = Planes::zeros(self.re.len());
        p.re.copy_from_slice(&self.re);
        p.im.copy_from_slice(&self.im);
        p
    }
}

impl Planes {
    fn zeros(n: usize) -> Planes {
        Planes {
            re: pooled_zeros(n),
            im: pooled_zeros(n),
        }
    }

    /// Disjoint mutable chunks of `len` values, in parallel.
    fn par_chunks(&mut self, len: usize) -> impl IndexedParallelIterator<Item = PlanesMut<'_>> {
        self.re
            .par_chunks_mut(len)
            .zip(self.im.par_chunks_mut(len))
            .map(|(re, im)| PlanesMut { re, im })
    }

    fn gather(&self, specs: &mut [C64], w: usize, base: usize, stride: usize) {
        let bins = specs.len() / w;
        for b in 0..bins {
            let d = base + b * stride;
            for q in 0..w {
                specs[q * bins + b] = C64::new(self.re[d + q], self.im[d + q]);
            }
        }
    }
}

struct PlanesMut<'a> {
    re: &'a mut [f64],
    im: &'a mut [f64],
}

impl PlanesMut<'_> {
    /// Writes spectrum `q` of `specs` (`w` spectra of `bins` values each) to
    /// `base + bin * stride + q`.
    fn scatter(&mut self, specs: &[C64], w: usize, base: usize, stride: usize) {
        let bins = specs.len() / w;
        for b in 0..bins {
            let d = base + b * stride;
            for q in 0..w {
                let v = specs[q * bins + b];
                self.re[d + q] = v.re;
                self.im[d + q] = v.im;
            }
        }
    }
}

/// Real and imaginary parts of one small complex matrix.
#[derive(Clone, Copy)]
struct Mat<'a> {
    re: &'a [f64],
    im: &'a [f64],
}

impl<'a> Mat<'a> {
    fn at(p: &'a Planes, start: usize, len: usize) -> Mat<'a> {
        Mat {
            re: &p.re[start..start + len],
            im: &p.im[start..start + len],
        }
    }
}

/// `c[r][o] += sum_k a(r, k) * op(b[k][o])` with `a(r, k)` at
/// `r * a_rs + k * a_cs`, row-major `b` (`inner x cols`) and `c`
/// (`rows x cols`); `op` conjugates when `CONJ`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn cgemm_body<const CONJ: bool>(
    a: Mat<'_>,
    a_rs: usize,
    a_cs: usize,
    b: Mat<'_>,
    c_re: &mut [f64],
    c_im: &mut [f64],
    rows: usize,
    inner: usize,
    cols: usize,
) {
    for r in 0..rows {
        let cr = &mut c_re[r * cols..(r + 1) * cols];
        let ci = &mut c_im[r * cols..(r + 1) * cols];
        for k in 0..inner {
            let sr = a.re[r * a_rs + k * a_cs];
            let si = a.im[r * a_rs + k * a_cs];
            let br = &b.re[k * cols..(k + 1) * cols];
            let bi = &b.im[k * cols..(k + 1) * cols];
            for o in 0..cols {
                if CONJ {
                    cr[o] += sr * br[o] + si * bi[o];
                    ci[o] += si * br[o] - sr * bi[o];
                } else {
                    cr[o] += sr * br[o] - si * bi[o];
                    ci[o] += sr * bi[o] + si * br[o];
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn cgemm_avx2<const CONJ: bool>(
    a: Mat<'_>,
    a_rs: usize,
    a_cs: usize,
    b: Mat<'_>,
    c_re: &mut [f64],
    c_im: &mut [f64],
    rows: usize,
    inner: usize,
    cols: usize,
) {
    cgemm_body::<CONJ>(a, a_rs, a_cs, b, c_re, c_im, rows, inner, cols)
}

#[allow(clippy::too_many_arguments)]
fn cgemm<const CONJ: bool>(
    a: Mat<'_>,
    a_rs: usize,
    a_cs: usize,
    b: Mat<'_>,
    c_re: &mut [f64],
    c_im: &mut [f64],
    rows: usize,
    inner: usize,
    cols: usize,
) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { cgemm_avx2::<CONJ>(a, a_rs, a_cs, b, c_re, c_im, rows, inner, cols) };
        return;
    }
    cgemm_body::<CONJ>(a, a_rs, a_cs, b, c_re, c_im, rows, inner, cols)
}

/// Geometry of one layer application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub n_in: usize,
    pub n_out: usize,
    /// Output frame `n` reads inputs starting at `n - offset`.
    pub offset: usize,
    pub k_len: usize,
}

/// Picks the FFT length used for kernels of `k_len` taps.
pub fn fft_len_for(k_len: usize) -> usize {
    (2 * k_len).next_power_of_two().max(64)
}

/// Transformed kernels, laid out `[j][bin][c][o]`.
#[derive(Debug, Clone)]
pub struct KernelSpectra {
    pub fft: Fft,
    pub n_scales: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k_len: usize,
    data: Planes,
}

impl KernelSpectra {
    /// `kernels[j]` has shape `(K, c_in * c_out)`, column `c * c_out + o`.
    pub fn new(fft: &Fft, kernels: &[Array2<f64>], c_in: usize, c_out: usize) -> KernelSpectra {
        let k_len = kernels[0].nrows();
        assert!(k_len <= fft.len(), "kernel longer than the FFT");
        let bins = fft.bins();
        let per_scale = c_in * c_out;
        let mut data = Planes::zeros(kernels.len() * bins * per_scale);
        data.par_chunks(bins * per_scale)
            .zip(kernels.par_iter())
            .for_each(|(mut out, h)| {
                let mut s = fft.scratch();
                for (c0, w) in blocks(per_scale) {
                    fft.forward_block(&mut s, w, |q, buf| {
                        for l in 0..k_len {
                            buf[l] = h[[l, c0 + q]];
                        }
                    });
                    out.scatter(&s.block[..w * bins], w, c0, per_scale);
                }
            });
        KernelSpectra {
            fft: fft.clone(),
            n_scales: kernels.len(),
            c_in,
            c_out,
            k_len,
            data,
        }
    }

    /// Offset of the `(c_in, c_out)` block of scale `j` at `bin`.
    fn block(&self, j: usize, bin: usize) -> usize {
        (j * self.fft.bins() + bin) * self.c_in * self.c_out
    }
}

/// Input spectra kept from the forward pass for the kernel gradient.
#[derive(Debug)]
pub struct SpectralCache {
    geom: Geometry,
    in_scales: usize,
    /// `(item, first output frame)` for every segment.
    segments: Vec<(usize, usize)>,
    /// `[in_scale][bin][seg][c]`.
    xf: Planes,
}

fn segment_starts(geom: &Geometry, hop: usize) -> Vec<usize> {
    (0..geom.n_out).step_by(hop).collect()
}

fn hop(fft: &Fft, k_len: usize) -> usize {
    fft.len() - k_len + 1
}

/// Forward pass.
///
/// `x` is `(B, SX, N, C)` with `SX == 1` (first layer: every scale reads the
/// same input) or `SX == S` (stacked: scale `j` reads input scale `j`).
/// Returns `(B, S, n_out, c_out)`.
pub fn forward(
    spectra: &KernelSpectra,
    x: ArrayView4<'_, f64>,
    geom: Geometry,
) -> (Array4<f64>, SpectralCache) {
    let (batch, in_scales, n_in, c_in) = x.dim();
    assert_eq!(n_in, geom.n_in);
    assert_eq!(c_in, spectra.c_in);
    assert!(in_scales == 1 || in_scales == spectra.n_scales);
    let fft = &spectra.fft;
    let bins = fft.bins();
    let p = hop(fft, spectra.k_len);
    let starts = segment_starts(&geom, p);
    let segments: Vec<(usize, usize)> = (0..batch)
        .flat_map(|b| starts.iter().map(move |&s| (b, s)))
        .collect();
    let n_seg = segments.len();

    // Segment spectra.
    let bin_stride = n_seg * c_in;
    let mut xf = Planes::zeros(in_scales * bins * bin_stride);
    xf.par_chunks(bins * bin_stride)
        .enumerate()
        .for_each(|(sx, mut out)| {
            let mut s = fft.scratch();
            for (si, &(b, start)) in segments.iter().enumerate() {
                let xs = x.slice(ndarray::s![b, sx, .., ..]);
                for (c0, w) in blocks(c_in) {
                    fft.forward_block(&mut s, w, |q, buf| {
                        fill_segment(buf, xs, c0 + q, start as isize - geom.offset as isize)
                    });
                    out.scatter(&s.block[..w * bins], w, si * c_in + c0, bin_stride);
                }
            }
        });
    let n_scales = spectra.n_scales;
    let c_out = spectra.c_out;
    let inv_len = 1.0 / fft.len() as f64;
    // Per scale: the `(seg, o)` spectra, inverse transformed.
    let per_scale: Vec<Vec<f64>> = (0..n_scales)
        .into_par_iter()
        .map(|j| {
            let sx = if in_scales == 1 { 0 } else { j };
            let mut acc = Planes::zeros(bins * n_seg * c_out);
            for bin in 0..bins {
                let xb = (sx * bins + bin) * bin_stride;
                let hb = spectra.block(j, bin);
                let ab = bin * n_seg * c_out;
                cgemm::<true>(
                    Mat::at(&xf, xb, bin_stride),
                    c_in,
                    1,
                    Mat::at(&spectra.data, hb, c_in * c_out),
                    &mut acc.re[ab..ab + n_seg * c_out],
                    &mut acc.im[ab..ab + n_seg * c_out],
                    n_seg,
                    c_in,
                    c_out,
                );
            }
            let mut s = fft.scratch();
            let mut out = vec![0.0; n_seg * c_out * p];
            for si in 0..n_seg {
                for (o0, w) in blocks(c_out) {
                    acc.gather(&mut s.block[..w * bins], w, si * c_out + o0, n_seg * c_out);
                    fft.inverse_block(&mut s, w, |q, buf| {
                        let o = o0 + q;
                        let dst = &mut out[(si * c_out + o) * p..(si * c_out + o + 1) * p];
                        for (d, v) in dst.iter_mut().zip(buf) {
                            *d = v * inv_len;
                        }
                    });
                }
            }
            out
        })
        .collect();
    let mut y = Array4::<f64>::zeros((batch, n_scales, geom.n_out, c_out));
    for (j, out) in per_scale.iter().enumerate() {
        for (si, &(b, start)) in segments.iter().enumerate() {
            let len = p.min(geom.n_out - start);
            for o in 0..c_out {
                let src = &out[(si * c_out + o) * p..];
                for i in 0..len {
                    y[[b, j, start + i, o]] = src[i];
                }
            }
        }
    }
    (
        y,
        SpectralCache {
            geom,
            in_scales,
            segments,
            xf,
        },
    )
}

fn fill_segment(buf: &mut [f64], xs: ArrayView2<'_, f64>, c: usize, first: isize) {
    let n = xs.nrows() as isize;
    for (i, v) in buf.iter_mut().enumerate() {
        let t = first + i as isize;
        *v = if t >= 0 && t < n { xs[[t as usize, c]] } else { 0.0 };
    }
}

/// Backward pass. `grad_y` is `(B, S, n_out, c_out)`.
///
/// Returns the input gradient (shaped like the forward input) when
/// `want_input` is set, and the kernel gradients as `(K, c_in * c_out)` per
/// scale.
pub fn backward(
    spectra: &KernelSpectra,
    cache: &SpectralCache,
    grad_y: ArrayView4<'_, f64>,
    want_input: bool,
) -> (Option<Array4<f64>>, Vec<Array2<f64>>) {
    let fft = &spectra.fft;
    let bins = fft.bins();
    let geom = cache.geom;
    let p = hop(fft, spectra.k_len);
    let (batch, n_scales, n_out, c_out) = grad_y.dim();
    assert_eq!(n_scales, spectra.n_scales);
    assert_eq!(n_out, geom.n_out);
    let c_in = spectra.c_in;
    let in_scales = cache.in_scales;
    let segments = &cache.segments;
    let n_seg = segments.len();

    // Output-gradient spectra, `[j][bin][seg][o]`.
    let g_stride = n_seg * c_out;
    let mut gf = Planes::zeros(n_scales * bins * g_stride);
    gf.par_chunks(bins * g_stride)
        .enumerate()
        .for_each(|(j, mut out)| {
            let mut s = fft.scratch();
            for (si, &(b, start)) in segments.iter().enumerate() {
                let len = p.min(geom.n_out - start);
                for (o0, w) in blocks(c_out) {
                    fft.forward_block(&mut s, w, |q, buf| {
                        for i in 0..len {
                            buf[i] = grad_y[[b, j, start + i, o0 + q]];
                        }
                    });
                    out.scatter(&s.block[..w * bins], w, si * c_out + o0, g_stride);
                }
            }
        });

    let inv_len = 1.0 / fft.len() as f64;
    let x_stride = n_seg * c_in;

    let grad_x = if want_input {
        let mut gx = Array4::<f64>::zeros((batch, in_scales, geom.n_in, c_in));
        // Per input scale: `[bin][seg][c]` spectra, summed over the scales
        // that read it.
        let parts: Vec<Vec<f64>> = (0..in_scales)
            .into_par_iter()
            .map(|sx| {
                let scales: Vec<usize> = if in_scales == 1 {
                    (0..n_scales).collect()
                } else {
                    vec![sx]
                };
                let mut acc = Planes::zeros(bins * x_stride);
                acc.par_chunks(x_stride)
                    .enumerate()
                    .for_each(|(bin, a)| {
                        // H block transposed to `[o][c]`.
                        let mut ht = Planes::zeros(c_in * c_out);
                        for &j in &scales {
                            let hb = spectra.block(j, bin);
                            for c in 0..c_in {
                                for o in 0..c_out {
                                    ht.re[o * c_in + c] = spectra.data.re[hb + c * c_out + o];
                                    ht.im[o * c_in + c] = spectra.data.im[hb + c * c_out + o];
                                }
                            }
                            cgemm::<false>(
                                Mat::at(&gf, (j * bins + bin) * g_stride, g_stride),
                                c_out,
                                1,
                                Mat::at(&ht, 0, c_in * c_out),
                                a.re,
                                a.im,
                                n_seg,
                                c_out,
                                c_in,
                            );
                        }
                    });
                let mut s = fft.scratch();
                let mut out = vec![0.0; n_seg * c_in * fft.len()];
                for si in 0..n_seg {
                    for (c0, w) in blocks(c_in) {
                        acc.gather(&mut s.block[..w * bins], w, si * c_in + c0, x_stride);
                        fft.inverse_block(&mut s, w, |q, buf| {
                            let idx = (si * c_in + c0 + q) * buf.len();
                            out[idx..idx + buf.len()].copy_from_slice(buf);
                        });
                    }
                }
                out
            })
            .collect();
        let n_in = geom.n_in as isize;
        for (sx, out) in parts.iter().enumerate() {
            for (si, &(b, start)) in segments.iter().enumerate() {
                let first = start as isize - geom.offset as isize;
                for c in 0..c_in {
                    let idx = (si * c_in + c) * fft.len();
                    for (i, v) in out[idx..idx + fft.len()].iter().enumerate() {
                        let t = first + i as isize;
                        if t >= 0 && t < n_in {
                            gx[[b, sx, t as usize, c]] += v * inv_len;
                        }
                    }
                }
            }
        }
        Some(gx)
    } else {
        None
    };

    let k_len = spectra.k_len;
    let per_scale = c_in * c_out;
    let grad_h: Vec<Array2<f64>> = (0..n_scales)
        .into_par_iter()
        .map(|j| {
            let sx = if in_scales == 1 { 0 } else { j };
            let mut acc = Planes::zeros(bins * per_scale);
            for bin in 0..bins {
                let xb = (sx * bins + bin) * x_stride;
                let gb = (j * bins + bin) * g_stride;
                let ab = bin * per_scale;
                cgemm::<true>(
                    Mat::at(&cache.xf, xb, x_stride),
                    1,
                    c_in,
                    Mat::at(&gf, gb, g_stride),
                    &mut acc.re[ab..ab + per_scale],
                    &mut acc.im[ab..ab + per_scale],
                    c_in,
                    n_seg,
                    c_out,
                );
            }
            let mut s = fft.scratch();
            let mut gh = Array2::<f64>::zeros((k_len, per_scale));
            for (c0, w) in blocks(per_scale) {
                acc.gather(&mut s.block[..w * bins], w, c0, per_scale);
                fft.inverse_block(&mut s, w, |q, buf| {
                    for l in 0..k_len {
                        gh[[l, c0 + q]] = buf[l] * inv_len;
                    }
                });
            }
            gh
        })
        .collect();

    (grad_x, grad_h)
}
