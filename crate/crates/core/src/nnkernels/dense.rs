//! Short dense 1-D convolutions (front-end and dilated layers), one GEMM per
//! kernel tap.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseGeometry {
    pub n_in: usize,
    pub n_out: usize,
    pub offset: usize,
    pub dilation: usize,
}

/// Output-frame range touched by tap `l` and the matching input start.
fn tap_range(g: &DenseGeometry, l: usize) -> Option<(usize, usize, usize)> {
    let shift = (l * g.dilation) as isize - g.offset as isize;
    let lo = (-shift).max(0) as usize;
    let hi = (g.n_in as isize - shift).min(g.n_out as isize);
    if hi <= lo as isize {
        return None;
    }
    let hi = hi as usize;
    Some((lo, hi, (lo as isize + shift) as usize))
}

/// `x`: `(B, S, N, C_in)`, `w`: `(L, C_in, C_out)` -> `(B, S, n_out, C_out)`.
pub fn forward(x: ArrayView4<'_, f64>, w: ArrayView3<'_, f64>, g: DenseGeometry) -> Array4<f64> {
    let (batch, scales, _, _) = x.dim();
    let (taps, _, c_out) = w.dim();
    let mut y = Array4::<f64>::zeros((batch, scales, g.n_out, c_out));
    let items: Vec<(usize, usize)> = (0..batch)
        .flat_map(|b| (0..scales).map(move |s| (b, s)))
        .collect();
    let outs: Vec<Array2<f64>> = items
        .par_iter()
        .map(|&(b, sc)| {
            let xs = x.slice(s![b, sc, .., ..]);
            let mut out = Array2::<f64>::zeros((g.n_out, c_out));
            for l in 0..taps {
                if let Some((lo, hi, t0)) = tap_range(&g, l) {
                    let xv = xs.slice(s![t0..t0 + (hi - lo), ..]);
                    let mut yv = out.slice_mut(s![lo..hi, ..]);
                    general_mat_mul(1.0, &xv, &w.index_axis(Axis(0), l), 1.0, &mut yv);
                }
            }
            out
        })
        .collect();
    for (&(b, sc), out) in items.iter().zip(outs) {
        y.slice_mut(s![b, sc, .., ..]).assign(&out);
    }
    y
}

/// Returns `(grad_x, grad_w)`; `grad_x` only when requested.
pub fn backward(
    x: ArrayView4<'_, f64>,
    w: ArrayView3<'_, f64>,
    grad_y: ArrayView4<'_, f64>,
    g: DenseGeometry,
    want_input: bool,
) -> (Option<Array4<f64>>, Array3<f64>) {
    let (batch, scales, n_in, c_in) = x.dim();
    let (taps, _, c_out) = w.dim();
    let items: Vec<(usize, usize)> = (0..batch)
        .flat_map(|b| (0..scales).map(move |s| (b, s)))
        .collect();
    let parts: Vec<(Option<Array2<f64>>, Array3<f64>)> = items
        .par_iter()
        .map(|&(b, sc)| {
            let xs = x.slice(s![b, sc, .., ..]);
            let gs = grad_y.slice(s![b, sc, .., ..]);
            let mut gw = Array3::<f64>::zeros((taps, c_in, c_out));
            let mut gx = want_input.then(|| Array2::<f64>::zeros((n_in, c_in)));
            for l in 0..taps {
                if let Some((lo, hi, t0)) = tap_range(&g, l) {
                    let xv = xs.slice(s![t0..t0 + (hi - lo), ..]);
                    let gv = gs.slice(s![lo..hi, ..]);
                    let mut gwl = gw.index_axis_mut(Axis(0), l);
                    general_mat_mul(1.0, &xv.t(), &gv, 1.0, &mut gwl);
                    if let Some(gx) = gx.as_mut() {
                        let mut gxv = gx.slice_mut(s![t0..t0 + (hi - lo), ..]);
                        general_mat_mul(1.0, &gv, &w.index_axis(Axis(0), l).t(), 1.0, &mut gxv);
                    }
                }
            }
            (gx, gw)
        })
        .collect();
    let mut grad_w = Array3::<f64>::zeros((taps, c_in, c_out));
    let mut grad_x = want_input.then(|| Array4::<f64>::zeros((batch, scales, n_in, c_in)));
    for (&(b, sc), (gx, gw)) in items.iter().zip(parts) {
        grad_w += &gw;
        if let (Some(all), Some(gx)) = (grad_x.as_mut(), gx) {
            all.slice_mut(s![b, sc, .., ..]).assign(&gx);
        }
    }
    (grad_x, grad_w)
}
