//! Differentiable building blocks with hand-written adjoints: dense 1-D
//! convolution, the scale-invariant convolution, rectifiers, the zero-bin
//! softmax and the weighted frame-wise cross-entropy.
//!
//! The functions in this module operate on a single [`FeatureMap`]; the
//! network in [`crate::model`] drives the batched forms in [`dense`] and
//! [`spectral`] directly.

pub mod dense;
pub mod spectral;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};

use crate::error::{ensure, Error, Result};
use crate::scaling::ScalingTensor;

use self::dense::DenseGeometry;
use self::spectral::{Fft, Geometry, KernelSpectra};

/// Frames x (scales) x channels. Pre-scale maps have a scale axis of length 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// Shape `(N, S, C)`.
    pub values: Array3<f64>,
    pub frame_rate: f64,
    pub has_scale_axis: bool,
}

impl FeatureMap {
    /// Wraps an `N x C` map without a scale axis.
    pub fn from_frames(values: Array2<f64>, frame_rate: f64) -> FeatureMap {
        let (n, c) = values.dim();
        FeatureMap {
            values: values.into_shape_with_order((n, 1, c)).unwrap(),
            frame_rate,
            has_scale_axis: false,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.values.dim().0
    }

    pub fn n_scales(&self) -> usize {
        self.values.dim().1
    }

    pub fn n_channels(&self) -> usize {
        self.values.dim().2
    }

    /// The `N x C` view of a map without a scale axis (or of scale `j`).
    pub fn frames(&self, j: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(1), j)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_frames() >= 1, Shape, "feature map has no frames");
        ensure!(
            self.values.iter().all(|v| v.is_finite()),
            Input,
            "feature map contains non-finite values"
        );
        Ok(())
    }

    /// `(1, S, N, C)` layout used by the batched kernels.
    fn to_batch(&self) -> Array4<f64> {
        let (n, sc, c) = self.values.dim();
        let mut out = Array4::<f64>::zeros((1, sc, n, c));
        for j in 0..sc {
            out.slice_mut(s![0, j, .., ..])
                .assign(&self.values.index_axis(Axis(1), j));
        }
        out
    }

    fn from_batch(batch: &Array4<f64>, frame_rate: f64, has_scale_axis: bool) -> FeatureMap {
        let (_, sc, n, c) = batch.dim();
        let mut values = Array3::<f64>::zeros((n, sc, c));
        for j in 0..sc {
            values
                .index_axis_mut(Axis(1), j)
                .assign(&batch.slice(s![0, j, .., ..]));
        }
        FeatureMap {
            values,
            frame_rate,
            has_scale_axis,
        }
    }
}

/// Trainable rhythm template in musical time, shape `(M, C_in, H)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternKernel {
    pub values: Array3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding: `N - (L - 1) * dilation` frames out.
    Valid,
    /// Symmetric zero padding, `N` frames out.
    Same,
    /// Left-aligned kernel with zero padding at the end: output frame `n`
    /// reads `[n, n + (L - 1) * dilation]`. `N` frames out.
    Lookahead,
}

impl Padding {
    /// `(n_out, offset)` for an input of `n` frames and a kernel spanning
    /// `span` frames.
    pub fn geometry(self, n: usize, span: usize) -> Result<(usize, usize)> {
        match self {
            Padding::Valid => {
                ensure!(
                    span <= n,
                    Shape,
                    "kernel spans {span} frames but the input has only {n}"
                );
                Ok((n - span + 1, 0))
            }
            Padding::Same => Ok((n, (span - 1) / 2)),
            Padding::Lookahead => Ok((n, 0)),
        }
    }
}

/// Dense 1-D convolution; `h` is `(L, C_in, C_out)`.
pub fn conv1d(
    x: &FeatureMap,
    h: &Array3<f64>,
    dilation: usize,
    padding: Padding,
) -> Result<FeatureMap> {
    let (taps, c_in, _) = h.dim();
    ensure!(taps >= 1, Shape, "kernel needs at least one tap");
    ensure!(dilation >= 1, Parameter, "dilation must be at least 1");
    ensure!(
        c_in == x.n_channels(),
        Shape,
        "kernel expects {c_in} channels, input has {}",
        x.n_channels()
    );
    let span = (taps - 1) * dilation + 1;
    let (n_out, offset) = padding.geometry(x.n_frames(), span)?;
    let g = DenseGeometry {
        n_in: x.n_frames(),
        n_out,
        offset,
        dilation,
    };
    let y = dense::forward(x.to_batch().view(), h.view(), g);
    Ok(FeatureMap::from_batch(&y, x.frame_rate, x.has_scale_axis))
}

/// `(grad_x, grad_h)` of [`conv1d`].
pub fn conv1d_backward(
    grad_y: &FeatureMap,
    x: &FeatureMap,
    h: &Array3<f64>,
    dilation: usize,
    padding: Padding,
) -> Result<(FeatureMap, Array3<f64>)> {
    let (taps, _, c_out) = h.dim();
    let span = (taps - 1) * dilation + 1;
    let (n_out, offset) = padding.geometry(x.n_frames(), span)?;
    ensure!(
        grad_y.n_frames() == n_out && grad_y.n_channels() == c_out,
        Shape,
        "output gradient shape does not match the forward call"
    );
    let g = DenseGeometry {
        n_in: x.n_frames(),
        n_out,
        offset,
        dilation,
    };
    let (gx, gh) = dense::backward(
        x.to_batch().view(),
        h.view(),
        grad_y.to_batch().view(),
        g,
        true,
    );
    Ok((
        FeatureMap::from_batch(&gx.unwrap(), x.frame_rate, x.has_scale_axis),
        gh,
    ))
}

/// Owned per-scale `N* x M` matrices of a scaling tensor.
pub fn scale_matrices(psi: &ScalingTensor) -> Vec<Array2<f64>> {
    (0..psi.n_scales())
        .map(|j| psi.scale_matrix(j).to_owned())
        .collect()
}

/// `h_j = <psi_j, k>`: one `(N*, C_in * H)` matrix per scale, column
/// `c * H + o`.
pub fn materialise_kernels(k: ArrayView3<'_, f64>, psi_mats: &[Array2<f64>]) -> Vec<Array2<f64>> {
    let (m, c_in, c_out) = k.dim();
    let flat = k
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((m, c_in * c_out))
        .unwrap();
    psi_mats.iter().map(|p| p.dot(&flat)).collect()
}

/// Pattern gradient from per-scale kernel gradients:
/// `grad_k[m, c, o] = sum_j sum_n psi[n, m, j] grad_h_j[n, c, o]`.
pub fn contract_kernel_grads(
    grad_h: &[Array2<f64>],
    psi_mats: &[Array2<f64>],
    c_in: usize,
    c_out: usize,
) -> Array3<f64> {
    let m = psi_mats[0].ncols();
    let mut acc = Array2::<f64>::zeros((m, c_in * c_out));
    for (p, g) in psi_mats.iter().zip(grad_h) {
        general_mat_mul_t(p.view(), g.view(), &mut acc);
    }
    acc.into_shape_with_order((m, c_in, c_out)).unwrap()
}

fn general_mat_mul_t(p: ArrayView2<'_, f64>, g: ArrayView2<'_, f64>, acc: &mut Array2<f64>) {
    ndarray::linalg::general_mat_mul(1.0, &p.t(), &g, 1.0, acc);
}

fn check_si_shapes(x: &FeatureMap, k: &PatternKernel, psi: &ScalingTensor, stacked: bool) -> Result<()> {
    let (m, c_in, _) = k.values.dim();
    ensure!(
        m == psi.pattern_len(),
        Shape,
        "pattern has {m} samples, scaling tensor expects {}",
        psi.pattern_len()
    );
    ensure!(
        c_in == x.n_channels(),
        Shape,
        "pattern expects {c_in} channels, input has {}",
        x.n_channels()
    );
    if stacked {
        ensure!(
            x.n_scales() == psi.n_scales(),
            Shape,
            "stacked input has {} scales, scaling tensor has {}",
            x.n_scales(),
            psi.n_scales()
        );
    } else {
        ensure!(
            x.n_scales() == 1,
            Shape,
            "first-form input must not carry a scale axis"
        );
    }
    Ok(())
}

fn si_setup(
    x: &FeatureMap,
    k: &PatternKernel,
    psi: &ScalingTensor,
    stacked: bool,
    padding: Padding,
) -> Result<(KernelSpectra, Geometry, Vec<Array2<f64>>)> {
    check_si_shapes(x, k, psi, stacked)?;
    ensure!(
        padding != Padding::Same,
        Parameter,
        "scale-invariant convolution supports valid and lookahead padding"
    );
    let k_len = psi.n_star();
    let (n_out, offset) = padding.geometry(x.n_frames(), k_len)?;
    let mats = scale_matrices(psi);
    let kernels = materialise_kernels(k.values.view(), &mats);
    let (_, c_in, c_out) = k.values.dim();
    let fft = Fft::new(spectral::fft_len_for(k_len));
    let spectra = KernelSpectra::new(&fft, &kernels, c_in, c_out);
    Ok((
        spectra,
        Geometry {
            n_in: x.n_frames(),
            n_out,
            offset,
            k_len,
        },
        mats,
    ))
}

/// Scale-invariant convolution: `y_j = x * <psi_j, k>` (first form) or
/// `y_j = x_j * <psi_j, k>` (stacked). Output has shape `(n_out, S, H)`.
pub fn si_conv(
    x: &FeatureMap,
    k: &PatternKernel,
    psi: &ScalingTensor,
    stacked: bool,
    padding: Padding,
) -> Result<FeatureMap> {
    let (spectra, geom, _) = si_setup(x, k, psi, stacked, padding)?;
    let (y, _) = spectral::forward(&spectra, x.to_batch().view(), geom);
    Ok(FeatureMap::from_batch(&y, x.frame_rate, true))
}

/// `(grad_x, grad_k)` of [`si_conv`]; the scaling tensor is constant.
pub fn si_conv_backward(
    grad_y: &FeatureMap,
    x: &FeatureMap,
    k: &PatternKernel,
    psi: &ScalingTensor,
    stacked: bool,
    padding: Padding,
) -> Result<(FeatureMap, PatternKernel)> {
    let (spectra, geom, mats) = si_setup(x, k, psi, stacked, padding)?;
    let (_, c_in, c_out) = k.values.dim();
    ensure!(
        grad_y.n_frames() == geom.n_out
            && grad_y.n_scales() == psi.n_scales()
            && grad_y.n_channels() == c_out,
        Shape,
        "output gradient shape {:?} does not match the forward call",
        grad_y.values.dim()
    );
    let (_, cache) = spectral::forward(&spectra, x.to_batch().view(), geom);
    let (gx, gh) = spectral::backward(&spectra, &cache, grad_y.to_batch().view(), true);
    let gk = contract_kernel_grads(&gh, &mats, c_in, c_out);
    Ok((
        FeatureMap::from_batch(&gx.unwrap(), x.frame_rate, x.has_scale_axis),
        PatternKernel { values: gk },
    ))
}

pub fn relu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f64, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` wherever the rectifier output `y` was clipped.
pub fn relu_backward_inplace<D: ndarray::Dimension>(
    grad: &mut ndarray::Array<f64, D>,
    y: &ndarray::Array<f64, D>,
) {
    ndarray::Zip::from(grad).and(y).for_each(|g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Logit clamp applied before exponentiation.
pub const LOGIT_CLAMP: f64 = 80.0;

/// Per-frame softmax over `[logits_0 .. logits_{S-1}, 0]`; output `N x (S+1)`
/// with the last bin holding the no-downbeat probability.
pub fn softmax_zero_bin(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, sc) = logits.dim();
    let mut out = Array2::<f64>::zeros((n, sc + 1));
    for (row, mut o) in logits.outer_iter().zip(out.outer_iter_mut()) {
        let mut mx = 0.0f64;
        for &v in row.iter() {
            mx = mx.max(v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
        }
        let mut total = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP) - mx).exp();
            o[j] = e;
            total += e;
        }
        let e0 = (-mx).exp();
        o[sc] = e0;
        total += e0;
        o.mapv_inplace(|v| v / total);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub per_frame: Vec<f64>,
}

/// Loss weight of non-downbeat frames.
pub const NON_DOWNBEAT_WEIGHT: f64 = 1.0 / 3.0;

const SIMPLEX_TOL: f64 = 1e-6;

/// Frame is a non-downbeat frame when its target puts all mass on the last bin.
fn is_background(t: ndarray::ArrayView1<'_, f64>) -> bool {
    let last = t.len() - 1;
    (t[last] - 1.0).abs() <= SIMPLEX_TOL
}

/// Frame-wise cross-entropy `-sum target log o`, scaled by
/// `non_downbeat_weight` on non-downbeat frames, averaged over frames.
pub fn weighted_xent(
    o: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    non_downbeat_weight: f64,
) -> Result<LossOutput> {
    weighted_xent_masked(o, target, non_downbeat_weight, None)
}

/// [`weighted_xent`] restricted to frames with `mask[n] == true`; the mean is
/// taken over unmasked frames only.
pub fn weighted_xent_masked(
    o: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    non_downbeat_weight: f64,
    mask: Option<&[bool]>,
) -> Result<LossOutput> {
    ensure!(
        o.dim() == target.dim(),
        Shape,
        "output {:?} and target {:?} differ in shape",
        o.dim(),
        target.dim()
    );
    let mut per_frame = Vec::with_capacity(o.nrows());
    let mut total = 0.0;
    let mut count = 0usize;
    for (n, (orow, trow)) in o.outer_iter().zip(target.outer_iter()).enumerate() {
        let tsum: f64 = trow.sum();
        if (tsum - 1.0).abs() > SIMPLEX_TOL || trow.iter().any(|&v| v < -SIMPLEX_TOL) {
            return Err(Error::Input(format!(
                "target row {n} is not normalised (sum {tsum})"
            )));
        }
        let active = mask.is_none_or(|m| m[n]);
        let mut l = 0.0;
        for (&p, &t) in orow.iter().zip(trow.iter()) {
            if t > 0.0 {
                // NaN must survive the floor so divergence stays visible
                let p = if p.is_nan() { p } else { p.max(1e-300) };
                l -= t * p.ln();
            }
        }
        if is_background(trow) {
            l *= non_downbeat_weight;
        }
        if active {
            total += l;
            count += 1;
        }
        per_frame.push(if active { l } else { 0.0 });
    }
    let loss = if count == 0 { 0.0 } else { total / count as f64 };
    Ok(LossOutput { loss, per_frame })
}

/// Gradient of [`weighted_xent_masked`] of [`softmax_zero_bin`] with respect
/// to the logits (the constant zero bin receives none).
pub fn softmax_xent_backward(
    o: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    non_downbeat_weight: f64,
    mask: Option<&[bool]>,
    logits: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let (n, bins) = o.dim();
    let sc = bins - 1;
    let count = mask.map_or(n, |m| m.iter().filter(|&&b| b).count()).max(1);
    let mut grad = Array2::<f64>::zeros((n, sc));
    for f in 0..n {
        if mask.is_some_and(|m| !m[f]) {
            continue;
        }
        let t = target.row(f);
        let w = if is_background(t) { non_downbeat_weight } else { 1.0 } / count as f64;
        let tsum: f64 = t.sum();
        for j in 0..sc {
            // Clamped logits have zero derivative.
            if logits[[f, j]].abs() > LOGIT_CLAMP {
                continue;
            }
            grad[[f, j]] = w * (o[[f, j]] * tsum - t[j]);
        }
    }
    grad
}
