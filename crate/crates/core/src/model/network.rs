use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Architecture, NetworkConfig, TargetGrid};
use crate::error::{ensure, Result};
use crate::nnkernels::dense::{self, DenseGeometry};
use crate::nnkernels::spectral::{self, Fft, Geometry, KernelSpectra, SpectralCache};
use crate::nnkernels::{
    contract_kernel_grads, materialise_kernels, scale_matrices, softmax_xent_backward,
    softmax_zero_bin, weighted_xent_masked, FeatureMap, Padding,
};
use crate::scaling::{cached_scaling_tensor, ScaleGrid, ScalingTensor};
use crate::synthdata::TrackAnnotation;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { dilation: usize, padding: Padding },
    ScaleInvariant { stacked: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    /// `(L, C_in, C_out)` for convolutions, `(M, C_in, H)` for scale-invariant
    /// layers.
    pub weights: Array3<f64>,
    pub bias: Option<Array1<f64>>,
    pub relu: bool,
}

impl Layer {
    pub fn c_in(&self) -> usize {
        self.weights.dim().1
    }

    pub fn c_out(&self) -> usize {
        self.weights.dim().2
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    /// `S + 1` bins: joint downbeat-and-tempo probabilities, then "no downbeat".
    Joint,
    /// Two bins: downbeat, no downbeat.
    DownbeatOnly,
}

/// Frame-wise network output; every row lies on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationGrid {
    pub values: Array2<f64>,
    pub kind: ActivationKind,
    pub frame_rate: f64,
}

impl ActivationGrid {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    /// Probability of a downbeat at each frame (any tempo).
    pub fn downbeat_probability(&self) -> Vec<f64> {
        let last = self.values.ncols() - 1;
        self.values.column(last).iter().map(|p| 1.0 - p).collect()
    }
}

/// Per-layer parameter gradients, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array3<f64>>,
    pub biases: Vec<Option<Array1<f64>>>,
}

impl Gradients {
    /// Flat views in the order of [`Network::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().unwrap());
            if let Some(b) = b {
                out.push(b.as_slice().unwrap());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    /// Frames that contributed to `loss`.
    pub frames: usize,
}

/// Scale matrices and FFT plan shared by the scale-invariant layers.
#[derive(Debug)]
struct SiContext {
    psi: Arc<ScalingTensor>,
    mats: Vec<Array2<f64>>,
    fft: Fft,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    pub layers: Vec<Layer>,
    grid: ScaleGrid,
    si: Option<Arc<SiContext>>,
}

enum LayerCache {
    Conv,
    Si(KernelSpectra, SpectralCache),
}

/// Prior log-odds of a downbeat frame, used to initialise the output bias so
/// training starts from the class balance rather than 50/50.
const DOWNBEAT_PRIOR: f64 = 0.05;

pub fn build_network(cfg: &NetworkConfig) -> Result<Network> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut layers = Vec::new();
    let mut c = cfg.input_channels;
    let mut push = |name: String, kind: LayerKind, shape: (usize, usize, usize), relu: bool, rng: &mut ChaCha8Rng| {
        let fan_in = (shape.0 * shape.1) as f64;
        // He initialisation before rectifiers, variance 1/fan_in for the output
        let std = if relu { (2.0 / fan_in).sqrt() } else { (1.0 / fan_in).sqrt() };
        let normal = Normal::new(0.0, std).unwrap();
        let weights = Array3::from_shape_fn(shape, |_| normal.sample(rng));
        let bias = cfg.biases.then(|| Array1::<f64>::zeros(shape.2));
        layers.push(Layer {
            name,
            kind,
            weights,
            bias,
            relu,
        });
    };
    for (i, f) in cfg.frontend.iter().enumerate() {
        push(
            format!("frontend.{i}"),
            LayerKind::Conv {
                dilation: 1,
                padding: Padding::Same,
            },
            (f.kernel, c, f.channels),
            true,
            &mut rng,
        );
        c = f.channels;
    }
    let si = match cfg.architecture {
        Architecture::Inv => {
            let n = cfg.ti_stack.len();
            for (i, &h) in cfg.ti_stack.iter().enumerate() {
                push(
                    format!("ti.{i}"),
                    LayerKind::ScaleInvariant { stacked: i > 0 },
                    (cfg.pattern_len, c, h),
                    i + 1 < n,
                    &mut rng,
                );
                c = h;
            }
            let psi = cached_scaling_tensor(&grid, cfg.alpha, cfg.quadrature_step)?;
            let mats = scale_matrices(&psi);
            let fft = Fft::new(spectral::fft_len_for(psi.n_star()));
            Some(Arc::new(SiContext { psi, mats, fft }))
        }
        Architecture::NoInv => {
            let n = cfg.dilated_stack.len();
            for (i, d) in cfg.dilated_stack.iter().enumerate() {
                push(
                    format!("dil.{i}"),
                    LayerKind::Conv {
                        dilation: d.dilation,
                        padding: Padding::Lookahead,
                    },
                    (d.kernel, c, d.channels),
                    i + 1 < n,
                    &mut rng,
                );
                c = d.channels;
            }
            None
        }
    };
    if let Some(b) = layers.last_mut().unwrap().bias.as_mut() {
        let per_bin = match cfg.architecture {
            Architecture::Inv => DOWNBEAT_PRIOR / cfg.n_scales as f64,
            Architecture::NoInv => DOWNBEAT_PRIOR,
        };
        b.fill((per_bin / (1.0 - DOWNBEAT_PRIOR)).ln());
    }
    Ok(Network {
        config: cfg.clone(),
        layers,
        grid,
        si,
    })
}

impl Network {
    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    pub fn grid(&self) -> &ScaleGrid {
        &self.grid
    }

    pub fn scaling_tensor(&self) -> Option<&ScalingTensor> {
        self.si.as_ref().map(|s| s.psi.as_ref())
    }

    pub fn activation_kind(&self) -> ActivationKind {
        match self.config.architecture {
            Architecture::Inv => ActivationKind::Joint,
            Architecture::NoInv => ActivationKind::DownbeatOnly,
        }
    }

    /// Output bins per frame.
    pub fn output_bins(&self) -> usize {
        match self.config.architecture {
            Architecture::Inv => self.config.n_scales + 1,
            Architecture::NoInv => 2,
        }
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Flat mutable views of every parameter array: per layer the weights,
    /// then the bias.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weights.as_slice_mut().unwrap());
            if let Some(b) = l.bias.as_mut() {
                out.push(b.as_slice_mut().unwrap());
            }
        }
        out
    }

    pub fn param_vectors(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weights.iter().copied().collect());
            if let Some(b) = &l.bias {
                out.push(b.to_vec());
            }
        }
        out
    }

    pub fn set_param_vectors(&mut self, values: &[Vec<f64>]) -> Result<()> {
        let mut slices = self.param_slices_mut();
        ensure!(
            slices.len() == values.len(),
            Shape,
            "expected {} parameter arrays, got {}",
            slices.len(),
            values.len()
        );
        for (dst, src) in slices.iter_mut().zip(values) {
            ensure!(
                dst.len() == src.len(),
                Shape,
                "parameter array of {} values cannot take {}",
                dst.len(),
                src.len()
            );
            dst.copy_from_slice(src);
        }
        Ok(())
    }

    /// Training targets in this network's output layout.
    pub fn targets(&self, ann: &TrackAnnotation, n_frames: usize) -> Result<TargetGrid> {
        let t = super::make_targets(ann, &self.grid, n_frames)?;
        Ok(match self.config.architecture {
            Architecture::Inv => t,
            Architecture::NoInv => t.downbeat_only(),
        })
    }

    /// Runs the layer stack on `(B, 1, N, C)`; returns every layer's output
    /// (after the rectifier) and, when `keep`, the caches for the backward
    /// pass.
    ///
    /// Item `b` is `lengths[b]` frames long; every layer output is zeroed
    /// beyond that, so a zero-padded item is processed as if it stood alone.
    fn forward_layers(
        &self,
        x: Array4<f64>,
        lengths: &[usize],
        keep: bool,
    ) -> (Vec<Array4<f64>>, Vec<LayerCache>) {
        let mut acts = vec![x];
        let mut caches = Vec::new();
        for layer in &self.layers {
            let input = acts.last().unwrap();
            let (_, _, n, _) = input.dim();
            let mut y = match layer.kind {
                LayerKind::Conv { dilation, padding } => {
                    let g = conv_geometry(n, layer.weights.dim().0, dilation, padding);
                    if keep {
                        caches.push(LayerCache::Conv);
                    }
                    dense::forward(input.view(), layer.weights.view(), g)
                }
                LayerKind::ScaleInvariant { .. } => {
                    let si = self.si.as_ref().expect("scale-invariant layer without a tensor");
                    let spectra = self.kernel_spectra(si, layer);
                    let g = si_geometry(n, si.psi.n_star());
                    let (y, cache) = spectral::forward(&spectra, input.view(), g);
                    if keep {
                        caches.push(LayerCache::Si(spectra, cache));
                    }
                    y
                }
            };
            if let Some(b) = &layer.bias {
                y += b;
            }
            if layer.relu {
                y.mapv_inplace(|v| v.max(0.0));
            }
            for (b, &len) in lengths.iter().enumerate() {
                if len < n {
                    y.slice_mut(s![b, .., len.., ..]).fill(0.0);
                }
            }
            acts.push(y);
        }
        (acts, caches)
    }

    fn kernel_spectra(&self, si: &SiContext, layer: &Layer) -> KernelSpectra {
        let kernels = materialise_kernels(layer.weights.view(), &si.mats);
        KernelSpectra::new(&si.fft, &kernels, layer.c_in(), layer.c_out())
    }

    /// Logits `(N, S_out)` of item `b` from the last layer's output.
    fn logits(out: &Array4<f64>, b: usize) -> Array2<f64> {
        out.slice(s![b, .., .., 0]).t().to_owned()
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        ensure!(
            !x.has_scale_axis && x.n_channels() == self.config.input_channels,
            Shape,
            "network expects {} input channels without a scale axis, got {:?}",
            self.config.input_channels,
            x.values.dim()
        );
        ensure!(
            (x.frame_rate - self.config.frame_rate).abs() < 1e-9,
            Shape,
            "features at {} frames/s, network expects {}",
            x.frame_rate,
            self.config.frame_rate
        );
        x.validate()
    }

    pub fn predict(&self, x: &FeatureMap) -> Result<ActivationGrid> {
        Ok(self.predict_many(&[x], 1)?.pop().unwrap())
    }

    /// [`Network::predict`] for several tracks, `batch` at a time; results
    /// equal the one-by-one predictions.
    pub fn predict_many(&self, xs: &[&FeatureMap], batch: usize) -> Result<Vec<ActivationGrid>> {
        for x in xs {
            self.check_input(x)?;
        }
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(batch.max(1)) {
            let lengths: Vec<usize> = chunk.iter().map(|x| x.n_frames()).collect();
            let n = *lengths.iter().max().unwrap();
            let mut input = Array4::<f64>::zeros((chunk.len(), 1, n, self.config.input_channels));
            for (b, x) in chunk.iter().enumerate() {
                input.slice_mut(s![b, 0, ..x.n_frames(), ..]).assign(&x.frames(0));
            }
            let (acts, _) = self.forward_layers(input, &lengths, false);
            for (b, x) in chunk.iter().enumerate() {
                let logits = Self::logits(acts.last().unwrap(), b);
                let logits = logits.slice(s![..x.n_frames(), ..]);
                out.push(ActivationGrid {
                    values: softmax_zero_bin(logits),
                    kind: self.activation_kind(),
                    frame_rate: x.frame_rate,
                });
            }
        }
        Ok(out)
    }

    fn lengths(masks: &[Vec<bool>]) -> Vec<usize> {
        masks
            .iter()
            .map(|m| m.iter().rposition(|&v| v).map_or(0, |i| i + 1))
            .collect()
    }

    /// Mean weighted cross-entropy of a batch. `x` is `(B, 1, N, C)`;
    /// `targets[b]` is `N x bins`; frames with `mask[b][n] == false` are
    /// ignored, and frames after the last unmasked one count as padding.
    pub fn loss(
        &self,
        x: Array4<f64>,
        targets: &[ArrayView2<'_, f64>],
        masks: &[Vec<bool>],
        non_downbeat_weight: f64,
    ) -> Result<BatchLoss> {
        let (acts, _) = self.forward_layers(x, &Self::lengths(masks), false);
        self.batch_loss(acts.last().unwrap(), targets, masks, non_downbeat_weight, false)
            .map(|(l, _)| l)
    }

    fn batch_loss(
        &self,
        out: &Array4<f64>,
        targets: &[ArrayView2<'_, f64>],
        masks: &[Vec<bool>],
        w: f64,
        want_grad: bool,
    ) -> Result<(BatchLoss, Option<Array4<f64>>)> {
        let (batch, s_out, n, _) = out.dim();
        ensure!(
            targets.len() == batch && masks.len() == batch,
            Shape,
            "batch of {batch} items with {} targets",
            targets.len()
        );
        let total: usize = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
        let mut loss = 0.0;
        let mut grad = want_grad.then(|| Array4::<f64>::zeros(out.dim()));
        for b in 0..batch {
            let logits = Self::logits(out, b);
            let o = softmax_zero_bin(logits.view());
            ensure!(
                targets[b].dim() == o.dim() && masks[b].len() == n,
                Shape,
                "target {:?} does not match output {:?}",
                targets[b].dim(),
                o.dim()
            );
            let item = weighted_xent_masked(o.view(), targets[b], w, Some(&masks[b]))?;
            let count = masks[b].iter().filter(|&&m| m).count();
            loss += item.loss * count as f64;
            if let Some(g) = grad.as_mut() {
                let gl = softmax_xent_backward(o.view(), targets[b], w, Some(&masks[b]), logits.view());
                let scale = count as f64 / total.max(1) as f64;
                for j in 0..s_out {
                    for f in 0..n {
                        g[[b, j, f, 0]] = gl[[f, j]] * scale;
                    }
                }
            }
        }
        Ok((
            BatchLoss {
                loss: loss / total.max(1) as f64,
                frames: total,
            },
            grad,
        ))
    }

    /// Loss and parameter gradients of a batch (see [`Network::loss`]).
    pub fn loss_and_gradients(
        &self,
        x: Array4<f64>,
        targets: &[ArrayView2<'_, f64>],
        masks: &[Vec<bool>],
        non_downbeat_weight: f64,
    ) -> Result<(BatchLoss, Gradients)> {
        let (acts, caches) = self.forward_layers(x, &Self::lengths(masks), true);
        let (loss, grad) =
            self.batch_loss(acts.last().unwrap(), targets, masks, non_downbeat_weight, true)?;
        let grads = self.backward(&acts, &caches, grad.unwrap());
        Ok((loss, grads))
    }

    fn backward(&self, acts: &[Array4<f64>], caches: &[LayerCache], mut grad: Array4<f64>) -> Gradients {
        let n_layers = self.layers.len();
        let mut weights = vec![Array3::<f64>::zeros((0, 0, 0)); n_layers];
        let mut biases = vec![None; n_layers];
        for i in (0..n_layers).rev() {
            let layer = &self.layers[i];
            if layer.relu {
                ndarray::Zip::from(&mut grad)
                    .and(&acts[i + 1])
                    .for_each(|g, &y| {
                        if y <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            if layer.bias.is_some() {
                let c = grad.dim().3;
                let flat = grad.view().into_shape_with_order((grad.len() / c, c)).unwrap();
                biases[i] = Some(flat.sum_axis(Axis(0)));
            }
            let want_input = i > 0;
            let input = &acts[i];
            let (_, _, n, _) = input.dim();
            let (gx, gw) = match (&layer.kind, &caches[i]) {
                (LayerKind::Conv { dilation, padding }, _) => {
                    let g = conv_geometry(n, layer.weights.dim().0, *dilation, *padding);
                    dense::backward(input.view(), layer.weights.view(), grad.view(), g, want_input)
                }
                (LayerKind::ScaleInvariant { .. }, LayerCache::Si(spectra, cache)) => {
                    let si = self.si.as_ref().unwrap();
                    let (gx, gh) = spectral::backward(spectra, cache, grad.view(), want_input);
                    let gk = contract_kernel_grads(&gh, &si.mats, layer.c_in(), layer.c_out());
                    (gx, gk)
                }
                _ => unreachable!("layer cache does not match the layer kind"),
            };
            weights[i] = gw;
            if let Some(gx) = gx {
                grad = gx;
            }
        }
        Gradients { weights, biases }
    }
}

fn conv_geometry(n: usize, taps: usize, dilation: usize, padding: Padding) -> DenseGeometry {
    let span = (taps - 1) * dilation + 1;
    let (n_out, offset) = padding
        .geometry(n, span)
        .expect("network layers never use valid padding");
    DenseGeometry {
        n_in: n,
        n_out,
        offset,
        dilation,
    }
}

fn si_geometry(n: usize, k_len: usize) -> Geometry {
    Geometry {
        n_in: n,
        n_out: n,
        offset: 0,
        k_len,
    }
}
