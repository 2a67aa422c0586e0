use ndarray::{s, Array2, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Network;
use crate::error::{ensure, Error, Result};
use crate::nnkernels::{FeatureMap, NON_DOWNBEAT_WEIGHT};
use crate::synthdata::TrackAnnotation;

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub learning_rate: f64,
    /// RMSprop decay of the squared-gradient average.
    pub rho: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub excerpt_seconds: f64,
    /// Epochs without improvement before the learning rate is reduced.
    pub plateau_patience: usize,
    pub lr_factor: f64,
    /// Epochs without improvement before training stops.
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub non_downbeat_weight: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 1e-3,
            rho: 0.9,
            epsilon: 1e-8,
            batch_size: 8,
            excerpt_seconds: 15.0,
            plateau_patience: 5,
            lr_factor: 0.5,
            early_stop_patience: 20,
            max_epochs: 100,
            non_downbeat_weight: NON_DOWNBEAT_WEIGHT,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Config,
            "learning rate must be positive"
        );
        ensure!((0.0..1.0).contains(&self.rho), Config, "rho must be in [0, 1)");
        ensure!(self.epsilon > 0.0, Config, "epsilon must be positive");
        ensure!(self.batch_size >= 1, Config, "batch size must be positive");
        ensure!(self.excerpt_seconds > 0.0, Config, "excerpt length must be positive");
        ensure!(
            self.lr_factor > 0.0 && self.lr_factor <= 1.0,
            Config,
            "lr_factor must be in (0, 1]"
        );
        ensure!(self.non_downbeat_weight >= 0.0, Config, "non-downbeat weight must be >= 0");
        Ok(())
    }
}

/// One training or validation track: features and targets in the network's
/// output layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub features: FeatureMap,
    pub targets: Array2<f64>,
}

impl TrainItem {
    /// Pairs features with `net`'s targets for the annotation.
    pub fn new(net: &Network, features: FeatureMap, ann: &TrackAnnotation) -> Result<TrainItem> {
        let targets = net.targets(ann, features.n_frames())?.values;
        Ok(TrainItem { features, targets })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub learning_rate: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Vec<Vec<f64>>,
    pub mean_square: Vec<Vec<f64>>,
    pub best_params: Vec<Vec<f64>>,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub learning_rate: f64,
    pub epochs_since_best: usize,
    pub epochs_since_lr_change: usize,
    pub seed: u64,
    pub history: Vec<EpochReport>,
}

impl TrainState {
    pub fn new(net: &Network, hp: &Hyperparams) -> TrainState {
        let params = net.param_vectors();
        TrainState {
            mean_square: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            best_params: params.clone(),
            params,
            epoch: 0,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            learning_rate: hp.learning_rate,
            epochs_since_best: 0,
            epochs_since_lr_change: 0,
            seed: hp.seed,
            history: Vec::new(),
        }
    }

    pub fn finished(&self, hp: &Hyperparams) -> bool {
        self.epoch >= hp.max_epochs || (self.epoch > 0 && self.epochs_since_best >= hp.early_stop_patience)
    }
}

struct Excerpt {
    item: usize,
    start: usize,
    len: usize,
}

/// Excerpts of one epoch: about one per excerpt length of each track, at
/// random offsets, in random order.
fn epoch_excerpts(items: &[TrainItem], frames: usize, rng: &mut ChaCha8Rng) -> Vec<Excerpt> {
    let mut out = Vec::new();
    for (i, it) in items.iter().enumerate() {
        let n = it.features.n_frames();
        if n <= frames {
            out.push(Excerpt {
                item: i,
                start: 0,
                len: n,
            });
            continue;
        }
        let count = ((n as f64 / frames as f64).round() as usize).max(1);
        for _ in 0..count {
            out.push(Excerpt {
                item: i,
                start: rng.random_range(0..=n - frames),
                len: frames,
            });
        }
    }
    out.shuffle(rng);
    out
}

/// Zero-pads excerpts to a common length; padded frames are masked out.
fn assemble(items: &[TrainItem], excerpts: &[&Excerpt]) -> (Array4<f64>, Vec<Array2<f64>>, Vec<Vec<bool>>) {
    let len = excerpts.iter().map(|e| e.len).max().unwrap();
    let c = items[excerpts[0].item].features.n_channels();
    let bins = items[excerpts[0].item].targets.ncols();
    let mut x = Array4::<f64>::zeros((excerpts.len(), 1, len, c));
    let mut targets = Vec::with_capacity(excerpts.len());
    let mut masks = Vec::with_capacity(excerpts.len());
    for (b, e) in excerpts.iter().enumerate() {
        let it = &items[e.item];
        x.slice_mut(s![b, 0, ..e.len, ..])
            .assign(&it.features.frames(0).slice(s![e.start..e.start + e.len, ..]));
        let mut t = Array2::<f64>::zeros((len, bins));
        t.slice_mut(s![..e.len, ..])
            .assign(&it.targets.slice(s![e.start..e.start + e.len, ..]));
        for f in e.len..len {
            t[[f, bins - 1]] = 1.0;
        }
        targets.push(t);
        masks.push((0..len).map(|f| f < e.len).collect());
    }
    (x, targets, masks)
}

/// Frame-weighted mean loss over whole tracks, evaluated `batch` at a time.
pub fn evaluate_loss(
    net: &Network,
    items: &[TrainItem],
    batch: usize,
    non_downbeat_weight: f64,
) -> Result<f64> {
    let whole: Vec<Excerpt> = items
        .iter()
        .enumerate()
        .map(|(i, it)| Excerpt {
            item: i,
            start: 0,
            len: it.features.n_frames(),
        })
        .collect();
    let mut total = 0.0;
    let mut frames = 0usize;
    for chunk in whole.chunks(batch.max(1)) {
        let refs: Vec<&Excerpt> = chunk.iter().collect();
        let (x, targets, masks) = assemble(items, &refs);
        let views: Vec<_> = targets.iter().map(|t| t.view()).collect();
        let l = net.loss(x, &views, &masks, non_downbeat_weight)?;
        total += l.loss * l.frames as f64;
        frames += l.frames;
    }
    Ok(total / frames.max(1) as f64)
}

fn check_items(net: &Network, items: &[TrainItem], what: &str) -> Result<()> {
    ensure!(!items.is_empty(), Input, "the {what} set is empty");
    for it in items {
        ensure!(
            it.targets.nrows() == it.features.n_frames() && it.targets.ncols() == net.output_bins(),
            Shape,
            "{what} targets {:?} do not match {} frames x {} bins",
            it.targets.dim(),
            it.features.n_frames(),
            net.output_bins()
        );
        ensure!(
            it.features.n_channels() == net.config.input_channels && !it.features.has_scale_axis,
            Shape,
            "{what} features have shape {:?}",
            it.features.values.dim()
        );
    }
    Ok(())
}

/// RMSprop with plateau-based learning-rate reduction and early stopping.
///
/// Starts from `resume` when given (its parameters replace the network's).
/// The returned state's `best_params` are also loaded into `net`. Epoch `e`
/// draws its excerpts from a stream seeded by `(seed, e)`, so an interrupted
/// and resumed run reproduces an uninterrupted one.
pub fn train(
    net: &mut Network,
    train_set: &[TrainItem],
    val_set: &[TrainItem],
    hp: &Hyperparams,
    resume: Option<TrainState>,
    mut on_epoch: impl FnMut(&EpochReport, &TrainState),
) -> Result<TrainState> {
    hp.validate()?;
    check_items(net, train_set, "training")?;
    check_items(net, val_set, "validation")?;
    let mut state = match resume {
        Some(s) => {
            net.set_param_vectors(&s.params)?;
            s
        }
        None => TrainState::new(net, hp),
    };
    let frames = (hp.excerpt_seconds * net.config.frame_rate).round().max(1.0) as usize;
    let mut last_finite = state
        .history
        .last()
        .map_or(f64::NAN, |r: &EpochReport| r.train_loss);
    while !state.finished(hp) {
        let epoch = state.epoch + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
        rng.set_stream(epoch as u64);
        let excerpts = epoch_excerpts(train_set, frames, &mut rng);
        let mut loss_sum = 0.0;
        let mut frame_sum = 0usize;
        for chunk in excerpts.chunks(hp.batch_size) {
            let refs: Vec<&Excerpt> = chunk.iter().collect();
            let (x, targets, masks) = assemble(train_set, &refs);
            let views: Vec<_> = targets.iter().map(|t| t.view()).collect();
            let (loss, grads) = net.loss_and_gradients(x, &views, &masks, hp.non_downbeat_weight)?;
            if !loss.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    last_finite_loss: last_finite,
                });
            }
            last_finite = loss.loss;
            loss_sum += loss.loss * loss.frames as f64;
            frame_sum += loss.frames;
            let lr = state.learning_rate;
            let gs = grads.slices();
            for ((p, v), g) in net
                .param_slices_mut()
                .into_iter()
                .zip(state.mean_square.iter_mut())
                .zip(gs)
            {
                for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = hp.rho * *v + (1.0 - hp.rho) * g * g;
                    *p -= lr * g / (v.sqrt() + hp.epsilon);
                }
            }
        }
        let train_loss = loss_sum / frame_sum.max(1) as f64;
        let val_loss = evaluate_loss(net, val_set, hp.batch_size, hp.non_downbeat_weight)?;
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                last_finite_loss: last_finite,
            });
        }
        let params = net.param_vectors();
        if val_loss < state.best_val_loss {
            state.best_val_loss = val_loss;
            state.best_epoch = epoch;
            state.best_params = params.clone();
            state.epochs_since_best = 0;
            state.epochs_since_lr_change = 0;
        } else {
            state.epochs_since_best += 1;
            state.epochs_since_lr_change += 1;
        }
        let report = EpochReport {
            epoch,
            train_loss,
            val_loss,
            learning_rate: state.learning_rate,
        };
        if state.epochs_since_lr_change >= hp.plateau_patience {
            state.learning_rate *= hp.lr_factor;
            state.epochs_since_lr_change = 0;
        }
        state.params = params;
        state.epoch = epoch;
        state.history.push(report.clone());
        on_epoch(&report, &state);
    }
    net.set_param_vectors(&state.best_params)?;
    Ok(state)
}
