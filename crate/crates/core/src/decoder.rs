//! Bar-pointer HMM decoding of activation grids into downbeat times.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{ensure, Error, Result};
use crate::model::{ActivationGrid, ActivationKind};
use crate::scaling::ScaleGrid;

/// Upper bound on the number of HMM states.
pub const MAX_STATES: usize = 2_000_000;
/// Observation floor keeping the log domain finite.
pub const OBS_FLOOR: f64 = 1e-12;
pub const DEFAULT_LAMBDA: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct BarPointerStateSpace {
    /// Beat period of each tempo state, seconds.
    pub tempo_states: Vec<f64>,
    pub beats_per_bar: usize,
    pub frame_rate: f64,
    /// Frames per bar `L_q`.
    pub bar_lengths: Vec<usize>,
    /// Downbeat width `d_q` in frames.
    pub downbeat_widths: Vec<usize>,
    /// First flat state index of each tempo.
    pub offsets: Vec<usize>,
    /// Non-downbeat states per downbeat state.
    pub sigma: f64,
}

impl BarPointerStateSpace {
    pub fn n_states(&self) -> usize {
        *self.offsets.last().unwrap() + *self.bar_lengths.last().unwrap()
    }

    pub fn n_tempi(&self) -> usize {
        self.tempo_states.len()
    }

    pub fn state(&self, q: usize, phase: usize) -> usize {
        self.offsets[q] + phase
    }

    /// `(q, phase)` of a flat state index.
    pub fn locate(&self, state: usize) -> (usize, usize) {
        let q = self.offsets.partition_point(|&o| o <= state) - 1;
        (q, state - self.offsets[q])
    }

    pub fn is_downbeat(&self, state: usize) -> bool {
        let (q, phase) = self.locate(state);
        phase < self.downbeat_widths[q]
    }

    pub fn max_bar_length(&self) -> usize {
        self.bar_lengths.iter().copied().max().unwrap()
    }
}

/// Sparse transition model stored as predecessor lists, sorted by source
/// state.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    n_states: usize,
    starts: Vec<usize>,
    from: Vec<u32>,
    log_p: Vec<f64>,
}

impl TransitionModel {
    /// Builds from `(from, to, probability)` triples; every state's outgoing
    /// probabilities must sum to 1.
    pub fn from_edges(n_states: usize, edges: &[(usize, usize, f64)]) -> Result<TransitionModel> {
        ensure!(n_states >= 1, Parameter, "transition model without states");
        ensure!(
            n_states <= MAX_STATES,
            Capacity,
            "{n_states} states exceed the limit of {MAX_STATES}"
        );
        let mut out = vec![0.0; n_states];
        let mut incoming: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n_states];
        for &(f, t, p) in edges {
            ensure!(f < n_states && t < n_states, Parameter, "edge {f} -> {t} out of range");
            ensure!(
                p.is_finite() && p >= 0.0,
                Parameter,
                "edge {f} -> {t} has probability {p}"
            );
            out[f] += p;
            if p > 0.0 {
                incoming[t].push((f as u32, p.ln()));
            }
        }
        for (s, &total) in out.iter().enumerate() {
            ensure!(
                (total - 1.0).abs() < 1e-9,
                Parameter,
                "outgoing probabilities of state {s} sum to {total}"
            );
        }
        let mut tm = TransitionModel {
            n_states,
            starts: Vec::with_capacity(n_states + 1),
            from: Vec::new(),
            log_p: Vec::new(),
        };
        tm.starts.push(0);
        for mut preds in incoming {
            preds.sort_by_key(|&(f, _)| f);
            for w in preds.windows(2) {
                ensure!(w[0].0 != w[1].0, Parameter, "duplicate edge from state {}", w[0].0);
            }
            for (f, lp) in preds {
                tm.from.push(f);
                tm.log_p.push(lp);
            }
            tm.starts.push(tm.from.len());
        }
        Ok(tm)
    }

    /// Builds from a row-stochastic matrix `p[from, to]`.
    pub fn from_dense(p: &Array2<f64>) -> Result<TransitionModel> {
        ensure!(p.nrows() == p.ncols(), Shape, "transition matrix is {:?}", p.dim());
        let mut edges = Vec::new();
        for ((f, t), &v) in p.indexed_iter() {
            if v != 0.0 {
                edges.push((f, t, v));
            }
        }
        TransitionModel::from_edges(p.nrows(), &edges)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// Predecessors of `state` with their log transition probabilities.
    pub fn predecessors(&self, state: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.starts[state]..self.starts[state + 1];
        self.from[r.clone()]
            .iter()
            .zip(&self.log_p[r])
            .map(|(&f, &lp)| (f as usize, lp))
    }

    /// `ln P(to | from)`, `-inf` when there is no edge.
    pub fn log_prob(&self, from: usize, to: usize) -> f64 {
        self.predecessors(to)
            .find(|&(f, _)| f == from)
            .map_or(f64::NEG_INFINITY, |(_, lp)| lp)
    }
}

/// Builds the bar-pointer state space over the grid's tempo range and its
/// transition model. Tempo may change only when the bar wraps, to an
/// adjacent tempo state with probability `lambda` each.
pub fn build_state_space(
    grid: &ScaleGrid,
    tempo_subdivision: usize,
    beats_per_bar: usize,
    lambda: f64,
) -> Result<(BarPointerStateSpace, TransitionModel)> {
    ensure!(tempo_subdivision >= 1, Parameter, "tempo_subdivision must be at least 1");
    ensure!(beats_per_bar >= 1, Parameter, "beats_per_bar must be at least 1");
    ensure!(
        (0.0..=0.5).contains(&lambda),
        Parameter,
        "lambda {lambda} outside [0, 0.5]"
    );
    let n_tempi = grid.n_scales * tempo_subdivision;
    let (lo, hi) = (grid.tau0, grid.tau_max());
    let tempo_states: Vec<f64> = (0..n_tempi)
        .map(|q| {
            if n_tempi == 1 {
                lo
            } else {
                lo * (hi / lo).powf(q as f64 / (n_tempi - 1) as f64)
            }
        })
        .collect();
    let r = grid.frame_rate;
    let width = ((0.1 * r / 2.0).round() as usize).max(1);
    let bar_lengths: Vec<usize> = tempo_states
        .iter()
        .map(|t| ((beats_per_bar as f64 * t * r).round() as usize).max(1))
        .collect();
    let total: usize = bar_lengths.iter().sum();
    ensure!(
        total <= MAX_STATES,
        Capacity,
        "{total} HMM states exceed the limit of {MAX_STATES}"
    );
    let downbeat_widths: Vec<usize> = bar_lengths.iter().map(|&l| width.min(l)).collect();
    let mut offsets = Vec::with_capacity(n_tempi);
    let mut acc = 0;
    for &l in &bar_lengths {
        offsets.push(acc);
        acc += l;
    }
    let n_down: usize = downbeat_widths.iter().sum();
    let sigma = if total > n_down {
        (total - n_down) as f64 / n_down as f64
    } else {
        // every state is a downbeat state; keep the non-downbeat term finite
        1.0 / n_down as f64
    };
    let space = BarPointerStateSpace {
        tempo_states,
        beats_per_bar,
        frame_rate: r,
        bar_lengths,
        downbeat_widths,
        offsets,
        sigma,
    };

    let mut edges = Vec::with_capacity(total + 2 * n_tempi);
    for q in 0..n_tempi {
        let l = space.bar_lengths[q];
        for phase in 0..l - 1 {
            edges.push((space.state(q, phase), space.state(q, phase + 1), 1.0));
        }
        let last = space.state(q, l - 1);
        let mut targets = vec![(q, 1.0 - 2.0 * lambda)];
        if q > 0 {
            targets.push((q - 1, lambda));
        }
        if q + 1 < n_tempi {
            targets.push((q + 1, lambda));
        }
        let norm: f64 = targets.iter().map(|t| t.1).sum();
        for (t, p) in targets {
            if norm > 0.0 {
                edges.push((last, space.state(t, 0), p / norm));
            }
        }
        if norm == 0.0 {
            edges.push((last, space.state(q, 0), 1.0));
        }
    }
    let trans = TransitionModel::from_edges(total, &edges)?;
    Ok((space, trans))
}

/// Per-frame observation likelihoods. States sharing a class share a
/// likelihood, so the matrix is stored per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsMatrix {
    /// Class of each state.
    pub classes: Vec<u32>,
    /// `N x n_classes`.
    pub values: Array2<f64>,
}

impl ObsMatrix {
    /// One class per state.
    pub fn dense(values: Array2<f64>) -> ObsMatrix {
        ObsMatrix {
            classes: (0..values.ncols() as u32).collect(),
            values,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_states(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, frame: usize, state: usize) -> f64 {
        self.values[[frame, self.classes[state] as usize]]
    }
}

/// Linear interpolation weights in log-tempo: `(j_lo, w_lo, j_hi, w_hi)`.
fn interpolation(grid: &ScaleGrid, tau: f64) -> (usize, f64, usize, f64) {
    let s = grid.n_scales;
    let x = grid.index_of_tau(tau).clamp(0.0, (s - 1) as f64);
    let lo = (x.floor() as usize).min(s - 1);
    let hi = (lo + 1).min(s - 1);
    let w_hi = x - lo as f64;
    if hi == lo {
        (lo, 1.0, hi, 0.0)
    } else {
        (lo, 1.0 - w_hi, hi, w_hi)
    }
}

/// Observation model. Joint grids: downbeat states of tempo `q` see the
/// activation interpolated at `tau_q`, all other states `o_S / (sigma S)`.
/// Downbeat-only grids: `a` on downbeat states, `(1 - a) / sigma` elsewhere.
pub fn observation_probs(
    o: &ActivationGrid,
    space: &BarPointerStateSpace,
    grid: &ScaleGrid,
) -> Result<ObsMatrix> {
    let n_tempi = space.n_tempi();
    let n_classes = n_tempi + 1;
    let mut classes = vec![n_tempi as u32; space.n_states()];
    for q in 0..n_tempi {
        for phase in 0..space.downbeat_widths[q] {
            classes[space.state(q, phase)] = q as u32;
        }
    }
    let n = o.n_frames();
    let mut values = Array2::<f64>::zeros((n, n_classes));
    match o.kind {
        ActivationKind::Joint => {
            let s = grid.n_scales;
            ensure!(
                o.values.ncols() == s + 1,
                Shape,
                "activation has {} bins, the grid needs {}",
                o.values.ncols(),
                s + 1
            );
            let weights: Vec<_> = space
                .tempo_states
                .iter()
                .map(|&t| interpolation(grid, t))
                .collect();
            for f in 0..n {
                let row = o.values.row(f);
                for (q, &(lo, wl, hi, wh)) in weights.iter().enumerate() {
                    values[[f, q]] = wl * row[lo] + wh * row[hi];
                }
                values[[f, n_tempi]] = row[s] / (space.sigma * s as f64);
            }
        }
        ActivationKind::DownbeatOnly => {
            ensure!(
                o.values.ncols() == 2,
                Shape,
                "downbeat-only activation has {} bins, expected 2",
                o.values.ncols()
            );
            for f in 0..n {
                let a = o.values[[f, 0]];
                for q in 0..n_tempi {
                    values[[f, q]] = a;
                }
                values[[f, n_tempi]] = (1.0 - a) / space.sigma;
            }
        }
    }
    values.mapv_inplace(|v| if v.is_finite() { v.max(OBS_FLOOR) } else { OBS_FLOOR });
    Ok(ObsMatrix { classes, values })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    pub states: Vec<usize>,
    /// Joint log probability of the path and the observations.
    pub log_prob: f64,
}

/// Most probable state path, in the log domain. Ties go to the lower state
/// index. `init` defaults to uniform.
struct Run {
    start: usize,
    end: usize,
    offset: isize,
    log_p: f64,
    class: usize,
}

pub fn viterbi(obs: &ObsMatrix, trans: &TransitionModel, init: Option<&[f64]>) -> Result<StatePath> {
    let n = obs.n_frames();
    let k = trans.n_states();
    ensure!(n > 0, Input, "no observations to decode");
    ensure!(
        obs.n_states() == k,
        Shape,
        "observations cover {} states, the transition model {k}",
        obs.n_states()
    );
    ensure!(
        obs.values.iter().all(|&v| v > 0.0 && v.is_finite()),
        Input,
        "observations must be strictly positive"
    );
    let log_init: Vec<f64> = match init {
        Some(p) => {
            ensure!(p.len() == k, Shape, "initial distribution over {} states", p.len());
            let total: f64 = p.iter().sum();
            ensure!(
                p.iter().all(|&v| v >= 0.0) && (total - 1.0).abs() < 1e-9,
                Parameter,
                "initial distribution must be a probability vector"
            );
            p.iter().map(|v| v.ln()).collect()
        }
        None => vec![-(k as f64).ln(); k],
    };
    let log_obs = obs.values.mapv(f64::ln);
    let class = |s: usize| obs.classes[s] as usize;

    // Only states with several predecessors need stored back-pointers.
    let mut slot = vec![usize::MAX; k];
    let mut multis = Vec::new();
    let mut single = vec![usize::MAX; k];
    let mut orphans = Vec::new();
    // Single-predecessor states grouped into runs sharing the predecessor
    // offset, transition probability and observation class, so each run is
    // one shifted slice addition per frame.
    let mut runs: Vec<Run> = Vec::new();
    for s in 0..k {
        let np = trans.starts[s + 1] - trans.starts[s];
        if np == 0 {
            orphans.push(s);
        } else if np > 1 {
            slot[s] = multis.len();
            multis.push(s);
        } else {
            let p = trans.from[trans.starts[s]] as usize;
            single[s] = p;
            let lp = trans.log_p[trans.starts[s]];
            let offset = p as isize - s as isize;
            match runs.last_mut() {
                Some(r) if r.end == s && r.offset == offset && r.log_p == lp && r.class == class(s) => r.end += 1,
                _ => runs.push(Run {
                    start: s,
                    end: s + 1,
                    offset,
                    log_p: lp,
                    class: class(s),
                }),
            }
        }
    }
    let multi = multis.len();
    let mut back = vec![0u32; multi * (n - 1)];

    let mut delta: Vec<f64> = (0..k).map(|s| log_init[s] + log_obs[[0, class(s)]]).collect();
    let mut next = vec![f64::NEG_INFINITY; k];
    for f in 1..n {
        let row = (f - 1) * multi;
        let lo = log_obs.row(f);
        for &s in &orphans {
            next[s] = f64::NEG_INFINITY;
        }
        for r in &runs {
            let add = r.log_p + lo[r.class];
            let src = (r.start as isize + r.offset) as usize;
            let len = r.end - r.start;
            for (d, &v) in next[r.start..r.end].iter_mut().zip(&delta[src..src + len]) {
                *d = v + add;
            }
        }
        for (i, &s) in multis.iter().enumerate() {
            let mut best = f64::NEG_INFINITY;
            let mut arg = u32::MAX;
            for (p, lp) in trans.predecessors(s) {
                let v = delta[p] + lp;
                if v > best {
                    best = v;
                    arg = p as u32;
                }
            }
            back[row + i] = arg;
            next[s] = best + lo[class(s)];
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let (mut state, log_prob) = delta
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bs, bv), (s, &v)| if v > bv { (s, v) } else { (bs, bv) });
    ensure!(
        log_prob > f64::NEG_INFINITY,
        Input,
        "no state path has positive probability"
    );
    let mut states = vec![0; n];
    states[n - 1] = state;
    for f in (1..n).rev() {
        state = if slot[state] != usize::MAX {
            back[(f - 1) * multi + slot[state]] as usize
        } else {
            single[state]
        };
        states[f - 1] = state;
    }
    Ok(StatePath { states, log_prob })
}

/// Times (seconds) of the frames at which the path is at bar position 0.
pub fn extract_downbeats(path: &StatePath, space: &BarPointerStateSpace, frame_rate: f64) -> Vec<f64> {
    path.states
        .iter()
        .enumerate()
        .filter(|&(_, &s)| space.locate(s).1 == 0)
        .map(|(f, _)| f as f64 / frame_rate)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    /// HMM tempo states per network tempo bin. One state per bin spaces bar
    /// lengths about 9% apart, too coarse to follow a tempo between them
    /// within the evaluation tolerance.
    pub tempo_subdivision: usize,
    pub beats_per_bar: usize,
    pub lambda: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            tempo_subdivision: 4,
            beats_per_bar: 4,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

/// A state space and transition model built once and shared by every
/// decoded track.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub grid: ScaleGrid,
    pub space: BarPointerStateSpace,
    pub trans: TransitionModel,
}

impl Decoder {
    pub fn new(grid: &ScaleGrid, cfg: &DecoderConfig) -> Result<Decoder> {
        let (space, trans) =
            build_state_space(grid, cfg.tempo_subdivision, cfg.beats_per_bar, cfg.lambda)?;
        Ok(Decoder {
            grid: grid.clone(),
            space,
            trans,
        })
    }

    /// Downbeat times of one activation grid.
    pub fn decode(&self, o: &ActivationGrid) -> Result<Vec<f64>> {
        if o.n_frames() == 0 {
            return Ok(Vec::new());
        }
        let obs = observation_probs(o, &self.space, &self.grid)?;
        let path = viterbi(&obs, &self.trans, None)?;
        Ok(extract_downbeats(&path, &self.space, o.frame_rate))
    }

    /// Frames before the first possible bar wrap of the slowest tempo.
    pub fn warmup_frames(&self) -> usize {
        self.space.max_bar_length()
    }
}

/// One time per line with three decimals.
pub fn write_downbeat_file(path: &Path, times: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in times {
        writeln!(f, "{t:.3}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_downbeat_file(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let first = line.split_whitespace().next().unwrap();
        let t: f64 = first.parse().map_err(|_| {
            Error::Format(format!("{}:{}: not a time: {line:?}", path.display(), i + 1))
        })?;
        out.push(t);
    }
    Ok(out)
}
