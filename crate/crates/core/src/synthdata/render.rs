use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DrumPattern, TrackAnnotation};
use crate::error::ensure;
use crate::nnkernels::FeatureMap;

pub const MEL_BANDS: usize = 64;
pub const RENDER_FRAME_RATE: f64 = 50.0;
const REPEATS: u32 = 4;

/// Synthetic timbre: one mel-band envelope and decay per instrument.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderProfile {
    pub id: u32,
    /// `[instrument][band]`, non-negative.
    pub templates: [[f64; MEL_BANDS]; 5],
    /// Seconds, per instrument.
    pub decays: [f64; 5],
    pub noise_floor: f64,
    pub gain: f64,
}

/// `(centre band, width in bands, decay range in seconds)` per instrument.
const VOICES: [(f64, f64, (f64, f64)); 5] = [
    (5.0, 3.0, (0.08, 0.16)),
    (26.0, 8.0, (0.06, 0.12)),
    (52.0, 6.0, (0.02, 0.05)),
    (14.0, 4.0, (0.10, 0.20)),
    (46.0, 12.0, (0.25, 0.50)),
];

impl RenderProfile {
    /// Deterministic profile for `id`; distinct ids give distinct timbres.
    pub fn from_id(id: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 ^ u64::from(id));
        let mut templates = [[0.0; MEL_BANDS]; 5];
        let mut decays = [0.0; 5];
        for (i, &(centre, width, (dlo, dhi))) in VOICES.iter().enumerate() {
            let c = centre + rng.random_range(-4.0..4.0);
            let w = width * rng.random_range(0.7..1.4);
            // a secondary partial gives each profile its own spectral shape
            let c2 = c + rng.random_range(-12.0..12.0);
            let a2 = rng.random_range(0.0..0.5);
            let tilt = rng.random_range(-0.01..0.01);
            for (b, v) in templates[i].iter_mut().enumerate() {
                let x = b as f64;
                let main = (-0.5 * ((x - c) / w).powi(2)).exp();
                let side = a2 * (-0.5 * ((x - c2) / (0.6 * w)).powi(2)).exp();
                *v = ((main + side) * (1.0 + tilt * (x - c))).max(0.0);
            }
            decays[i] = rng.random_range(dlo..dhi);
        }
        RenderProfile {
            id,
            templates,
            decays,
            noise_floor: rng.random_range(0.005..0.02),
            gain: rng.random_range(5.0..20.0),
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        ensure!(
            self.templates.iter().flatten().all(|v| v.is_finite() && *v >= 0.0),
            Parameter,
            "profile {}: templates must be non-negative",
            self.id
        );
        ensure!(
            self.decays.iter().all(|d| d.is_finite() && *d > 0.0),
            Parameter,
            "profile {}: decay times must be positive",
            self.id
        );
        ensure!(
            self.noise_floor >= 0.0 && self.gain > 0.0,
            Parameter,
            "profile {}: noise floor must be >= 0 and gain > 0",
            self.id
        );
        Ok(())
    }
}

/// Renders `pattern` at `tempo_scale` times its original tempo: a leading
/// silence drawn uniformly from one bar, then four repetitions.
pub fn render_features(
    pattern: &DrumPattern,
    tempo_scale: f64,
    profile: &RenderProfile,
    seed: u64,
) -> crate::Result<(FeatureMap, TrackAnnotation)> {
    ensure!(
        tempo_scale.is_finite() && tempo_scale > 0.0,
        Parameter,
        "tempo scale must be positive, got {tempo_scale}"
    );
    pattern.validate()?;
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bpm = pattern.original_tempo * tempo_scale;
    let beat = 60.0 / bpm;
    let bpb = pattern.beats_per_bar;
    let bar = beat * f64::from(bpb);
    let silence = rng.random::<f64>() * bar;
    let total_beats = REPEATS * pattern.bars * bpb;
    let duration = silence + f64::from(total_beats) * beat;
    let n_frames = ((duration * RENDER_FRAME_RATE) - 1e-9).ceil().max(1.0) as usize;

    let mut env = Array2::<f64>::zeros((n_frames, MEL_BANDS));
    let step_len = beat / f64::from(pattern.grid_resolution);
    for rep in 0..REPEATS {
        let rep_start = silence + f64::from(rep * pattern.bars * bpb) * beat;
        for e in &pattern.events {
            let onset = rep_start + f64::from(e.step) * step_len;
            let i = e.instrument.index();
            add_event(&mut env, onset, e.velocity, &profile.templates[i], profile.decays[i]);
        }
    }
    for v in env.iter_mut() {
        let noise = profile.noise_floor * (0.5 + rng.random::<f64>());
        *v = (1.0 + profile.gain * (*v + noise)).ln();
    }

    let beats: Vec<f64> = (0..total_beats)
        .map(|b| silence + f64::from(b) * beat)
        .collect();
    let downbeats: Vec<f64> = (0..REPEATS * pattern.bars)
        .map(|k| silence + f64::from(k * bpb) * beat)
        .collect();
    let annotation = TrackAnnotation {
        downbeats,
        beats,
        tempo_curve: vec![(0.0, bpm)],
        duration,
    };
    Ok((FeatureMap::from_frames(env, RENDER_FRAME_RATE), annotation))
}

fn add_event(env: &mut Array2<f64>, onset: f64, vel: f64, template: &[f64; MEL_BANDS], decay: f64) {
    let n_frames = env.nrows();
    let first = (onset * RENDER_FRAME_RATE).round() as usize;
    // stop once the tail is far below any realistic noise floor
    let span = (decay * RENDER_FRAME_RATE * 12.0).ceil() as usize + 1;
    for n in first..(first + span).min(n_frames) {
        let t = n as f64 / RENDER_FRAME_RATE;
        let a = vel * (-(t - onset).max(0.0) / decay).exp();
        for (v, &tpl) in env.row_mut(n).iter_mut().zip(template.iter()) {
            *v += a * tpl;
        }
    }
}

/// Sorted distinct onset frames of a rendering of `pattern`.
pub fn onset_frames(pattern: &DrumPattern, annotation: &TrackAnnotation) -> Vec<usize> {
    let beat = 60.0 / annotation.tempo_curve[0].1;
    let step_len = beat / f64::from(pattern.grid_resolution);
    let bar_beats = pattern.bars * pattern.beats_per_bar;
    let mut frames: Vec<usize> = (0..REPEATS)
        .flat_map(|rep| {
            let start = annotation.downbeats[0] + f64::from(rep * bar_beats) * beat;
            pattern
                .events
                .iter()
                .map(move |e| ((start + f64::from(e.step) * step_len) * RENDER_FRAME_RATE).round() as usize)
        })
        .collect();
    frames.sort_unstable();
    frames.dedup();
    frames
}

/// Renders with the profile for `profile_id` at scale factor `2^(scale_index/26)`.
pub fn render_track(
    pattern: &DrumPattern,
    scale_index: i32,
    profile_id: u32,
    seed: u64,
) -> crate::Result<(FeatureMap, TrackAnnotation)> {
    let profile = RenderProfile::from_id(profile_id);
    render_features(pattern, super::scale_factor(scale_index), &profile, seed)
}
