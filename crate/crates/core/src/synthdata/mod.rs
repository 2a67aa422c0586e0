//! Synthetic drum-pattern data for the tempo-generalisation experiment, plus a
//! log-mel front end for real recordings.
//!
//! Patterns are symbolic (instrument, step, velocity) events on a sixteenth
//! grid. They are rendered straight into the mel domain by additive
//! percussive synthesis: each [`RenderProfile`] fixes a spectral template and
//! decay per instrument, so disjoint profile sets give the train/test timbre
//! split.

mod dataset;
mod files;
mod patterns;
mod render;
mod wav;

pub use dataset::{
    build_experiment_datasets, fnv1a, Datasets, ExperimentConfig, Split, TrackSpec, TEST_SCALES_FULL,
};
pub use files::{
    read_annotation_file, read_feature_file, read_manifest, read_pattern_file,
    write_annotation_file, write_feature_file, write_manifest, write_pattern_file, LoadedManifest, Manifest,
    ManifestEntry, MANIFEST_SCHEMA_VERSION, PATTERN_SCHEMA_VERSION,
};
pub use patterns::{canonical_patterns, generate_patterns, StyleMix};
pub use render::{onset_frames, render_features, render_track, RenderProfile, MEL_BANDS, RENDER_FRAME_RATE};
pub use wav::{load_wav_logmel, LogMelConfig};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Instrument {
    Kick,
    Snare,
    Hihat,
    Tom,
    Crash,
}

impl Instrument {
    pub const ALL: [Instrument; 5] = [
        Instrument::Kick,
        Instrument::Snare,
        Instrument::Hihat,
        Instrument::Tom,
        Instrument::Crash,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrumEvent {
    pub instrument: Instrument,
    pub step: u32,
    /// In `(0, 1]`.
    pub velocity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrumPattern {
    pub id: String,
    /// Steps per beat.
    pub grid_resolution: u32,
    pub beats_per_bar: u32,
    pub bars: u32,
    pub events: Vec<DrumEvent>,
    /// Beats per minute at scale factor 1.
    pub original_tempo: f64,
}

impl DrumPattern {
    pub fn steps(&self) -> u32 {
        self.bars * self.beats_per_bar * self.grid_resolution
    }

    pub fn validate(&self) -> crate::Result<()> {
        use crate::error::ensure;
        ensure!(
            self.grid_resolution > 0 && self.beats_per_bar > 0 && self.bars > 0,
            Input,
            "pattern {} has an empty grid",
            self.id
        );
        ensure!(
            self.original_tempo.is_finite() && self.original_tempo > 0.0,
            Input,
            "pattern {} has tempo {}",
            self.id,
            self.original_tempo
        );
        for e in &self.events {
            ensure!(
                e.step < self.steps(),
                Input,
                "pattern {}: step {} outside {} steps",
                self.id,
                e.step,
                self.steps()
            );
            ensure!(
                e.velocity > 0.0 && e.velocity <= 1.0,
                Input,
                "pattern {}: velocity {} outside (0, 1]",
                self.id,
                e.velocity
            );
        }
        Ok(())
    }
}

/// Ground truth of one rendered track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackAnnotation {
    pub downbeats: Vec<f64>,
    pub beats: Vec<f64>,
    /// `(segment start in seconds, BPM)`.
    pub tempo_curve: Vec<(f64, f64)>,
    pub duration: f64,
}

impl TrackAnnotation {
    /// Local beat period at time `t`: from the tempo curve when present,
    /// otherwise from adjacent beat annotations, otherwise from the
    /// inter-downbeat interval divided by `beats_per_bar`.
    pub fn beat_period_at(&self, t: f64, beats_per_bar: usize) -> Option<f64> {
        if let Some(&(_, bpm)) = self.tempo_curve.iter().rev().find(|(s, _)| *s <= t + 1e-9) {
            return Some(60.0 / bpm);
        }
        if let Some(&(_, bpm)) = self.tempo_curve.first() {
            return Some(60.0 / bpm);
        }
        let nearest_interval = |times: &[f64]| -> Option<f64> {
            if times.len() < 2 {
                return None;
            }
            let i = times.partition_point(|&x| x < t);
            let i = i.clamp(1, times.len() - 1);
            Some(times[i] - times[i - 1])
        };
        if let Some(p) = nearest_interval(&self.beats) {
            return Some(p);
        }
        nearest_interval(&self.downbeats).map(|p| p / beats_per_bar as f64)
    }
}

/// Tempo scale factors `2^(i / 26)` for `i` in `i_min..=i_max`.
pub fn tempo_scale_factors(i_min: i32, i_max: i32) -> crate::Result<Vec<f64>> {
    use crate::error::ensure;
    ensure!(
        (-13..=13).contains(&i_min) && (-13..=13).contains(&i_max) && i_min <= i_max,
        Parameter,
        "scale indices must satisfy -13 <= {i_min} <= {i_max} <= 13"
    );
    Ok((i_min..=i_max).map(scale_factor).collect())
}

pub fn scale_factor(i: i32) -> f64 {
    (i as f64 / 26.0).exp2()
}
