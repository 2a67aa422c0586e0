//! Downbeat scoring, bootstrap intervals and the tempo-generalisation sweep.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::decoder::Decoder;
use crate::error::{ensure, Error, Result};
use crate::model::{ActivationGrid, Network};
use crate::nnkernels::FeatureMap;
use crate::synthdata::TrackAnnotation;

pub const DEFAULT_TOLERANCE: f64 = 0.07;
/// Slack that keeps the tolerance interval closed under rounding.
const EDGE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl EvalResult {
    fn from_counts(matched: usize, n_est: usize, n_ann: usize) -> EvalResult {
        let (precision, recall, f1) = if n_est == 0 && n_ann == 0 {
            (1.0, 1.0, 1.0)
        } else {
            let p = if n_est == 0 { 0.0 } else { matched as f64 / n_est as f64 };
            let r = if n_ann == 0 { 0.0 } else { matched as f64 / n_ann as f64 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            (p, r, f)
        };
        EvalResult {
            precision,
            recall,
            f1,
            matched,
            false_pos: n_est - matched,
            false_neg: n_ann - matched,
        }
    }
}

fn check_sorted(times: &[f64], what: &str) -> Result<()> {
    ensure!(
        times.iter().all(|t| t.is_finite()),
        Input,
        "{what} contain non-finite times"
    );
    ensure!(
        times.windows(2).all(|w| w[0] <= w[1]),
        Input,
        "{what} must be sorted ascending"
    );
    Ok(())
}

/// F-measure with one-to-one matching inside a closed `±tol` window.
///
/// Annotations are visited in time order; each takes the nearest unmatched
/// estimate in its window, the earlier one on ties.
pub fn f_measure(est: &[f64], ann: &[f64], tol: f64) -> Result<EvalResult> {
    ensure!(tol >= 0.0 && tol.is_finite(), Parameter, "tolerance must be non-negative");
    check_sorted(est, "estimates")?;
    check_sorted(ann, "annotations")?;
    let mut used = vec![false; est.len()];
    let mut lo = 0usize;
    let mut matched = 0usize;
    for &a in ann {
        while lo < est.len() && est[lo] < a - tol - EDGE_SLACK {
            lo += 1;
        }
        let mut best: Option<(usize, f64)> = None;
        let mut i = lo;
        while i < est.len() && est[i] <= a + tol + EDGE_SLACK {
            if !used[i] {
                let d = (est[i] - a).abs();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            i += 1;
        }
        if let Some((i, _)) = best {
            used[i] = true;
            matched += 1;
        }
    }
    Ok(EvalResult::from_counts(matched, est.len(), ann.len()))
}

/// Percentile bootstrap interval of the mean of `scores`.
pub fn bootstrap_ci(scores: &[f64], iterations: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    ensure!(scores.len() >= 2, Input, "bootstrap needs at least 2 scores, got {}", scores.len());
    ensure!(iterations >= 1, Parameter, "bootstrap needs at least one iteration");
    ensure!(level > 0.0 && level < 1.0, Parameter, "level {level} outside (0, 1)");
    let n = scores.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..iterations)
        .map(|_| (0..n).map(|_| scores[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let pick = |q: f64| {
        let x = q * (iterations - 1) as f64;
        let i = x.floor() as usize;
        let j = (i + 1).min(iterations - 1);
        means[i] + (means[j] - means[i]) * (x - i as f64)
    };
    let alpha = (1.0 - level) / 2.0;
    // summation rounding must not push the interval outside the data range
    let lo_bound = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_bound = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = (scores.iter().sum::<f64>() / n as f64).clamp(lo_bound, hi_bound);
    let lo = pick(alpha).clamp(lo_bound, hi_bound).min(mean);
    let hi = pick(1.0 - alpha).clamp(lo_bound, hi_bound).max(mean);
    Ok((lo, hi))
}

/// Drops the first annotated downbeat when it lies inside the decoder's
/// warm-up window, together with the estimates closer to it than to the
/// next annotation.
pub fn exclude_warmup(est: &[f64], ann: &[f64], warmup_seconds: f64, tol: f64) -> (Vec<f64>, Vec<f64>) {
    match ann.first() {
        Some(&a0) if a0 < warmup_seconds => {
            let cut = match ann.get(1) {
                Some(&a1) => 0.5 * (a0 + a1),
                None => a0 + tol,
            };
            (
                est.iter().copied().filter(|&t| t >= cut).collect(),
                ann[1..].to_vec(),
            )
        }
        _ => (est.to_vec(), ann.to_vec()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Scale indices the test set must cover.
    pub scale_indices: Vec<i32>,
    pub tolerance: f64,
    pub exclude_warmup: bool,
    pub bootstrap_iterations: usize,
    pub level: f64,
    pub seed: u64,
    /// Width of the effective-tempo buckets, BPM.
    pub bpm_bucket_width: f64,
    /// Tracks per network batch.
    pub batch: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            scale_indices: (-13..=13).collect(),
            tolerance: DEFAULT_TOLERANCE,
            exclude_warmup: true,
            bootstrap_iterations: 10_000,
            level: 0.95,
            seed: 0,
            bpm_bucket_width: 10.0,
            batch: 8,
        }
    }
}

/// One test track of the sweep.
#[derive(Debug, Clone)]
pub struct SweepTrack {
    pub id: String,
    pub scale_index: i32,
    pub features: FeatureMap,
    pub annotation: TrackAnnotation,
}

impl SweepTrack {
    /// Tempo at the first downbeat, BPM.
    pub fn effective_bpm(&self, beats_per_bar: usize) -> Option<f64> {
        let t = self.annotation.downbeats.first().copied().unwrap_or(0.0);
        self.annotation.beat_period_at(t, beats_per_bar).map(|p| 60.0 / p)
    }
}

/// Something that turns features into activations.
pub trait ActivationSource: Sync {
    fn activations(&self, xs: &[&FeatureMap], batch: usize) -> Result<Vec<ActivationGrid>>;
}

impl ActivationSource for Network {
    fn activations(&self, xs: &[&FeatureMap], batch: usize) -> Result<Vec<ActivationGrid>> {
        self.predict_many(xs, batch)
    }
}

impl<F> ActivationSource for F
where
    F: Fn(&FeatureMap) -> Result<ActivationGrid> + Sync,
{
    fn activations(&self, xs: &[&FeatureMap], _batch: usize) -> Result<Vec<ActivationGrid>> {
        xs.iter().map(|x| self(x)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackScore {
    pub model: String,
    pub track_id: String,
    pub scale_index: i32,
    pub effective_bpm: Option<f64>,
    pub result: EvalResult,
}

/// One aggregate row: by scale index or by effective-tempo bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub model: String,
    pub scale_index: Option<i32>,
    /// Lower edge of the bucket, BPM.
    pub bpm_bucket: Option<f64>,
    pub mean_f1: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_tracks: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub tracks: Vec<TrackScore>,
}

impl SweepTable {
    pub fn by_scale(&self, model: &str, scale_index: i32) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.scale_index == Some(scale_index))
    }

    /// Mean of the per-scale mean F1 over `indices`.
    pub fn mean_over(&self, model: &str, indices: &[i32]) -> Option<f64> {
        let v: Option<Vec<f64>> = indices
            .iter()
            .map(|&i| self.by_scale(model, i).map(|r| r.mean_f1))
            .collect();
        v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Appends the rows and scores of another table.
    pub fn extend(&mut self, other: SweepTable) {
        self.rows.extend(other.rows);
        self.tracks.extend(other.tracks);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "model,scale_index,effective_bpm_bucket,mean_f1,ci_lo,ci_hi,n_tracks")?;
        for r in &self.rows {
            let scale = r.scale_index.map_or("all".to_string(), |i| i.to_string());
            let bucket = r.bpm_bucket.map_or("all".to_string(), |b| format!("{b:.0}"));
            writeln!(
                f,
                "{},{scale},{bucket},{:.6},{:.6},{:.6},{}",
                r.model, r.mean_f1, r.ci_lo, r.ci_hi, r.n_tracks
            )?;
        }
        f.flush()?;
        Ok(())
    }

    /// F1 against relative tempo change.
    pub fn write_fig4a(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "model,scale_index,tempo_factor,mean_f1,ci_lo,ci_hi")?;
        for r in self.rows.iter().filter(|r| r.scale_index.is_some()) {
            let i = r.scale_index.unwrap();
            writeln!(
                f,
                "{},{i},{:.6},{:.6},{:.6},{:.6}",
                r.model,
                crate::synthdata::scale_factor(i),
                r.mean_f1,
                r.ci_lo,
                r.ci_hi
            )?;
        }
        f.flush()?;
        Ok(())
    }

    /// F1 against absolute tempo.
    pub fn write_fig4b(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "model,bpm_bucket,mean_f1,ci_lo,ci_hi,n_tracks")?;
        for r in self.rows.iter().filter(|r| r.bpm_bucket.is_some()) {
            writeln!(
                f,
                "{},{:.0},{:.6},{:.6},{:.6},{}",
                r.model,
                r.bpm_bucket.unwrap(),
                r.mean_f1,
                r.ci_lo,
                r.ci_hi,
                r.n_tracks
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Scale indices of `wanted` missing from `tracks`, as a coverage error.
pub fn check_coverage(tracks: &[SweepTrack], wanted: &[i32]) -> Result<()> {
    let missing: Vec<i32> = wanted
        .iter()
        .copied()
        .filter(|i| !tracks.iter().any(|t| t.scale_index == *i))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Coverage(missing))
    }
}

fn aggregate(model: &str, scores: &[&TrackScore], cfg: &SweepConfig) -> Result<(f64, f64, f64)> {
    let f1: Vec<f64> = scores.iter().map(|s| s.result.f1).collect();
    let mean = f1.iter().sum::<f64>() / f1.len() as f64;
    if f1.len() < 2 {
        return Ok((mean, mean, mean));
    }
    let seed = cfg.seed ^ crate::synthdata::fnv1a(model.as_bytes());
    let (lo, hi) = bootstrap_ci(&f1, cfg.bootstrap_iterations, cfg.level, seed)?;
    Ok((mean, lo, hi))
}

/// Scores one model on one set of downbeat estimates per track.
pub fn score_tracks(
    model: &str,
    tracks: &[SweepTrack],
    estimates: &[Vec<f64>],
    warmup_seconds: f64,
    cfg: &SweepConfig,
    beats_per_bar: usize,
) -> Result<Vec<TrackScore>> {
    tracks
        .iter()
        .zip(estimates)
        .map(|(t, est)| {
            let (est, ann) = if cfg.exclude_warmup {
                exclude_warmup(est, &t.annotation.downbeats, warmup_seconds, cfg.tolerance)
            } else {
                (est.clone(), t.annotation.downbeats.clone())
            };
            Ok(TrackScore {
                model: model.to_string(),
                track_id: t.id.clone(),
                scale_index: t.scale_index,
                effective_bpm: t.effective_bpm(beats_per_bar),
                result: f_measure(&est, &ann, cfg.tolerance)?,
            })
        })
        .collect()
}

/// Aggregates track scores per scale index and per effective-tempo bucket.
pub fn summarise(model: &str, scores: &[TrackScore], cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let mut by_scale: BTreeMap<i32, Vec<&TrackScore>> = BTreeMap::new();
    let mut by_bucket: BTreeMap<i64, Vec<&TrackScore>> = BTreeMap::new();
    for s in scores {
        by_scale.entry(s.scale_index).or_default().push(s);
        if let Some(bpm) = s.effective_bpm {
            let b = (bpm / cfg.bpm_bucket_width).floor() as i64;
            by_bucket.entry(b).or_default().push(s);
        }
    }
    for (i, group) in &by_scale {
        let (mean_f1, ci_lo, ci_hi) = aggregate(model, group, cfg)?;
        rows.push(SweepRow {
            model: model.to_string(),
            scale_index: Some(*i),
            bpm_bucket: None,
            mean_f1,
            ci_lo,
            ci_hi,
            n_tracks: group.len(),
        });
    }
    for (b, group) in &by_bucket {
        let (mean_f1, ci_lo, ci_hi) = aggregate(model, group, cfg)?;
        rows.push(SweepRow {
            model: model.to_string(),
            scale_index: None,
            bpm_bucket: Some(*b as f64 * cfg.bpm_bucket_width),
            mean_f1,
            ci_lo,
            ci_hi,
            n_tracks: group.len(),
        });
    }
    Ok(rows)
}

/// Decodes every test track with every model and aggregates the F1 scores.
pub fn run_sweep(
    models: &[(&str, &dyn ActivationSource)],
    tracks: &[SweepTrack],
    decoder: &Decoder,
    cfg: &SweepConfig,
) -> Result<SweepTable> {
    check_coverage(tracks, &cfg.scale_indices)?;
    let tracks: Vec<SweepTrack> = tracks
        .iter()
        .filter(|t| cfg.scale_indices.contains(&t.scale_index))
        .cloned()
        .collect();
    let warmup = decoder.warmup_frames() as f64 / decoder.grid.frame_rate;
    let bpb = decoder.space.beats_per_bar;
    let mut table = SweepTable::default();
    for &(name, source) in models {
        let mut estimates = Vec::with_capacity(tracks.len());
        // bounded memory: activations of one chunk at a time
        for chunk in tracks.chunks(cfg.batch.max(1) * 8) {
            let xs: Vec<&FeatureMap> = chunk.iter().map(|t| &t.features).collect();
            let acts = source.activations(&xs, cfg.batch)?;
            let decoded: Result<Vec<Vec<f64>>> = acts.par_iter().map(|a| decoder.decode(a)).collect();
            estimates.extend(decoded?);
        }
        let scores = score_tracks(name, &tracks, &estimates, warmup, cfg, bpb)?;
        table.rows.extend(summarise(name, &scores, cfg)?);
        table.tracks.extend(scores);
    }
    Ok(table)
}
