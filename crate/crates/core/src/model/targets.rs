use ndarray::Array2;

use crate::error::{ensure, Result};
use crate::scaling::ScaleGrid;
use crate::synthdata::TrackAnnotation;

/// Half-width of the rectangular time window around each downbeat, seconds.
pub const DOWNBEAT_HALF_WIDTH: f64 = 0.05;

/// Frame-wise training targets, `N x (S + 1)`; the last bin is "no downbeat".
#[derive(Debug, Clone, PartialEq)]
pub struct TargetGrid {
    pub values: Array2<f64>,
    /// Downbeats whose beat period fell outside the grid and was clamped.
    pub clamped: usize,
}

impl TargetGrid {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    /// Frames carrying downbeat mass.
    pub fn downbeat_frames(&self) -> Vec<usize> {
        let last = self.values.ncols() - 1;
        (0..self.n_frames())
            .filter(|&n| self.values[[n, last]] < 1.0)
            .collect()
    }

    /// Collapses the tempo bins into a single downbeat bin: `N x 2`.
    pub fn downbeat_only(&self) -> TargetGrid {
        let last = self.values.ncols() - 1;
        let mut values = Array2::<f64>::zeros((self.n_frames(), 2));
        for (n, row) in self.values.outer_iter().enumerate() {
            values[[n, 1]] = row[last];
            values[[n, 0]] = 1.0 - row[last];
        }
        TargetGrid {
            values,
            clamped: self.clamped,
        }
    }
}

/// Tempo weight of grid bin `j` for a downbeat with beat period `tau`:
/// `cos^2(pi T d / 4)` for `|d| <= 1/T`, where `d = log2(tau_j / tau)`.
pub fn tempo_weights(grid: &ScaleGrid, tau: f64) -> Vec<f64> {
    let t = grid.per_octave as f64;
    grid.taus
        .iter()
        .map(|&tj| {
            let d = (tj / tau).log2();
            if d.abs() <= 1.0 / t + 1e-12 {
                (std::f64::consts::PI * t * d / 4.0).cos().powi(2)
            } else {
                0.0
            }
        })
        .collect()
}

/// Spreads every annotated downbeat over the frames within
/// `DOWNBEAT_HALF_WIDTH` and over the tempo bins near its beat period.
pub fn make_targets(ann: &TrackAnnotation, grid: &ScaleGrid, n_frames: usize) -> Result<TargetGrid> {
    ensure!(n_frames >= 1, Shape, "targets need at least one frame");
    let s = grid.n_scales;
    let r = grid.frame_rate;
    let mut values = Array2::<f64>::zeros((n_frames, s + 1));
    let mut clamped = 0;
    for &t in &ann.downbeats {
        let tau = ann.beat_period_at(t, grid.beats).ok_or_else(|| {
            crate::Error::Input(format!("no beat period available for the downbeat at {t} s"))
        })?;
        let lo_tau = grid.tau0;
        let hi_tau = grid.tau_max();
        let tau = if tau < lo_tau || tau > hi_tau {
            clamped += 1;
            tau.clamp(lo_tau, hi_tau)
        } else {
            tau
        };
        let w = tempo_weights(grid, tau);
        let first = ((t - DOWNBEAT_HALF_WIDTH) * r - 1e-9).ceil().max(0.0) as usize;
        let last = ((t + DOWNBEAT_HALF_WIDTH) * r + 1e-9).floor();
        if last < 0.0 {
            continue;
        }
        let last = (last as usize).min(n_frames - 1);
        for n in first..=last {
            for (j, &v) in w.iter().enumerate() {
                values[[n, j]] += v;
            }
        }
    }
    for mut row in values.outer_iter_mut() {
        let total: f64 = row.iter().take(s).sum();
        if total > 0.0 {
            row.iter_mut().take(s).for_each(|v| *v /= total);
        } else {
            row[s] = 1.0;
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} downbeat beat periods clamped to the tempo grid");
    }
    Ok(TargetGrid { values, clamped })
}
