//! Scale grid and the fixed scaling tensor that maps musical-time patterns to
//! frame-time kernels.
//!
//! A [`ScaleGrid`] places `S` beat periods `tau_j = tau0 * 2^(j/T)` on a log
//! axis and turns each into a resampling factor `s_j = r * tau_j * B / M`: a
//! pattern of `M` samples spanning `B` beats becomes `s_j * M` frames long at
//! that tempo. The [`ScalingTensor`] holds one `N* x M` resampling matrix per
//! scale, built from a sinc interpolator and smoothed along the scale axis by a
//! raised-cosine window of unit mass.

use std::io::{Read, Write};
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

use crate::container::{Kind, Reader, Writer};
use crate::error::{ensure, Error, Result};

/// Largest kernel length accepted by [`build_scale_grid`].
pub const DEFAULT_N_STAR_CAP: usize = 10_000;

/// Largest number of tensor elements accepted by [`build_scaling_tensor`]
/// (1 GiB of `f64`).
pub const DEFAULT_TENSOR_BUDGET: usize = 1 << 27;

/// Default midpoint-rule step, in scale bins (and frames, see
/// [`build_scaling_tensor`]).
pub const DEFAULT_QUADRATURE_STEP: f64 = 0.05;

/// Sinc tail margin, in frames, used to decide which columns are far enough
/// from the kernel edges to be treated as interior.
pub const SINC_MARGIN: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleGrid {
    /// Shortest beat period, seconds.
    pub tau0: f64,
    /// Scales per tempo octave.
    pub per_octave: usize,
    pub n_scales: usize,
    /// Feature frame rate, frames per second.
    pub frame_rate: f64,
    /// Beats spanned by one pattern.
    pub beats: usize,
    /// Pattern length in musical-time samples.
    pub pattern_len: usize,
    pub taus: Vec<f64>,
    pub scales: Vec<f64>,
    /// Kernel length in frames, `ceil(max_j s_j * M)`.
    pub n_star: usize,
}

impl ScaleGrid {
    /// Continuous extension of the beat period to fractional scale indices.
    pub fn tau_at(&self, j: f64) -> f64 {
        self.tau0 * (j / self.per_octave as f64).exp2()
    }

    /// Continuous extension of the scale factor to fractional scale indices.
    pub fn scale_at(&self, j: f64) -> f64 {
        self.frame_rate * self.tau_at(j) * self.beats as f64 / self.pattern_len as f64
    }

    /// Beat period of the last scale.
    pub fn tau_max(&self) -> f64 {
        *self.taus.last().unwrap()
    }

    /// Nearest (possibly fractional) scale index of a beat period.
    pub fn index_of_tau(&self, tau: f64) -> f64 {
        (tau / self.tau0).log2() * self.per_octave as f64
    }
}

/// Builds the log-spaced grid with the default kernel-length cap.
pub fn build_scale_grid(
    tau0: f64,
    per_octave: usize,
    n_scales: usize,
    frame_rate: f64,
    beats: usize,
    pattern_len: usize,
) -> Result<ScaleGrid> {
    build_scale_grid_capped(
        tau0,
        per_octave,
        n_scales,
        frame_rate,
        beats,
        pattern_len,
        DEFAULT_N_STAR_CAP,
    )
}

pub fn build_scale_grid_capped(
    tau0: f64,
    per_octave: usize,
    n_scales: usize,
    frame_rate: f64,
    beats: usize,
    pattern_len: usize,
    n_star_cap: usize,
) -> Result<ScaleGrid> {
    ensure!(
        tau0.is_finite() && tau0 > 0.0,
        Parameter,
        "tau0 must be positive, got {tau0}"
    );
    ensure!(
        frame_rate.is_finite() && frame_rate > 0.0,
        Parameter,
        "frame rate must be positive, got {frame_rate}"
    );
    ensure!(per_octave > 0, Parameter, "scales per octave must be positive");
    ensure!(n_scales > 0, Parameter, "need at least one scale");
    ensure!(beats > 0, Parameter, "beats per pattern must be positive");
    ensure!(pattern_len > 0, Parameter, "pattern length must be positive");

    let taus: Vec<f64> = (0..n_scales)
        .map(|j| tau0 * (j as f64 / per_octave as f64).exp2())
        .collect();
    let scales: Vec<f64> = taus
        .iter()
        .map(|t| frame_rate * t * beats as f64 / pattern_len as f64)
        .collect();
    let longest = scales[n_scales - 1] * pattern_len as f64;
    // Guard against 399.9999999 / 400.0000001 style rounding of exact products.
    let n_star = ((longest - 1e-9).ceil() as usize).max(1);
    if n_star > n_star_cap {
        return Err(Error::Capacity(format!(
            "kernel length {n_star} exceeds cap {n_star_cap}"
        )));
    }
    Ok(ScaleGrid {
        tau0,
        per_octave,
        n_scales,
        frame_rate,
        beats,
        pattern_len,
        taus,
        scales,
        n_star,
    })
}

/// Normalised sinc interpolation kernel, `sin(pi d) / (pi d)`.
pub fn kappa_n(d: f64) -> f64 {
    if d == 0.0 {
        return 1.0;
    }
    let x = std::f64::consts::PI * d;
    if x.abs() < 1e-4 {
        // Series keeps full precision where sin(x)/x cancels.
        return 1.0 - x * x / 6.0;
    }
    x.sin() / x
}

/// Raised-cosine scale smoothing kernel with unit integral.
pub fn kappa_s(d: f64, alpha: f64) -> Result<f64> {
    ensure!(
        alpha.is_finite() && alpha > 0.0,
        Parameter,
        "alpha must be positive, got {alpha}"
    );
    Ok(kappa_s_unchecked(d, alpha))
}

fn kappa_s_unchecked(d: f64, alpha: f64) -> f64 {
    // H(0) = 0: the support is the open interval |d| < 1/alpha.
    if alpha * d.abs() >= 1.0 {
        return 0.0;
    }
    let c = (alpha * d * std::f64::consts::PI / 2.0).cos();
    alpha * c * c
}

/// Adds `weight * kappa_n(n - center)` to every `out[n]`.
///
/// For integer `n`, `sin(pi (n - c)) = -(-1)^n sin(pi c)`, so one sine per call
/// suffices away from the centre.
fn accumulate_sinc(out: &mut [f64], center: f64, weight: f64) {
    let s = (std::f64::consts::PI * center).sin();
    let pi = std::f64::consts::PI;
    for (n, o) in out.iter_mut().enumerate() {
        let d = n as f64 - center;
        let v = if d.abs() < 1.0 {
            kappa_n(d)
        } else {
            let sign = if n % 2 == 0 { -1.0 } else { 1.0 };
            sign * s / (pi * d)
        };
        *o += weight * v;
    }
}

#[derive(Debug, Clone)]
pub struct ScalingTensor {
    /// Shape `(N*, M, S)`, row-major in `(n, m, j)`.
    pub values: Array3<f64>,
    pub grid: ScaleGrid,
    pub alpha: f64,
    pub quadrature_step: f64,
}

/// Number of midpoint nodes used for column `(m, j)`.
///
/// The node spacing is at most `step` scale bins and moves the resampled
/// position `s(j~) * m` by at most `step` frames, so wide columns at large `m`
/// are integrated as finely as narrow ones.
fn node_count(grid: &ScaleGrid, m: usize, j: usize, alpha: f64, step: f64) -> usize {
    let half = 1.0 / alpha;
    let lo = j as f64 - half;
    let hi = j as f64 + half;
    let travel = m as f64 * (grid.scale_at(hi) - grid.scale_at(lo));
    let by_bins = (2.0 * half / step).ceil();
    let by_frames = (travel / step).ceil();
    (by_bins.max(by_frames) as usize).max(2)
}

fn build_scale_matrix(grid: &ScaleGrid, j: usize, alpha: f64, step: f64) -> Array2<f64> {
    let n_star = grid.n_star;
    let m_len = grid.pattern_len;
    // Column-major scratch: one contiguous kernel column per m.
    let mut cols = vec![0.0; n_star * m_len];
    let half = 1.0 / alpha;
    for m in 0..m_len {
        let col = &mut cols[m * n_star..(m + 1) * n_star];
        let nodes = node_count(grid, m, j, alpha, step);
        let h = 2.0 * half / nodes as f64;
        for i in 0..nodes {
            let jt = j as f64 - half + (i as f64 + 0.5) * h;
            let w = kappa_s_unchecked(j as f64 - jt, alpha) * h;
            if w == 0.0 {
                continue;
            }
            accumulate_sinc(col, grid.scale_at(jt) * m as f64, w);
        }
    }
    Array2::from_shape_fn((n_star, m_len), |(n, m)| cols[m * n_star + n])
}

/// Builds the scaling tensor with the default memory budget.
///
/// `values[n, m, j]` is the midpoint-rule approximation of
/// `integral kappa_n(n - s(j~) m) kappa_s(j - j~) dj~` over the support of
/// `kappa_s`, where `s(j~)` is the continuous scale factor. The sinc is
/// evaluated exactly over the whole kernel extent.
pub fn build_scaling_tensor(
    grid: &ScaleGrid,
    alpha: f64,
    quadrature_step: f64,
) -> Result<ScalingTensor> {
    build_scaling_tensor_budgeted(grid, alpha, quadrature_step, DEFAULT_TENSOR_BUDGET)
}

pub fn build_scaling_tensor_budgeted(
    grid: &ScaleGrid,
    alpha: f64,
    quadrature_step: f64,
    budget: usize,
) -> Result<ScalingTensor> {
    ensure!(
        alpha.is_finite() && alpha > 0.0,
        Parameter,
        "alpha must be positive, got {alpha}"
    );
    ensure!(
        quadrature_step > 0.0 && quadrature_step <= 0.5,
        Parameter,
        "quadrature step must lie in (0, 0.5], got {quadrature_step}"
    );
    let elems = grid
        .n_star
        .checked_mul(grid.pattern_len)
        .and_then(|v| v.checked_mul(grid.n_scales));
    match elems {
        Some(e) if e <= budget => {}
        _ => {
            return Err(Error::Capacity(format!(
                "scaling tensor {}x{}x{} exceeds budget of {budget} elements",
                grid.n_star, grid.pattern_len, grid.n_scales
            )))
        }
    }

    let mats: Vec<Array2<f64>> = (0..grid.n_scales)
        .into_par_iter()
        .map(|j| build_scale_matrix(grid, j, alpha, quadrature_step))
        .collect();
    let mut values = Array3::zeros((grid.n_star, grid.pattern_len, grid.n_scales));
    for (j, mat) in mats.iter().enumerate() {
        values.index_axis_mut(Axis(2), j).assign(mat);
    }
    Ok(ScalingTensor {
        values,
        grid: grid.clone(),
        alpha,
        quadrature_step,
    })
}

impl ScalingTensor {
    pub fn n_star(&self) -> usize {
        self.grid.n_star
    }

    pub fn pattern_len(&self) -> usize {
        self.grid.pattern_len
    }

    pub fn n_scales(&self) -> usize {
        self.grid.n_scales
    }

    /// The `N* x M` resampling matrix of scale `j`.
    pub fn scale_matrix(&self, j: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(2), j)
    }

    pub fn column_sum(&self, m: usize, j: usize) -> f64 {
        (0..self.n_star()).map(|n| self.values[[n, m, j]]).sum()
    }

    /// Frame positions `(lo, hi)` swept by the centre `s(j~) * m` over the
    /// smoothing support of column `(m, j)`.
    pub fn smoothing_span(&self, m: usize, j: usize) -> (f64, f64) {
        let half = 1.0 / self.alpha;
        let m = m as f64;
        (
            self.grid.scale_at(j as f64 - half) * m,
            self.grid.scale_at(j as f64 + half) * m,
        )
    }

    /// Whether column `(m, j)` has its centre `s_j * m` at least the sinc
    /// margin away from both kernel ends and its smoothed support inside
    /// `[0, N* - 1]`.
    pub fn is_interior(&self, m: usize, j: usize) -> bool {
        let c = self.grid.scales[j] * m as f64;
        let last = self.n_star() as f64 - 1.0;
        let (lo, hi) = self.smoothing_span(m, j);
        c >= SINC_MARGIN && c <= last - SINC_MARGIN && lo >= 0.0 && hi <= last
    }

    /// Index of the largest-magnitude entry of column `(m, j)`.
    pub fn peak_index(&self, m: usize, j: usize) -> usize {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for n in 0..self.n_star() {
            let v = self.values[[n, m, j]].abs();
            if v > best_v {
                best_v = v;
                best = n;
            }
        }
        best
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = Writer::new(w, Kind::ScalingTensor)?;
        let g = &self.grid;
        w.f64(g.tau0)?;
        w.u32(g.per_octave as u32)?;
        w.u32(g.n_scales as u32)?;
        w.f64(g.frame_rate)?;
        w.u32(g.beats as u32)?;
        w.u32(g.pattern_len as u32)?;
        w.u32(g.n_star as u32)?;
        w.f64(self.alpha)?;
        w.f64(self.quadrature_step)?;
        let flat: Vec<f64> = self.values.iter().copied().collect();
        w.f64_slice(&flat)?;
        w.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<ScalingTensor> {
        let mut r = Reader::new(r, Kind::ScalingTensor)?;
        let tau0 = r.f64()?;
        let per_octave = r.u32()? as usize;
        let n_scales = r.u32()? as usize;
        let frame_rate = r.f64()?;
        let beats = r.u32()? as usize;
        let pattern_len = r.u32()? as usize;
        let n_star = r.u32()? as usize;
        let alpha = r.f64()?;
        let quadrature_step = r.f64()?;
        let grid = build_scale_grid_capped(
            tau0,
            per_octave,
            n_scales,
            frame_rate,
            beats,
            pattern_len,
            usize::MAX,
        )
        .map_err(|e| Error::Format(format!("stored grid is invalid: {e}")))?;
        if grid.n_star != n_star {
            return Err(Error::Format(format!(
                "stored kernel length {n_star} disagrees with grid ({})",
                grid.n_star
            )));
        }
        let count = n_star * pattern_len * n_scales;
        let flat = r.f64_vec(count)?;
        let values = Array3::from_shape_vec((n_star, pattern_len, n_scales), flat)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(ScalingTensor {
            values,
            grid,
            alpha,
            quadrature_step,
        })
    }
}

/// Process-wide cache of built tensors keyed by their construction
/// parameters; optionally persisted under `TIDB_CACHE_DIR`.
pub fn cached_scaling_tensor(
    grid: &ScaleGrid,
    alpha: f64,
    quadrature_step: f64,
) -> Result<Arc<ScalingTensor>> {
    use std::collections::HashMap;
    use std::sync::Mutex;
    static CACHE: Mutex<Option<HashMap<String, Arc<ScalingTensor>>>> = Mutex::new(None);

    let key = format!(
        "{:016x}-{}-{}-{:016x}-{}-{}-{:016x}-{:016x}",
        grid.tau0.to_bits(),
        grid.per_octave,
        grid.n_scales,
        grid.frame_rate.to_bits(),
        grid.beats,
        grid.pattern_len,
        alpha.to_bits(),
        quadrature_step.to_bits()
    );
    if let Some(t) = CACHE.lock().unwrap().get_or_insert_with(HashMap::new).get(&key) {
        return Ok(t.clone());
    }
    let disk = std::env::var_os("TIDB_CACHE_DIR")
        .map(|d| std::path::PathBuf::from(d).join(format!("psi-{key}.tidb")));
    let mut tensor = None;
    if let Some(path) = &disk {
        if let Ok(f) = std::fs::File::open(path) {
            tensor = ScalingTensor::read_from(std::io::BufReader::new(f)).ok();
        }
    }
    let tensor = match tensor {
        Some(t) => t,
        None => {
            let t = build_scaling_tensor(grid, alpha, quadrature_step)?;
            if let Some(path) = &disk {
                if let Some(parent) = path.parent() {
                    let _ = std::fs::create_dir_all(parent);
                }
                if let Ok(f) = std::fs::File::create(path) {
                    let _ = t.write_to(std::io::BufWriter::new(f));
                }
            }
            t
        }
    };
    let tensor = Arc::new(tensor);
    CACHE
        .lock()
        .unwrap()
        .get_or_insert_with(HashMap::new)
        .insert(key, tensor.clone());
    Ok(tensor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table2() -> ScaleGrid {
        build_scale_grid(0.25, 8, 25, 50.0, 4, 64).unwrap()
    }

    #[test]
    fn table2_grid_values() {
        let g = table2();
        assert!((g.taus[0] - 0.25).abs() < 1e-12);
        assert!((g.taus[8] - 0.5).abs() < 1e-12);
        assert!((g.taus[24] - 2.0).abs() < 1e-12);
        assert!((g.scales[0] - 0.78125).abs() < 1e-12);
        assert!((g.scales[24] - 6.25).abs() < 1e-12);
        assert_eq!(g.n_star, 400);
        assert!(g.scales.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn identity_grid() {
        let g = build_scale_grid(1.0, 1, 1, 1.0, 1, 1).unwrap();
        assert_eq!(g.taus, vec![1.0]);
        assert_eq!(g.scales, vec![1.0]);
        assert_eq!(g.n_star, 1);
    }

    #[test]
    fn grid_errors() {
        assert!(matches!(
            build_scale_grid(0.0, 8, 25, 50.0, 4, 64),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            build_scale_grid(0.25, 8, 0, 50.0, 4, 64),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            build_scale_grid(0.25, 8, 25, -1.0, 4, 64),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            build_scale_grid(0.25, 1, 25, 50.0, 4, 64),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn kernel_values() {
        assert_eq!(kappa_n(0.0), 1.0);
        assert!(kappa_n(2.0).abs() < 1e-15);
        assert!((kappa_n(0.5) - 2.0 / std::f64::consts::PI).abs() < 1e-12);
        assert!((kappa_n(1e-7) - 1.0).abs() < 1e-12);
        assert_eq!(kappa_s(0.0, 1.0).unwrap(), 1.0);
        assert_eq!(kappa_s(1.2, 1.0).unwrap(), 0.0);
        assert_eq!(kappa_s(1.0, 1.0).unwrap(), 0.0);
        assert!((kappa_s(0.5, 1.0).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(kappa_s(0.0, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn kappa_s_has_unit_mass() {
        for &alpha in &[0.5, 1.0, 3.0, 100.0] {
            let n = 20_000;
            let h = 2.0 / alpha / n as f64;
            let mass: f64 = (0..n)
                .map(|i| kappa_s(-1.0 / alpha + (i as f64 + 0.5) * h, alpha).unwrap() * h)
                .sum();
            assert!((mass - 1.0).abs() < 1e-9, "alpha {alpha}: {mass}");
        }
    }

    #[test]
    fn sinc_recurrence_matches_direct() {
        let mut fast = vec![0.0; 50];
        accumulate_sinc(&mut fast, 17.3, 1.0);
        for (n, v) in fast.iter().enumerate() {
            assert!((v - kappa_n(n as f64 - 17.3)).abs() < 1e-12);
        }
    }

    #[test]
    fn first_column_is_an_impulse() {
        let g = build_scale_grid(0.32, 4, 3, 50.0, 1, 16).unwrap();
        let t = build_scaling_tensor(&g, 1.0, 0.05).unwrap();
        for j in 0..3 {
            assert_eq!(t.peak_index(0, j), 0);
            assert!((t.values[[0, 0, j]] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_parameter_errors() {
        let g = build_scale_grid(0.32, 4, 3, 50.0, 1, 16).unwrap();
        assert!(build_scaling_tensor(&g, 0.0, 0.05).is_err());
        assert!(build_scaling_tensor(&g, 1.0, 0.0).is_err());
        assert!(build_scaling_tensor(&g, 1.0, 0.6).is_err());
        assert!(matches!(
            build_scaling_tensor_budgeted(&g, 1.0, 0.05, 100),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn large_alpha_degenerates_to_plain_sinc() {
        let g = build_scale_grid(0.32, 4, 3, 50.0, 1, 16).unwrap();
        let t = build_scaling_tensor(&g, 100.0, 0.05).unwrap();
        let mut worst: f64 = 0.0;
        for ((n, m, j), v) in t.values.indexed_iter() {
            let exact = kappa_n(n as f64 - g.scales[j] * m as f64);
            worst = worst.max((v - exact).abs());
        }
        assert!(worst < 1e-3, "max deviation {worst}");
    }

    #[test]
    fn file_round_trip() {
        let g = build_scale_grid(0.32, 4, 3, 50.0, 1, 16).unwrap();
        let t = build_scaling_tensor(&g, 1.0, 0.05).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TIDB");
        let back = ScalingTensor::read_from(&buf[..]).unwrap();
        assert_eq!(back.grid, t.grid);
        assert_eq!(back.alpha.to_bits(), t.alpha.to_bits());
        assert!(back
            .values
            .iter()
            .zip(t.values.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(ScalingTensor::read_from(&buf[..buf.len() - 3]).is_err());
    }
}
