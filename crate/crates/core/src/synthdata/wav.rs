use std::path::Path;

use ndarray::Array2;
use realfft::RealFftPlanner;
use rubato::{FftFixedIn, Resampler};

use crate::error::{ensure, Error, Result};
use crate::nnkernels::FeatureMap;

#[derive(Debug, Clone, PartialEq)]
pub struct LogMelConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub frame_rate: u32,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        LogMelConfig {
            sample_rate: 22_050,
            window: 2048,
            frame_rate: 50,
            n_mels: 64,
            f_min: 30.0,
            f_max: 11_025.0,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl LogMelConfig {
    pub fn hop(&self) -> usize {
        (self.sample_rate / self.frame_rate) as usize
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.frame_rate > 0 && self.sample_rate % self.frame_rate == 0,
            Parameter,
            "sample rate {} is not a multiple of frame rate {}",
            self.sample_rate,
            self.frame_rate
        );
        ensure!(self.window >= 2 && self.n_mels >= 1, Parameter, "empty STFT or filterbank");
        ensure!(
            0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0,
            Parameter,
            "mel range {}..{} Hz invalid",
            self.f_min,
            self.f_max
        );
        Ok(())
    }

    /// `n_mels + 2` HTK-mel-spaced edge frequencies; band `b` spans edges
    /// `b..=b+2` and peaks at edge `b+1`.
    pub fn band_edges_hz(&self) -> Vec<f64> {
        let (lo, hi) = (hz_to_mel(self.f_min), hz_to_mel(self.f_max));
        (0..self.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (self.n_mels + 1) as f64))
            .collect()
    }

    /// Triangular filters, `(n_mels, window / 2 + 1)`, unit peak.
    pub fn filterbank(&self) -> Array2<f64> {
        let bins = self.window / 2 + 1;
        let edges = self.band_edges_hz();
        let df = self.sample_rate as f64 / self.window as f64;
        Array2::from_shape_fn((self.n_mels, bins), |(b, k)| {
            let f = k as f64 * df;
            let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
            if f <= l || f >= r {
                0.0
            } else if f <= c {
                (f - l) / (c - l)
            } else {
                (r - f) / (r - c)
            }
        })
    }
}

fn read_mono(path: &Path) -> Result<(Vec<f64>, u32)> {
    let fmt = |e: hound::Error| match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => Error::Io(io),
        other => Error::Format(format!("{}: {other}", path.display())),
    };
    let mut reader = hound::WavReader::open(path).map_err(fmt)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    ensure!(channels >= 1, Format, "{}: no channels", path.display());
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(fmt)?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(fmt)?
        }
    };
    let mono = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok((mono, spec.sample_rate))
}

fn resample(x: &[f64], from: u32, to: u32) -> Result<Vec<f64>> {
    if from == to || x.is_empty() {
        return Ok(x.to_vec());
    }
    let err = |e: &dyn std::fmt::Display| Error::Input(format!("resampling failed: {e}"));
    let mut rs = FftFixedIn::<f64>::new(from as usize, to as usize, 1024, 2, 1).map_err(|e| err(&e))?;
    let delay = rs.output_delay();
    let expected = (x.len() as f64 * f64::from(to) / f64::from(from)).round() as usize;
    let mut out = Vec::with_capacity(expected + delay + 4096);
    let mut pos = 0;
    while out.len() < expected + delay {
        let need = rs.input_frames_next();
        let chunk = if pos + need <= x.len() {
            let r = rs.process(&[&x[pos..pos + need]], None);
            pos += need;
            r
        } else if pos < x.len() {
            let r = rs.process_partial(Some(&[&x[pos..]]), None);
            pos = x.len();
            r
        } else {
            rs.process_partial(None::<&[&[f64]]>, None)
        }
        .map_err(|e| err(&e))?;
        out.extend_from_slice(&chunk[0]);
    }
    out.drain(..delay);
    out.truncate(expected);
    Ok(out)
}

/// Log-mel features of a PCM WAV file: downmix, resample to
/// `cfg.sample_rate`, centred Hann STFT, mel filterbank, `log(1 + x)`.
pub fn load_wav_logmel(path: &Path, cfg: &LogMelConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    let (mono, sr) = read_mono(path)?;
    let x = resample(&mono, sr, cfg.sample_rate)?;
    logmel(&x, cfg)
}

pub(crate) fn logmel(x: &[f64], cfg: &LogMelConfig) -> Result<FeatureMap> {
    ensure!(!x.is_empty(), Input, "audio has no samples");
    let hop = cfg.hop();
    let n_frames = x.len().div_ceil(hop);
    let win = cfg.window;
    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect();
    let fb = cfg.filterbank();
    let fft = RealFftPlanner::<f64>::new().plan_fft_forward(win);
    let mut frame = fft.make_input_vec();
    let mut spec = fft.make_output_vec();
    let mut mag = ndarray::Array1::<f64>::zeros(win / 2 + 1);
    let mut out = Array2::<f64>::zeros((n_frames, cfg.n_mels));
    for k in 0..n_frames {
        let start = (k * hop) as isize - (win / 2) as isize;
        for (i, v) in frame.iter_mut().enumerate() {
            let t = start + i as isize;
            *v = if t >= 0 && (t as usize) < x.len() {
                x[t as usize] * hann[i]
            } else {
                0.0
            };
        }
        fft.process(&mut frame, &mut spec)
            .map_err(|e| Error::Input(e.to_string()))?;
        for (m, c) in mag.iter_mut().zip(&spec) {
            *m = c.norm();
        }
        let mel = fb.dot(&mag);
        for (o, v) in out.row_mut(k).iter_mut().zip(mel.iter()) {
            *o = v.ln_1p();
        }
    }
    Ok(FeatureMap::from_frames(out, f64::from(cfg.frame_rate)))
}
