//! Run configuration: every tunable of the toolkit in one tree, read from a
//! line-oriented `key = value` file.
//!
//! Keys are dotted (`train.learning_rate`). A `[section]` line prefixes the
//! keys that follow it, `#` starts a comment. Unknown keys are errors.
//!
//! ```text
//! seed = 7
//! [network]
//! architecture = inv
//! ti_stack = 16,16,1
//! [train]
//! max_epochs = 30
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::decoder::DecoderConfig;
use crate::error::{ensure, Error, Result};
use crate::evalkit::SweepConfig;
use crate::model::{Architecture, ConvSpec, DilatedSpec, Hyperparams, NetworkConfig};
use crate::synthdata::ExperimentConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Base seed. The data, initialisation, training and bootstrap seeds are
    /// all derived from it.
    pub seed: u64,
    /// Architecture and scale grid. `network.init_seed` is ignored in favour
    /// of [`RunConfig::seed`].
    pub network: NetworkConfig,
    pub train: Hyperparams,
    pub decoder: DecoderConfig,
    pub data: ExperimentConfig,
    /// Write rendered feature files next to the annotations in `gen-data`.
    pub store_features: bool,
    pub eval: SweepConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Scaling-tensor cache; empty means the process default.
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 7;
        let mut cfg = RunConfig {
            seed,
            network: NetworkConfig::table2(Architecture::Inv),
            train: Hyperparams::default(),
            decoder: DecoderConfig::default(),
            data: ExperimentConfig::default(),
            store_features: false,
            eval: SweepConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            cache_dir: None,
        };
        cfg.propagate_seed();
        cfg
    }
}

fn list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key} = {value:?}: expected {what}"))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, what))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim(), what)).collect()
}

/// `-13..13` or a comma list.
fn parse_scales(key: &str, value: &str) -> Result<Vec<i32>> {
    if let Some((a, b)) = value.split_once("..") {
        let a: i32 = parse(key, a.trim(), "a scale range lo..hi")?;
        let b: i32 = parse(key, b.trim(), "a scale range lo..hi")?;
        ensure!(a <= b, Config, "{key}: empty range {value}");
        return Ok((a..=b).collect());
    }
    parse_list(key, value, "scale indices")
}

/// `32x3` = 32 channels, kernel 3.
fn parse_conv(key: &str, value: &str) -> Result<Vec<ConvSpec>> {
    let what = "layers like 32x3,32x3";
    value
        .split(',')
        .map(|v| {
            let (c, k) = v.trim().split_once('x').ok_or_else(|| bad(key, value, what))?;
            Ok(ConvSpec {
                channels: parse(key, c, what)?,
                kernel: parse(key, k, what)?,
            })
        })
        .collect()
}

/// `64x7d2` = 64 channels, kernel 7, dilation 2.
fn parse_dilated(key: &str, value: &str) -> Result<Vec<DilatedSpec>> {
    let what = "layers like 64x7d2,1x7d16";
    value
        .split(',')
        .map(|v| {
            let (c, rest) = v.trim().split_once('x').ok_or_else(|| bad(key, value, what))?;
            let (k, d) = rest.split_once('d').ok_or_else(|| bad(key, value, what))?;
            Ok(DilatedSpec {
                channels: parse(key, c, what)?,
                kernel: parse(key, k, what)?,
                dilation: parse(key, d, what)?,
            })
        })
        .collect()
}

impl RunConfig {
    /// Reads a config file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated section", no + 1)))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            self.set(&key, v.trim())?;
        }
        self.propagate_seed();
        Ok(())
    }

    /// Applies `key=value` overrides, e.g. from the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.propagate_seed();
        Ok(())
    }

    fn propagate_seed(&mut self) {
        self.network.init_seed = self.seed;
        self.train.seed = self.seed;
        self.data.seed = self.seed;
        self.eval.seed = self.seed;
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let f = |what| parse::<f64>(key, v, what);
        let n = |what| parse::<usize>(key, v, what);
        let real = "a number";
        let count = "a non-negative integer";
        match key {
            "seed" => self.seed = parse(key, v, count)?,

            "network.architecture" => {
                self.network.architecture =
                    Architecture::parse(v).ok_or_else(|| bad(key, v, "inv or noinv"))?
            }
            "network.input_channels" => self.network.input_channels = n(count)?,
            "network.frontend" => self.network.frontend = parse_conv(key, v)?,
            "network.ti_stack" => self.network.ti_stack = parse_list(key, v, "channel counts")?,
            "network.dilated_stack" => self.network.dilated_stack = parse_dilated(key, v)?,
            "network.biases" => self.network.biases = parse_bool(key, v)?,
            "network.alpha" => self.network.alpha = f(real)?,
            "network.quadrature_step" => self.network.quadrature_step = f(real)?,

            "grid.tau0" => self.network.tau0 = f(real)?,
            "grid.per_octave" => self.network.per_octave = n(count)?,
            "grid.n_scales" => self.network.n_scales = n(count)?,
            "grid.frame_rate" => self.network.frame_rate = f(real)?,
            "grid.beats" => self.network.beats = n(count)?,
            "grid.pattern_len" => self.network.pattern_len = n(count)?,

            "train.learning_rate" => self.train.learning_rate = f(real)?,
            "train.rho" => self.train.rho = f(real)?,
            "train.epsilon" => self.train.epsilon = f(real)?,
            "train.batch_size" => self.train.batch_size = n(count)?,
            "train.excerpt_seconds" => self.train.excerpt_seconds = f(real)?,
            "train.plateau_patience" => self.train.plateau_patience = n(count)?,
            "train.lr_factor" => self.train.lr_factor = f(real)?,
            "train.early_stop_patience" => self.train.early_stop_patience = n(count)?,
            "train.max_epochs" => self.train.max_epochs = n(count)?,
            "train.non_downbeat_weight" => self.train.non_downbeat_weight = f(real)?,

            "decoder.tempo_subdivision" => self.decoder.tempo_subdivision = n(count)?,
            "decoder.beats_per_bar" => self.decoder.beats_per_bar = n(count)?,
            "decoder.lambda" => self.decoder.lambda = f(real)?,

            "data.n_patterns" => self.data.n_patterns = n(count)?,
            "data.include_canonical" => self.data.include_canonical = parse_bool(key, v)?,
            "data.train_profiles" => self.data.train_profiles = parse_list(key, v, "profile ids")?,
            "data.test_profiles" => self.data.test_profiles = parse_list(key, v, "profile ids")?,
            "data.test_scales" => self.data.test_scales = parse_scales(key, v)?,
            "data.augment" => self.data.augment = parse_bool(key, v)?,
            "data.val_fraction" => self.data.val_fraction = f(real)?,
            "data.store_features" => self.store_features = parse_bool(key, v)?,
            "data.style.kick" => self.data.style_mix.kick = f(real)?,
            "data.style.snare" => self.data.style_mix.snare = f(real)?,
            "data.style.hihat" => self.data.style_mix.hihat = f(real)?,
            "data.style.tom" => self.data.style_mix.tom = f(real)?,
            "data.style.crash" => self.data.style_mix.crash = f(real)?,
            "data.style.tempo_min" => self.data.style_mix.tempo_range.0 = f(real)?,
            "data.style.tempo_max" => self.data.style_mix.tempo_range.1 = f(real)?,

            "eval.scale_indices" => self.eval.scale_indices = parse_scales(key, v)?,
            "eval.tolerance" => self.eval.tolerance = f(real)?,
            "eval.exclude_warmup" => self.eval.exclude_warmup = parse_bool(key, v)?,
            "eval.bootstrap_iterations" => self.eval.bootstrap_iterations = n(count)?,
            "eval.level" => self.eval.level = f(real)?,
            "eval.bpm_bucket_width" => self.eval.bpm_bucket_width = f(real)?,
            "eval.batch" => self.eval.batch = n(count)?,

            "paths.data_dir" => self.data_dir = PathBuf::from(v),
            "paths.out_dir" => self.out_dir = PathBuf::from(v),
            "paths.cache_dir" => self.cache_dir = (!v.is_empty()).then(|| PathBuf::from(v)),

            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// The whole tree in the file format; `parse(to_text())` reproduces it.
    pub fn to_text(&self) -> String {
        let nw = &self.network;
        let tr = &self.train;
        let d = &self.data;
        let e = &self.eval;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            if k.starts_with('[') {
                let _ = writeln!(s, "\n{k}");
            } else {
                let _ = writeln!(s, "{k} = {v}");
            }
        };
        kv("seed", self.seed.to_string());
        kv("[network]", String::new());
        kv("architecture", nw.architecture.name().into());
        kv("input_channels", nw.input_channels.to_string());
        kv(
            "frontend",
            nw.frontend
                .iter()
                .map(|c| format!("{}x{}", c.channels, c.kernel))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("ti_stack", list(&nw.ti_stack));
        kv(
            "dilated_stack",
            nw.dilated_stack
                .iter()
                .map(|c| format!("{}x{}d{}", c.channels, c.kernel, c.dilation))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("biases", nw.biases.to_string());
        kv("alpha", format!("{:?}", nw.alpha));
        kv("quadrature_step", format!("{:?}", nw.quadrature_step));
        kv("[grid]", String::new());
        kv("tau0", format!("{:?}", nw.tau0));
        kv("per_octave", nw.per_octave.to_string());
        kv("n_scales", nw.n_scales.to_string());
        kv("frame_rate", format!("{:?}", nw.frame_rate));
        kv("beats", nw.beats.to_string());
        kv("pattern_len", nw.pattern_len.to_string());
        kv("[train]", String::new());
        kv("learning_rate", format!("{:?}", tr.learning_rate));
        kv("rho", format!("{:?}", tr.rho));
        kv("epsilon", format!("{:?}", tr.epsilon));
        kv("batch_size", tr.batch_size.to_string());
        kv("excerpt_seconds", format!("{:?}", tr.excerpt_seconds));
        kv("plateau_patience", tr.plateau_patience.to_string());
        kv("lr_factor", format!("{:?}", tr.lr_factor));
        kv("early_stop_patience", tr.early_stop_patience.to_string());
        kv("max_epochs", tr.max_epochs.to_string());
        kv("non_downbeat_weight", format!("{:?}", tr.non_downbeat_weight));
        kv("[decoder]", String::new());
        kv("tempo_subdivision", self.decoder.tempo_subdivision.to_string());
        kv("beats_per_bar", self.decoder.beats_per_bar.to_string());
        kv("lambda", format!("{:?}", self.decoder.lambda));
        kv("[data]", String::new());
        kv("n_patterns", d.n_patterns.to_string());
        kv("include_canonical", d.include_canonical.to_string());
        kv("train_profiles", list(&d.train_profiles));
        kv("test_profiles", list(&d.test_profiles));
        kv("test_scales", list(&d.test_scales));
        kv("augment", d.augment.to_string());
        kv("val_fraction", format!("{:?}", d.val_fraction));
        kv("store_features", self.store_features.to_string());
        kv("style.kick", format!("{:?}", d.style_mix.kick));
        kv("style.snare", format!("{:?}", d.style_mix.snare));
        kv("style.hihat", format!("{:?}", d.style_mix.hihat));
        kv("style.tom", format!("{:?}", d.style_mix.tom));
        kv("style.crash", format!("{:?}", d.style_mix.crash));
        kv("style.tempo_min", format!("{:?}", d.style_mix.tempo_range.0));
        kv("style.tempo_max", format!("{:?}", d.style_mix.tempo_range.1));
        kv("[eval]", String::new());
        kv("scale_indices", list(&e.scale_indices));
        kv("tolerance", format!("{:?}", e.tolerance));
        kv("exclude_warmup", e.exclude_warmup.to_string());
        kv("bootstrap_iterations", e.bootstrap_iterations.to_string());
        kv("level", format!("{:?}", e.level));
        kv("bpm_bucket_width", format!("{:?}", e.bpm_bucket_width));
        kv("batch", e.batch.to_string());
        kv("[paths]", String::new());
        kv("data_dir", self.data_dir.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv(
            "cache_dir",
            self.cache_dir
                .as_ref()
                .map_or(String::new(), |p| p.display().to_string()),
        );
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        ensure!(self.decoder.tempo_subdivision >= 1, Config, "decoder.tempo_subdivision must be >= 1");
        ensure!(self.decoder.beats_per_bar >= 1, Config, "decoder.beats_per_bar must be >= 1");
        ensure!(
            (0.0..=0.5).contains(&self.decoder.lambda),
            Config,
            "decoder.lambda must be in [0, 0.5]"
        );
        ensure!(self.eval.tolerance > 0.0, Config, "eval.tolerance must be positive");
        ensure!(
            self.eval.level > 0.0 && self.eval.level < 1.0,
            Config,
            "eval.level must be in (0, 1)"
        );
        ensure!(self.eval.bpm_bucket_width > 0.0, Config, "eval.bpm_bucket_width must be positive");
        Ok(())
    }
}
