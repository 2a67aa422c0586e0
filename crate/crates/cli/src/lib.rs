//! Subcommands of the `tempoinv` binary. Each `cmd_*` function is usable on
//! its own; [`run`] parses a command line and maps errors to exit codes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use tempoinv::decoder::{read_downbeat_file, write_downbeat_file};
use tempoinv::evalkit::{f_measure, run_sweep, ActivationSource, EvalResult, SweepTrack};
use tempoinv::model::{build_network, train, Architecture, EpochReport, LayerKind, TrainItem};
use tempoinv::nnkernels::{materialise_kernels, scale_matrices};
use tempoinv::synthdata::{
    build_experiment_datasets, load_wav_logmel, read_annotation_file, read_feature_file,
    write_annotation_file, write_feature_file, write_manifest, write_pattern_file, LoadedManifest,
    LogMelConfig, Manifest, ManifestEntry, Split, MANIFEST_SCHEMA_VERSION,
};
use tempoinv::{Checkpoint, Decoder, Error, FeatureMap, Result, RunConfig, SweepTable};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::Capacity(_) => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGED,
        Error::Shape(_) | Error::Input(_) | Error::Format(_) | Error::Coverage(_) | Error::Io(_) => EXIT_DATA,
    }
}

#[derive(Debug, Parser)]
#[command(name = "tempoinv", version, about = "Tempo-invariant downbeat tracking")]
#[command(after_help = "Any config key can also be given as --key=value, e.g. --train.max_epochs=20.")]
struct Cli {
    /// Config file (key = value lines, [section] headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic experiment and write its manifest.
    GenData {
        /// Output directory (default: paths.data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train on scales -1, 0, 1 (the noinv_aug data).
        #[arg(long)]
        aug: bool,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a manifest's train and validation splits.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// inv, noinv or noinv_aug.
        #[arg(long, default_value = "inv")]
        arch: String,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Downbeat times of a WAV or feature file.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        input: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score downbeat files against annotation files.
    Eval {
        /// Downbeat file, or a directory of them.
        #[arg(long)]
        estimates: PathBuf,
        /// Annotation file, or a directory of them (matched by file stem).
        #[arg(long)]
        annotations: PathBuf,
        /// Per-track CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate checkpoints on a manifest's test split across scale indices.
    Sweep {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        fig4a: Option<PathBuf>,
        #[arg(long)]
        fig4b: Option<PathBuf>,
    },
    /// Dump a scale-invariant layer's pattern kernel and its scaled kernels.
    InspectKernel {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long)]
        out: PathBuf,
        /// Scale indices of h to emit; all when absent.
        #[arg(long, value_delimiter = ',')]
        scales: Vec<usize>,
    },
}

fn looks_like_config_key(arg: &str) -> Option<&str> {
    let body = arg.strip_prefix("--")?;
    let (key, _) = body.split_once('=')?;
    (key.contains('.') || key == "seed").then_some(body)
}

/// Parses and runs a command line (without the program name), returning the
/// process exit code.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let mut overrides = Vec::new();
    let mut rest = vec!["tempoinv".to_string()];
    for a in args {
        match looks_like_config_key(&a) {
            Some(body) => overrides.push(body.to_string()),
            None => rest.push(a),
        }
    }
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    overrides.splice(0..0, cli.set.iter().cloned());
    match dispatch(&cli, &overrides) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Defaults (or `base`), then the config file, then overrides.
fn layered(base: Option<&RunConfig>, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = base.cloned().unwrap_or_default();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli, overrides: &[String]) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        // only fails when a pool already exists, as in repeated in-process runs
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let file = cli.config.as_deref();
    let base = layered(None, file, overrides)?;
    if let Some(dir) = &base.cache_dir {
        if std::env::var_os("TIDB_CACHE_DIR").is_none() {
            std::env::set_var("TIDB_CACHE_DIR", dir);
        }
    }
    match &cli.command {
        Command::GenData { out, aug, force } => {
            let mut cfg = base;
            cfg.data.augment |= *aug;
            let out = out.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let manifest = cmd_gen_data(&cfg, &out, *force)?;
            println!("{}", manifest.display());
        }
        Command::Train {
            manifest,
            arch,
            out,
            resume,
        } => {
            cmd_train(&base, manifest, arch, out, resume.as_deref(), |r| {
                eprintln!(
                    "epoch {:>3}  train {:.5}  val {:.5}  lr {:.2e}",
                    r.epoch, r.train_loss, r.val_loss, r.learning_rate
                )
            })?;
        }
        Command::Track { checkpoint, input, out } => {
            let ck = Checkpoint::load(checkpoint)?;
            let cfg = layered(Some(&ck.config), file, overrides)?;
            let times = cmd_track(&ck, &cfg, input)?;
            match out {
                Some(p) => write_downbeat_file(p, &times)?,
                None => {
                    let mut so = std::io::stdout().lock();
                    for t in &times {
                        writeln!(so, "{t:.3}")?;
                    }
                }
            }
        }
        Command::Eval {
            estimates,
            annotations,
            out,
        } => {
            let rows = cmd_eval(estimates, annotations, base.eval.tolerance, out.as_deref())?;
            let n = rows.len() as f64;
            let mean = |f: fn(&EvalResult) -> f64| rows.iter().map(|(_, r)| f(r)).sum::<f64>() / n;
            println!(
                "tracks {}  precision {:.4}  recall {:.4}  f1 {:.4}",
                rows.len(),
                mean(|r| r.precision),
                mean(|r| r.recall),
                mean(|r| r.f1)
            );
        }
        Command::Sweep {
            checkpoints,
            manifest,
            out,
            fig4a,
            fig4b,
        } => {
            let cks = checkpoints
                .iter()
                .map(|p| Checkpoint::load(p))
                .collect::<Result<Vec<_>>>()?;
            let cfg = layered(Some(&cks[0].config), file, overrides)?;
            let table = cmd_sweep(&cks, &cfg, manifest)?;
            table.write_csv(out)?;
            if let Some(p) = fig4a {
                table.write_fig4a(p)?;
            }
            if let Some(p) = fig4b {
                table.write_fig4b(p)?;
            }
            for r in table.rows.iter().filter(|r| r.scale_index.is_some()) {
                println!(
                    "{:<10} {:>+3}  f1 {:.3}  [{:.3}, {:.3}]  n {}",
                    r.model,
                    r.scale_index.unwrap(),
                    r.mean_f1,
                    r.ci_lo,
                    r.ci_hi,
                    r.n_tracks
                );
            }
        }
        Command::InspectKernel {
            checkpoint,
            layer,
            out,
            scales,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            cmd_inspect_kernel(&ck, layer, scales, out)?;
        }
    }
    Ok(())
}

fn dir_is_nonempty(dir: &Path) -> Result<bool> {
    Ok(match fs::read_dir(dir) {
        Ok(mut it) => it.next().is_some(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => false,
        Err(e) => return Err(e.into()),
    })
}

/// Writes pattern files, annotations, optionally features, and
/// `manifest.json` under `out`. Returns the manifest path.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<PathBuf> {
    if dir_is_nonempty(out)? && !force {
        return Err(Error::Config(format!(
            "{} exists and is not empty (use --force)",
            out.display()
        )));
    }
    let d = build_experiment_datasets(&cfg.data)?;
    for sub in ["patterns", "annotations", "features"] {
        if sub != "features" || cfg.store_features {
            fs::create_dir_all(out.join(sub))?;
        }
    }
    let mut patterns = Vec::with_capacity(d.patterns.len());
    for p in &d.patterns {
        let rel = PathBuf::from("patterns").join(format!("{}.json", p.id));
        write_pattern_file(&out.join(&rel), p)?;
        patterns.push((p.id.clone(), rel));
    }
    let specs: Vec<_> = d.train.iter().chain(&d.val).chain(&d.test).collect();
    let entries = specs
        .par_iter()
        .map(|s| {
            let (features, ann) = s.render(&d.patterns)?;
            let annotation_path = PathBuf::from("annotations").join(format!("{}.txt", s.id));
            write_annotation_file(&out.join(&annotation_path), &ann)?;
            let feature_path = if cfg.store_features {
                let rel = PathBuf::from("features").join(format!("{}.tidb", s.id));
                write_feature_file(&out.join(&rel), &features)?;
                Some(rel)
            } else {
                None
            };
            Ok(ManifestEntry {
                track_id: s.id.clone(),
                pattern_id: s.pattern_id.clone(),
                scale_index: s.scale_index,
                profile_id: s.profile_id,
                split: s.split,
                seed: s.seed,
                annotation_path,
                feature_path,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = out.join("manifest.json");
    write_manifest(
        &path,
        &Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            patterns,
            entries,
        },
    )?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    Ok(path)
}

fn load_split(m: &LoadedManifest, split: Split) -> Result<Vec<(String, i32, FeatureMap, tempoinv::TrackAnnotation)>> {
    m.split(split)
        .par_iter()
        .map(|&i| {
            let (f, a) = m.load(i)?;
            Ok((m.tracks[i].id.clone(), m.tracks[i].scale_index, f, a))
        })
        .collect()
}

/// Trains `arch` on the manifest and writes the checkpoint to `out` after
/// every epoch, with the optimiser state so the run can be resumed. A
/// `<out>.metrics.csv` log accompanies it.
pub fn cmd_train(
    cfg: &RunConfig,
    manifest: &Path,
    arch: &str,
    out: &Path,
    resume: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Checkpoint> {
    let architecture =
        Architecture::parse(arch).ok_or_else(|| Error::Config(format!("unknown architecture {arch:?}")))?;
    let m = LoadedManifest::open(manifest)?;
    let train_scales = m.manifest.scale_indices(Split::Train);
    if arch == "noinv_aug" && train_scales == vec![0] {
        return Err(Error::Config(
            "noinv_aug needs training data on scales -1, 0, 1 (gen-data --aug)".into(),
        ));
    }
    let mut cfg = cfg.clone();
    let (mut net, state) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let state = ck
                .state
                .clone()
                .ok_or_else(|| Error::Input(format!("{} holds no optimiser state", p.display())))?;
            if ck.model != arch {
                return Err(Error::Config(format!(
                    "{} is a {} checkpoint, not {arch}",
                    p.display(),
                    ck.model
                )));
            }
            cfg.network = ck.config.network.clone();
            (ck.network()?, Some(state))
        }
        None => {
            cfg.network.architecture = architecture;
            (build_network(&cfg.network)?, None)
        }
    };
    let items = |split| -> Result<Vec<TrainItem>> {
        load_split(&m, split)?
            .into_iter()
            .map(|(_, _, f, a)| TrainItem::new(&net, f, &a))
            .collect()
    };
    let train_set = items(Split::Train)?;
    let val_set = items(Split::Val)?;
    let val_set = if val_set.is_empty() {
        log::warn!("manifest has no validation tracks; validating on the training set");
        train_set.clone()
    } else {
        val_set
    };
    let log_path = PathBuf::from(format!("{}.metrics.csv", out.display()));
    let mut log_text = String::from("epoch,train_loss,val_loss,learning_rate\n");
    if let Some(s) = &state {
        for r in &s.history {
            log_text.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.learning_rate));
        }
    }
    let mut template = net.clone();
    let final_state = train(&mut net, &train_set, &val_set, &cfg.train, state, |r, s| {
        log_text.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.learning_rate));
        let _ = fs::write(&log_path, &log_text);
        if template.set_param_vectors(&s.best_params).is_ok() {
            let ck = Checkpoint::from_network(arch, &cfg, &template, Some(s));
            if let Err(e) = ck.save(out) {
                log::warn!("could not write {}: {e}", out.display());
            }
        }
        on_epoch(r);
    })?;
    fs::write(&log_path, &log_text)?;
    let ck = Checkpoint::from_network(arch, &cfg, &net, Some(&final_state));
    ck.save(out)?;
    Ok(ck)
}

/// Features of a WAV file (by extension) or a TIDB feature file.
pub fn load_input(path: &Path) -> Result<FeatureMap> {
    if !path.exists() {
        return Err(Error::Input(format!("{} does not exist", path.display())));
    }
    let is_wav = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        load_wav_logmel(path, &LogMelConfig::default())
    } else {
        read_feature_file(path)
    }
}

pub fn cmd_track(ck: &Checkpoint, cfg: &RunConfig, input: &Path) -> Result<Vec<f64>> {
    let net = ck.network()?;
    let features = load_input(input)?;
    let o = net.predict(&features)?;
    let decoder = Decoder::new(net.grid(), &cfg.decoder)?;
    decoder.decode(&o)
}

fn stem_map(path: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if path.is_dir() {
        for e in fs::read_dir(path)? {
            let p = e?.path();
            if p.is_file() {
                if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                    out.insert(s.to_string(), p.clone());
                }
            }
        }
    } else if path.is_file() {
        out.insert(String::new(), path.to_path_buf());
    } else {
        return Err(Error::Input(format!("{} does not exist", path.display())));
    }
    Ok(out)
}

/// Scores downbeat files against annotations. Directories are paired by
/// file stem; a stem present on one side only is an error.
pub fn cmd_eval(estimates: &Path, annotations: &Path, tol: f64, out: Option<&Path>) -> Result<Vec<(String, EvalResult)>> {
    let est = stem_map(estimates)?;
    let ann = stem_map(annotations)?;
    let pairs: Vec<(String, PathBuf, PathBuf)> = if est.len() == 1 && ann.len() == 1 && (est.contains_key("") || ann.contains_key("")) {
        let (_, e) = est.into_iter().next().unwrap();
        let (k, a) = ann.into_iter().next().unwrap();
        let name = if k.is_empty() {
            a.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string()
        } else {
            k
        };
        vec![(name, e, a)]
    } else {
        let unpaired: Vec<&String> = ann.keys().filter(|k| !est.contains_key(*k)).chain(est.keys().filter(|k| !ann.contains_key(*k))).collect();
        if !unpaired.is_empty() {
            return Err(Error::Input(format!("files without a counterpart: {unpaired:?}")));
        }
        ann.iter().map(|(k, a)| (k.clone(), est[k].clone(), a.clone())).collect()
    };
    if pairs.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let rows = pairs
        .iter()
        .map(|(name, e, a)| {
            let times = read_downbeat_file(e)?;
            let annotation = read_annotation_file(a)?;
            Ok((name.clone(), f_measure(&times, &annotation.downbeats, tol)?))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(p) = out {
        let mut s = String::from("track,precision,recall,f1,matched,false_pos,false_neg\n");
        for (name, r) in &rows {
            s.push_str(&format!(
                "{name},{},{},{},{},{},{}\n",
                r.precision, r.recall, r.f1, r.matched, r.false_pos, r.false_neg
            ));
        }
        fs::write(p, s)?;
    }
    Ok(rows)
}

pub fn cmd_sweep(checkpoints: &[Checkpoint], cfg: &RunConfig, manifest: &Path) -> Result<SweepTable> {
    let nets = checkpoints
        .iter()
        .map(Checkpoint::network)
        .collect::<Result<Vec<_>>>()?;
    let grid = nets[0].grid().clone();
    for (ck, n) in checkpoints.iter().zip(&nets) {
        if *n.grid() != grid {
            return Err(Error::Config(format!("{} uses a different scale grid", ck.model)));
        }
    }
    let m = LoadedManifest::open(manifest)?;
    let tracks: Vec<SweepTrack> = load_split(&m, Split::Test)?
        .into_iter()
        .filter(|t| cfg.eval.scale_indices.contains(&t.1))
        .map(|(id, scale_index, features, annotation)| SweepTrack {
            id,
            scale_index,
            features,
            annotation,
        })
        .collect();
    let decoder = Decoder::new(&grid, &cfg.decoder)?;
    let models: Vec<(&str, &dyn ActivationSource)> = checkpoints
        .iter()
        .zip(&nets)
        .map(|(ck, n)| (ck.model.as_str(), n as &dyn ActivationSource))
        .collect();
    run_sweep(&models, &tracks, &decoder, &cfg.eval)
}

/// Long-format CSV `series,scale,tau,position,in_channel,out_channel,value`:
/// series `k` is the pattern kernel over musical positions `m`, series `h`
/// the scaled kernel of scale `j` over frames.
pub fn cmd_inspect_kernel(ck: &Checkpoint, layer: &str, scales: &[usize], out: &Path) -> Result<()> {
    let net = ck.network()?;
    let l = net.layer(layer).ok_or_else(|| {
        Error::Input(format!(
            "no layer {layer:?}; layers are {}",
            net.layers.iter().map(|l| l.name.as_str()).collect::<Vec<_>>().join(", ")
        ))
    })?;
    if !matches!(l.kind, LayerKind::ScaleInvariant { .. }) {
        return Err(Error::Input(format!("layer {layer} is not scale-invariant")));
    }
    let psi = net.scaling_tensor().expect("scale-invariant layers carry a tensor");
    let grid = net.grid();
    let all: Vec<usize> = (0..grid.n_scales).collect();
    let scales = if scales.is_empty() { &all[..] } else { scales };
    if let Some(&j) = scales.iter().find(|&&j| j >= grid.n_scales) {
        return Err(Error::Input(format!("scale {j} outside 0..{}", grid.n_scales)));
    }
    let (m_len, c_in, c_out) = l.weights.dim();
    let h = materialise_kernels(l.weights.view(), &scale_matrices(psi));
    let mut s = String::from("series,scale,tau,position,in_channel,out_channel,value\n");
    for m in 0..m_len {
        for c in 0..c_in {
            for o in 0..c_out {
                s.push_str(&format!("k,,,{m},{c},{o},{}\n", l.weights[[m, c, o]]));
            }
        }
    }
    for &j in scales {
        let hj = &h[j];
        for n in 0..hj.nrows() {
            for c in 0..c_in {
                for o in 0..c_out {
                    s.push_str(&format!("h,{j},{},{n},{c},{o},{}\n", grid.taus[j], hj[[n, c * c_out + o]]));
                }
            }
        }
    }
    fs::write(out, s)?;
    Ok(())
}
