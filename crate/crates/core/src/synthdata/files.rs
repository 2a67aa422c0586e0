//! On-disk forms: JSON patterns and manifests, text annotations, TIDB
//! feature maps.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DrumPattern, Split, TrackAnnotation, TrackSpec};
use crate::container::{Kind, Reader, Writer};
use crate::error::{ensure, Error, Result};
use crate::nnkernels::FeatureMap;

pub const PATTERN_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PatternFile {
    schema_version: u32,
    #[serde(flatten)]
    pattern: DrumPattern,
}

pub fn write_pattern_file(path: &Path, pattern: &DrumPattern) -> Result<()> {
    let file = PatternFile {
        schema_version: PATTERN_SCHEMA_VERSION,
        pattern: pattern.clone(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_pattern_file(path: &Path) -> Result<DrumPattern> {
    let text = std::fs::read_to_string(path)?;
    let file: PatternFile = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    ensure!(
        file.schema_version == PATTERN_SCHEMA_VERSION,
        Format,
        "{}: unsupported pattern schema {}",
        path.display(),
        file.schema_version
    );
    file.pattern.validate()?;
    Ok(file.pattern)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub track_id: String,
    pub pattern_id: String,
    pub scale_index: i32,
    pub profile_id: u32,
    pub split: Split,
    pub seed: u64,
    /// Relative to the manifest directory.
    pub annotation_path: PathBuf,
    /// Absent when the features are rendered on demand.
    pub feature_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    /// `pattern id -> pattern file`, relative to the manifest directory.
    pub patterns: Vec<(String, PathBuf)>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn scale_indices(&self, split: Split) -> Vec<i32> {
        let mut s: Vec<i32> = self
            .entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.scale_index)
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    ensure!(
        m.schema_version == MANIFEST_SCHEMA_VERSION,
        Format,
        "{}: unsupported manifest schema {}",
        path.display(),
        m.schema_version
    );
    Ok(m)
}

/// A manifest resolved against its directory: patterns loaded, entries turned
/// back into renderable track specs.
pub struct LoadedManifest {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub patterns: Vec<DrumPattern>,
    pub tracks: Vec<TrackSpec>,
}

impl LoadedManifest {
    pub fn open(path: &Path) -> Result<Self> {
        let manifest = read_manifest(path)?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut patterns = Vec::with_capacity(manifest.patterns.len());
        let mut index = HashMap::new();
        for (id, rel) in &manifest.patterns {
            let p = read_pattern_file(&dir.join(rel))?;
            ensure!(&p.id == id, Format, "pattern file {} holds {}", rel.display(), p.id);
            index.insert(id.clone(), patterns.len());
            patterns.push(p);
        }
        let tracks = manifest
            .entries
            .iter()
            .map(|e| {
                let pattern_index = *index.get(&e.pattern_id).ok_or_else(|| {
                    Error::Format(format!("track {} names unknown pattern {}", e.track_id, e.pattern_id))
                })?;
                Ok(TrackSpec {
                    id: e.track_id.clone(),
                    pattern_index,
                    pattern_id: e.pattern_id.clone(),
                    scale_index: e.scale_index,
                    profile_id: e.profile_id,
                    split: e.split,
                    seed: e.seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LoadedManifest {
            dir,
            manifest,
            patterns,
            tracks,
        })
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.tracks.len())
            .filter(|&i| self.tracks[i].split == split)
            .collect()
    }

    /// Features and annotation of track `i`, read from disk when stored and
    /// rendered otherwise.
    pub fn load(&self, i: usize) -> Result<(FeatureMap, TrackAnnotation)> {
        let entry = &self.manifest.entries[i];
        match &entry.feature_path {
            Some(rel) => {
                let features = read_feature_file(&self.dir.join(rel))?;
                let mut ann = read_annotation_file(&self.dir.join(&entry.annotation_path))?;
                ann.duration = features.n_frames() as f64 / features.frame_rate;
                Ok((features, ann))
            }
            None => self.tracks[i].render(&self.patterns),
        }
    }
}

/// Text lines `time label` with label `db` or `beat`; a downbeat is written
/// once, as `db`. Duration and tempo segments go in `#` comment lines.
pub fn write_annotation_file(path: &Path, ann: &TrackAnnotation) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# duration {:.9}", ann.duration)?;
    for (start, bpm) in &ann.tempo_curve {
        writeln!(w, "# tempo {start:.9} {bpm:.9}")?;
    }
    let mut d = ann.downbeats.iter().peekable();
    for &b in &ann.beats {
        while let Some(&&x) = d.peek() {
            if x < b - 1e-9 {
                writeln!(w, "{x:.9} db")?;
                d.next();
            } else {
                break;
            }
        }
        if d.peek().is_some_and(|&&x| (x - b).abs() <= 1e-9) {
            writeln!(w, "{b:.9} db")?;
            d.next();
        } else {
            writeln!(w, "{b:.9} beat")?;
        }
    }
    for x in d {
        writeln!(w, "{x:.9} db")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_annotation_file(path: &Path) -> Result<TrackAnnotation> {
    let text = std::fs::read_to_string(path)?;
    let mut ann = TrackAnnotation {
        downbeats: Vec::new(),
        beats: Vec::new(),
        tempo_curve: Vec::new(),
        duration: 0.0,
    };
    let bad = |n: usize, line: &str| Error::Format(format!("{}:{}: cannot parse {line:?}", path.display(), n + 1));
    let mut duration = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            match parts.as_slice() {
                ["duration", v] => duration = Some(v.parse::<f64>().map_err(|_| bad(n, line))?),
                ["tempo", s, b] => ann.tempo_curve.push((
                    s.parse().map_err(|_| bad(n, line))?,
                    b.parse().map_err(|_| bad(n, line))?,
                )),
                _ => {}
            }
            continue;
        }
        let mut parts = line.split_whitespace();
        let t: f64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .filter(|t: &f64| t.is_finite())
            .ok_or_else(|| bad(n, line))?;
        match parts.next() {
            Some("db") | Some("1") => {
                ann.downbeats.push(t);
                ann.beats.push(t);
            }
            Some("beat") | Some("2") | Some("3") | Some("4") | None => ann.beats.push(t),
            Some(_) => return Err(bad(n, line)),
        }
    }
    ensure!(
        ann.beats.windows(2).all(|w| w[0] < w[1]),
        Format,
        "{}: annotation times are not strictly increasing",
        path.display()
    );
    ann.duration = duration.unwrap_or_else(|| ann.beats.last().copied().unwrap_or(0.0));
    Ok(ann)
}

/// TIDB kind 2: `N`, `C` (u64), frame rate (f64), row-major values.
pub fn write_feature_file(path: &Path, features: &FeatureMap) -> Result<()> {
    ensure!(
        !features.has_scale_axis,
        Shape,
        "only pre-scale feature maps can be stored"
    );
    let mut w = Writer::new(BufWriter::new(File::create(path)?), Kind::Features)?;
    w.u64(features.n_frames() as u64)?;
    w.u64(features.n_channels() as u64)?;
    w.f64(features.frame_rate)?;
    let frames = features.frames(0);
    let values: Vec<f64> = frames.iter().copied().collect();
    w.f64_slice(&values)?;
    w.finish()?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<FeatureMap> {
    let mut r = Reader::new(BufReader::new(File::open(path)?), Kind::Features)?;
    let n = r.len_prefix(8)?;
    let c = r.len_prefix(8)?;
    let frame_rate = r.f64()?;
    ensure!(
        n >= 1 && c >= 1 && n.checked_mul(c).is_some_and(|x| x < 1 << 34),
        Format,
        "implausible feature shape {n}x{c}"
    );
    ensure!(frame_rate.is_finite() && frame_rate > 0.0, Format, "bad frame rate {frame_rate}");
    let values = r.f64_vec(n * c)?;
    let values = Array2::from_shape_vec((n, c), values).map_err(|e| Error::Format(e.to_string()))?;
    Ok(FeatureMap::from_frames(values, frame_rate))
}
