use serde::{Deserialize, Serialize};

use super::{canonical_patterns, generate_patterns, render_track, DrumPattern, StyleMix, TrackAnnotation};
use crate::error::ensure;
use crate::nnkernels::FeatureMap;

/// Every scale index of the full test protocol, `-13..=13`.
pub const TEST_SCALES_FULL: [i32; 27] = [
    -13, -12, -11, -10, -9, -8, -7, -6, -5, -4, -3, -2, -1, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11,
    12, 13,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_patterns: usize,
    /// Append the sixteen bundled rhythms to the generated ones.
    pub include_canonical: bool,
    pub style_mix: StyleMix,
    pub train_profiles: Vec<u32>,
    pub test_profiles: Vec<u32>,
    pub test_scales: Vec<i32>,
    /// Train on scales `{-1, 0, 1}` instead of `{0}`.
    pub augment: bool,
    /// Fraction of training patterns held out for validation.
    pub val_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            n_patterns: 160,
            include_canonical: false,
            style_mix: StyleMix::default(),
            train_profiles: vec![0, 1, 2, 3],
            test_profiles: vec![100, 101],
            test_scales: TEST_SCALES_FULL.to_vec(),
            augment: false,
            val_fraction: 0.1,
        }
    }
}

impl ExperimentConfig {
    pub fn train_scales(&self) -> Vec<i32> {
        if self.augment {
            vec![-1, 0, 1]
        } else {
            vec![0]
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        ensure!(self.n_patterns >= 1 || self.include_canonical, Config, "need at least one pattern");
        ensure!(!self.train_profiles.is_empty(), Config, "no training profiles");
        ensure!(!self.test_profiles.is_empty(), Config, "no test profiles");
        let shared: Vec<u32> = self
            .train_profiles
            .iter()
            .filter(|p| self.test_profiles.contains(p))
            .copied()
            .collect();
        ensure!(
            shared.is_empty(),
            Config,
            "train and test profiles overlap: {shared:?}"
        );
        for &i in &self.test_scales {
            ensure!((-13..=13).contains(&i), Config, "scale index {i} outside [-13, 13]");
        }
        ensure!(
            (0.0..1.0).contains(&self.val_fraction),
            Config,
            "val_fraction must be in [0, 1)"
        );
        Ok(())
    }
}

/// One rendering to produce: a pattern at a scale with a profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    pub id: String,
    pub pattern_index: usize,
    pub pattern_id: String,
    pub scale_index: i32,
    pub profile_id: u32,
    pub split: Split,
    pub seed: u64,
}

impl TrackSpec {
    pub fn render(&self, patterns: &[DrumPattern]) -> crate::Result<(FeatureMap, TrackAnnotation)> {
        let pattern = patterns.get(self.pattern_index).ok_or_else(|| {
            crate::Error::Input(format!("track {} references missing pattern", self.id))
        })?;
        render_track(pattern, self.scale_index, self.profile_id, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub patterns: Vec<DrumPattern>,
    pub train: Vec<TrackSpec>,
    pub val: Vec<TrackSpec>,
    pub test: Vec<TrackSpec>,
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn track_id(pattern: usize, scale: i32, profile: u32) -> String {
    format!("p{pattern:03}_s{scale:+03}_f{profile:02}")
}

/// The seed of a rendering ignores the scale so every scaled version of a
/// (pattern, profile) pair gets the same relative silence offset.
fn render_seed(seed: u64, pattern: &str, profile: u32) -> u64 {
    fnv1a(format!("{seed}/{pattern}/{profile}").as_bytes())
}

pub fn build_experiment_datasets(cfg: &ExperimentConfig) -> crate::Result<Datasets> {
    cfg.validate()?;
    let mut patterns = generate_patterns(cfg.seed, cfg.n_patterns, &cfg.style_mix);
    if cfg.include_canonical {
        patterns.extend(canonical_patterns());
    }
    let spec = |pi: usize, p: &DrumPattern, scale: i32, profile: u32, split: Split| TrackSpec {
        id: track_id(pi, scale, profile),
        pattern_index: pi,
        pattern_id: p.id.clone(),
        scale_index: scale,
        profile_id: profile,
        split,
        seed: render_seed(cfg.seed, &p.id, profile),
    };
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (pi, p) in patterns.iter().enumerate() {
        // low bits: FNV-1a mixes the trailing bytes poorly into the high ones
        let bucket = fnv1a(format!("{}/{}", cfg.seed, p.id).as_bytes()) % 10_000;
        let is_val = (bucket as f64) < cfg.val_fraction * 10_000.0;
        for &profile in &cfg.train_profiles {
            for scale in cfg.train_scales() {
                if is_val {
                    val.push(spec(pi, p, scale, profile, Split::Val));
                } else {
                    train.push(spec(pi, p, scale, profile, Split::Train));
                }
            }
        }
        for &profile in &cfg.test_profiles {
            for &scale in &cfg.test_scales {
                test.push(spec(pi, p, scale, profile, Split::Test));
            }
        }
    }
    ensure!(!train.is_empty(), Config, "validation split left no training tracks");
    Ok(Datasets {
        patterns,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn track_counts() {
        let d = build_experiment_datasets(&ExperimentConfig::default()).unwrap();
        assert_eq!(d.test.len(), 160 * 27 * 2);
        assert_eq!(d.train.len() + d.val.len(), 160 * 4);
        assert!(!d.val.is_empty());
        assert!(d.train.iter().all(|t| t.scale_index == 0));
    }

    #[test]
    fn augmented_scales() {
        let cfg = ExperimentConfig {
            augment: true,
            ..Default::default()
        };
        assert_eq!(cfg.train_scales(), vec![-1, 0, 1]);
        let d = build_experiment_datasets(&cfg).unwrap();
        assert_eq!(d.train.len() + d.val.len(), 160 * 4 * 3);
    }

    #[test]
    fn overlapping_profiles_rejected() {
        let cfg = ExperimentConfig {
            test_profiles: vec![3, 9],
            ..Default::default()
        };
        assert!(matches!(
            build_experiment_datasets(&cfg),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn profiles_disjoint_and_ids_unique() {
        let d = build_experiment_datasets(&ExperimentConfig::default()).unwrap();
        let train: std::collections::HashSet<u32> =
            d.train.iter().map(|t| t.profile_id).collect();
        assert!(d.test.iter().all(|t| !train.contains(&t.profile_id)));
        let mut ids: Vec<&str> = d.test.iter().map(|t| t.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), d.test.len());
        assert_eq!(d.test[0].id, "p000_s-13_f100");
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
