//! Synthetic multi-title game-frame sequences with injected pop bugs.

mod io;
pub mod render;

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use io::{read_dataset, read_manifest, write_dataset, Manifest, SequenceEntry, MANIFEST_FILE};
pub use render::{inject_pop, Palette, Scene};
use render::mark_pop;

use crate::bbox::BoundingBox;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("image dimensions must be non-zero (got {width}x{height})")]
    ZeroDimensions { width: usize, height: usize },
    #[error("requested {requested} sequences for split {split}, cap is {cap}")]
    TooManySequences {
        split: Split,
        requested: usize,
        cap: usize,
    },
    #[error("no eligible object")]
    NoEligibleObject,
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("checksum mismatch for sequence {0}")]
    ChecksumMismatch(String),
    #[error("malformed annotation in {file} line {line}: {reason}")]
    MalformedAnnotation {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Park,
    Indoor,
    Terrain,
}

/// Visual identity of one synthetic game title.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TitleStyle {
    pub title_id: String,
    pub palette_seed: u64,
    pub background_kind: BackgroundKind,
    /// Fraction of `GenConfig::max_objects` placed in a scene, in (0, 1].
    pub object_density: f64,
    pub camera_speed_px_per_frame: f64,
    /// Additive Gaussian pixel noise on the 0-255 scale.
    pub noise_sigma: f64,
}

impl Default for TitleStyle {
    fn default() -> Self {
        Self::preset("parkland").expect("built-in preset")
    }
}

impl TitleStyle {
    pub const PRESETS: [&'static str; 3] = ["parkland", "tower", "canyon"];

    /// Built-in titles used by the benchmark.
    pub fn preset(name: &str) -> Option<Self> {
        let style = match name {
            "parkland" => Self {
                title_id: name.into(),
                palette_seed: 11,
                background_kind: BackgroundKind::Park,
                object_density: 0.6,
                camera_speed_px_per_frame: 2.0,
                noise_sigma: 2.0,
            },
            "tower" => Self {
                title_id: name.into(),
                palette_seed: 23,
                background_kind: BackgroundKind::Indoor,
                object_density: 0.8,
                camera_speed_px_per_frame: 1.0,
                noise_sigma: 3.0,
            },
            "canyon" => Self {
                title_id: name.into(),
                palette_seed: 37,
                background_kind: BackgroundKind::Terrain,
                object_density: 0.5,
                camera_speed_px_per_frame: 3.0,
                noise_sigma: 4.0,
            },
            _ => return None,
        };
        Some(style)
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.title_id.is_empty() || self.title_id.contains(['/', '\\']) {
            return Err(DatagenError::InvalidConfig(format!(
                "bad title id {:?}",
                self.title_id
            )));
        }
        if !(self.object_density > 0.0 && self.object_density <= 1.0) {
            return Err(DatagenError::InvalidConfig(
                "object_density must lie in (0, 1]".into(),
            ));
        }
        if !(self.camera_speed_px_per_frame >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(DatagenError::InvalidConfig(
                "camera speed and noise sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BugClass {
    CullingPop,
    LodPop,
}

impl BugClass {
    pub const ALL: [BugClass; 2] = [BugClass::CullingPop, BugClass::LodPop];

    pub fn index(self) -> usize {
        match self {
            BugClass::CullingPop => 0,
            BugClass::LodPop => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BugClass::CullingPop => "culling_pop",
            BugClass::LodPop => "lod_pop",
        }
    }
}

impl fmt::Display for BugClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BugClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "culling_pop" => Ok(BugClass::CullingPop),
            "lod_pop" => Ok(BugClass::LodPop),
            other => Err(format!("unknown bug class {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BoundingBox,
    pub bug_class: BugClass,
    pub frame_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
    Unlabeled,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Validation, Split::Test, Split::Unlabeled];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        }
    }

    pub fn is_labeled(self) -> bool {
        self != Split::Unlabeled
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Four consecutive frames; labeled pops are anchored on frame 2.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub sequence_id: String,
    pub title_id: String,
    pub frames: Vec<RgbImage>,
    pub annotations: Vec<Annotation>,
    pub split: Split,
}

impl FrameSequence {
    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.width() as usize)
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.height() as usize)
    }
}

/// Generator knobs that are not part of a title's visual identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub width: usize,
    pub height: usize,
    /// Render all four frames from the frame-2 camera pose.
    pub static_pop_window: bool,
    pub max_objects: usize,
    pub min_object_size: usize,
    pub max_object_size: usize,
    /// Allowed pop classes, drawn uniformly.
    pub bug_classes: Vec<BugClass>,
    /// Probability that a labeled sequence carries a second pop.
    pub extra_pop_probability: f64,
    /// Fraction of unlabeled sequences that still contain (unlabeled) pops.
    pub unlabeled_bug_fraction: f64,
    /// Safety cap on sequences per split.
    pub max_sequences_per_split: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            static_pop_window: true,
            max_objects: 6,
            min_object_size: 6,
            max_object_size: 18,
            bug_classes: BugClass::ALL.to_vec(),
            extra_pop_probability: 0.2,
            unlabeled_bug_fraction: 0.5,
            max_sequences_per_split: 100_000,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.width == 0 || self.height == 0 {
            return Err(DatagenError::ZeroDimensions {
                width: self.width,
                height: self.height,
            });
        }
        if self.bug_classes.is_empty() {
            return Err(DatagenError::InvalidConfig("bug_classes is empty".into()));
        }
        if self.min_object_size == 0 || self.min_object_size > self.max_object_size {
            return Err(DatagenError::InvalidConfig("bad object size range".into()));
        }
        if !(0.0..=1.0).contains(&self.extra_pop_probability)
            || !(0.0..=1.0).contains(&self.unlabeled_bug_fraction)
        {
            return Err(DatagenError::InvalidConfig("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub images: usize,
    pub pops: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub train: SplitCounts,
    pub validation: SplitCounts,
    pub test: SplitCounts,
    pub unlabeled: SplitCounts,
}

impl DatasetCounts {
    pub fn get(&self, split: Split) -> SplitCounts {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
            Split::Unlabeled => self.unlabeled,
        }
    }
}

/// All splits of one title.
#[derive(Clone, Debug, PartialEq)]
pub struct TitleDataset {
    pub style: TitleStyle,
    pub config: GenConfig,
    pub seed: u64,
    pub train: Vec<FrameSequence>,
    pub validation: Vec<FrameSequence>,
    pub test: Vec<FrameSequence>,
    pub unlabeled: Vec<FrameSequence>,
}

impl TitleDataset {
    pub fn title_id(&self) -> &str {
        &self.style.title_id
    }

    pub fn split(&self, split: Split) -> &[FrameSequence] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
            Split::Unlabeled => &self.unlabeled,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<FrameSequence> {
        match split {
            Split::Train => &mut self.train,
            Split::Validation => &mut self.validation,
            Split::Test => &mut self.test,
            Split::Unlabeled => &mut self.unlabeled,
        }
    }

    /// Image and pop counts per split. Unlabeled pops are not counted since
    /// they carry no annotations.
    pub fn counts(&self) -> DatasetCounts {
        let count = |s: &[FrameSequence]| SplitCounts {
            images: s.len(),
            pops: s.iter().map(|q| q.annotations.len()).sum(),
        };
        DatasetCounts {
            train: count(&self.train),
            validation: count(&self.validation),
            test: count(&self.test),
            unlabeled: count(&self.unlabeled),
        }
    }
}

pub fn sequence_id(title_id: &str, split: Split, index: usize) -> String {
    format!("{title_id}-{split}-{index:05}")
}

/// Independent rng stream for one sequence, derived from the global seed and
/// the sequence id so that generation order does not matter.
pub fn sequence_rng(seed: u64, sequence_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(sequence_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

const MAX_SCENE_ATTEMPTS: usize = 64;

fn generate_sequence(
    style: &TitleStyle,
    palette: &Palette,
    cfg: &GenConfig,
    seed: u64,
    split: Split,
    index: usize,
) -> Result<FrameSequence, DatagenError> {
    let id = sequence_id(&style.title_id, split, index);
    let mut rng = sequence_rng(seed, &id);
    let want_bug = split.is_labeled() || rng.gen_bool(cfg.unlabeled_bug_fraction);
    for _ in 0..MAX_SCENE_ATTEMPTS {
        let mut scene = Scene::random(style, palette, cfg, &mut rng);
        let mut annotations = Vec::new();
        if want_bug {
            let pops = if rng.gen_bool(cfg.extra_pop_probability) { 2 } else { 1 };
            for _ in 0..pops {
                let class = cfg.bug_classes[rng.gen_range(0..cfg.bug_classes.len())];
                match mark_pop(&mut scene, class, &mut rng) {
                    Ok(ann) => annotations.push(ann),
                    Err(DatagenError::NoEligibleObject) => break,
                    Err(e) => return Err(e),
                }
            }
            if annotations.is_empty() {
                continue;
            }
        }
        let frames = scene.render(&mut rng).to_vec();
        if !split.is_labeled() {
            annotations.clear();
        }
        return Ok(FrameSequence {
            sequence_id: id,
            title_id: style.title_id.clone(),
            frames,
            annotations,
            split,
        });
    }
    Err(DatagenError::NoEligibleObject)
}

/// Generates every split of one title. Deterministic in `(style, cfg,
/// counts, seed)`; sequences are generated in parallel.
pub fn generate_title(
    style: &TitleStyle,
    cfg: &GenConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    n_unlabeled: usize,
    seed: u64,
) -> Result<TitleDataset, DatagenError> {
    cfg.validate()?;
    style.validate()?;
    let palette = Palette::from_style(style);
    let counts = [
        (Split::Train, n_train),
        (Split::Validation, n_val),
        (Split::Test, n_test),
        (Split::Unlabeled, n_unlabeled),
    ];
    for (split, n) in counts {
        if n > cfg.max_sequences_per_split {
            return Err(DatagenError::TooManySequences {
                split,
                requested: n,
                cap: cfg.max_sequences_per_split,
            });
        }
    }
    let gen = |split: Split, n: usize| -> Result<Vec<FrameSequence>, DatagenError> {
        (0..n)
            .into_par_iter()
            .map(|i| generate_sequence(style, &palette, cfg, seed, split, i))
            .collect()
    };
    Ok(TitleDataset {
        style: style.clone(),
        config: cfg.clone(),
        seed,
        train: gen(Split::Train, n_train)?,
        validation: gen(Split::Validation, n_val)?,
        test: gen(Split::Test, n_test)?,
        unlabeled: gen(Split::Unlabeled, n_unlabeled)?,
    })
}
