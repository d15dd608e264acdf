//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<split>/<sequence_id>/frame_0.png .. frame_3.png
//! <root>/<split>/<sequence_id>/boxes
//! ```
//!
//! `boxes` holds one record per line: `frame_index x_min y_min x_max y_max class`.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    Annotation, DatagenError, DatasetCounts, FrameSequence, GenConfig, Split, TitleDataset,
    TitleStyle,
};
use crate::bbox::BoundingBox;
use crate::fsutil;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub sequence_id: String,
    /// SHA-256 over the four frame files followed by `boxes`.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub title_id: String,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub counts: DatasetCounts,
    pub style: TitleStyle,
    pub config: GenConfig,
    pub train: Vec<SequenceEntry>,
    pub validation: Vec<SequenceEntry>,
    pub test: Vec<SequenceEntry>,
    pub unlabeled: Vec<SequenceEntry>,
}

impl Manifest {
    fn entries(&self, split: Split) -> &[SequenceEntry] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
            Split::Unlabeled => &self.unlabeled,
        }
    }
}

fn frame_name(i: usize) -> String {
    format!("frame_{i}.png")
}

fn encode_png(img: &RgbImage) -> Result<Vec<u8>, DatagenError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn format_boxes(annotations: &[Annotation]) -> String {
    annotations
        .iter()
        .map(|a| {
            format!(
                "{} {} {} {} {} {}\n",
                a.frame_index, a.bbox.x_min, a.bbox.y_min, a.bbox.x_max, a.bbox.y_max, a.bug_class
            )
        })
        .collect()
}

fn parse_boxes(text: &str, file: &str) -> Result<Vec<Annotation>, DatagenError> {
    let bad = |line: usize, reason: String| DatagenError::MalformedAnnotation {
        file: file.to_string(),
        line,
        reason,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(bad(line_no, format!("expected 6 fields, got {}", fields.len())));
        }
        let frame_index: usize = fields[0]
            .parse()
            .map_err(|e| bad(line_no, format!("frame index: {e}")))?;
        let mut coords = [0.0; 4];
        for (c, f) in coords.iter_mut().zip(&fields[1..5]) {
            *c = f.parse().map_err(|e| bad(line_no, format!("coordinate {f:?}: {e}")))?;
        }
        let bbox = BoundingBox::new(coords[0], coords[1], coords[2], coords[3])
            .map_err(|e| bad(line_no, e.to_string()))?;
        let bug_class = fields[5].parse().map_err(|e: String| bad(line_no, e))?;
        out.push(Annotation {
            bbox,
            bug_class,
            frame_index,
        });
    }
    Ok(out)
}

fn sequence_files(seq: &FrameSequence) -> Result<Vec<(String, Vec<u8>)>, DatagenError> {
    let mut files = Vec::with_capacity(5);
    for (i, f) in seq.frames.iter().enumerate() {
        files.push((frame_name(i), encode_png(f)?));
    }
    files.push(("boxes".to_string(), format_boxes(&seq.annotations).into_bytes()));
    Ok(files)
}

fn checksum<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Writes `dataset` under `root` atomically: everything lands in a sibling
/// staging directory that is renamed into place at the end. An existing
/// dataset at `root` is replaced.
pub fn write_dataset(dataset: &TitleDataset, root: &Path) -> Result<Manifest, DatagenError> {
    let staging = fsutil::staging_path(root);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    let result = write_into(dataset, &staging);
    match result {
        Ok(manifest) => {
            fsutil::replace_dir(&staging, root)?;
            Ok(manifest)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn write_into(dataset: &TitleDataset, dir: &Path) -> Result<Manifest, DatagenError> {
    fs::create_dir_all(dir)?;
    let mut entries: Vec<Vec<SequenceEntry>> = Vec::new();
    for split in Split::ALL {
        let mut list = Vec::new();
        for seq in dataset.split(split) {
            let seq_dir = dir.join(split.as_str()).join(&seq.sequence_id);
            fs::create_dir_all(&seq_dir)?;
            let files = sequence_files(seq)?;
            for (name, bytes) in &files {
                fs::write(seq_dir.join(name), bytes)?;
            }
            list.push(SequenceEntry {
                sequence_id: seq.sequence_id.clone(),
                sha256: checksum(files.iter().map(|(_, b)| b.as_slice())),
            });
        }
        entries.push(list);
    }
    let mut it = entries.into_iter();
    let (width, height) = dataset
        .train
        .first()
        .or(dataset.unlabeled.first())
        .map_or((dataset.config.width, dataset.config.height), |s| (s.width(), s.height()));
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        title_id: dataset.style.title_id.clone(),
        seed: dataset.seed,
        width,
        height,
        counts: dataset.counts(),
        style: dataset.style.clone(),
        config: dataset.config.clone(),
        train: it.next().unwrap_or_default(),
        validation: it.next().unwrap_or_default(),
        test: it.next().unwrap_or_default(),
        unlabeled: it.next().unwrap_or_default(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DatagenError::MalformedManifest(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

fn read_file(path: &Path) -> Result<Vec<u8>, DatagenError> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DatagenError::MissingFile(path.display().to_string()),
        _ => DatagenError::Io(e),
    })
}

pub fn read_manifest(root: &Path) -> Result<Manifest, DatagenError> {
    let text = read_file(&root.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_slice(&text)
        .map_err(|e| DatagenError::MalformedManifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DatagenError::MalformedManifest(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Reads a dataset written by [`write_dataset`], verifying every checksum.
pub fn read_dataset(root: &Path) -> Result<TitleDataset, DatagenError> {
    let manifest = read_manifest(root)?;
    let mut dataset = TitleDataset {
        style: manifest.style.clone(),
        config: manifest.config.clone(),
        seed: manifest.seed,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        unlabeled: Vec::new(),
    };
    for split in Split::ALL {
        for entry in manifest.entries(split) {
            let seq_dir: PathBuf = root.join(split.as_str()).join(&entry.sequence_id);
            let mut raw = Vec::with_capacity(5);
            for i in 0..4 {
                raw.push(read_file(&seq_dir.join(frame_name(i)))?);
            }
            raw.push(read_file(&seq_dir.join("boxes"))?);
            if checksum(raw.iter().map(Vec::as_slice)) != entry.sha256 {
                return Err(DatagenError::ChecksumMismatch(entry.sequence_id.clone()));
            }
            let frames = raw[..4]
                .iter()
                .map(|b| Ok(image::load_from_memory_with_format(b, ImageFormat::Png)?.to_rgb8()))
                .collect::<Result<Vec<_>, DatagenError>>()?;
            let boxes_text = String::from_utf8(raw[4].clone()).map_err(|_| {
                DatagenError::MalformedAnnotation {
                    file: seq_dir.join("boxes").display().to_string(),
                    line: 0,
                    reason: "not utf-8".into(),
                }
            })?;
            let annotations = parse_boxes(&boxes_text, &seq_dir.join("boxes").display().to_string())?;
            dataset.split_mut(split).push(FrameSequence {
                sequence_id: entry.sequence_id.clone(),
                title_id: manifest.title_id.clone(),
                frames,
                annotations,
                split,
            });
        }
    }
    if dataset.counts() != manifest.counts {
        return Err(DatagenError::MalformedManifest(
            "split counts do not match contents".into(),
        ));
    }
    Ok(dataset)
}
