//! Four RGB frames to a three-channel difference image, patch grids and
//! random patch masks.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageBuffer, ImageFormat, Luma, Rgb, RgbImage};
use rand::Rng;
use thiserror::Error;

use crate::autograd::Tensor;
use crate::datagen::{Annotation, FrameSequence};
use crate::fsutil;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("expected 4 frames, got {0}")]
    FrameCount(usize),
    #[error("frame {index} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    FrameSize {
        index: usize,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("image {width}x{height} is not divisible by patch size {patch}")]
    NotDivisible {
        width: usize,
        height: usize,
        patch: usize,
    },
    #[error("mask ratio {0} outside [0, 1]")]
    BadRatio(f64),
    #[error("diff cache: {0}")]
    Cache(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

/// BT.601 luma, rounded half away from zero, computed in integers.
pub fn gray_value(r: u8, g: u8, b: u8) -> u8 {
    let weighted = 299 * r as u32 + 587 * g as u32 + 114 * b as u32;
    ((weighted + 500) / 1000) as u8
}

pub fn to_grayscale(rgb: &RgbImage) -> GrayImage {
    let mut out = GrayImage::new(rgb.width(), rgb.height());
    for (o, Rgb([r, g, b])) in out.pixels_mut().zip(rgb.pixels()) {
        *o = Luma([gray_value(*r, *g, *b)]);
    }
    out
}

/// Stacked absolute grayscale differences, channel-major `[3][H][W]`, each
/// value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub source_sequence_id: String,
    pub title_id: String,
}

impl DiffImage {
    #[inline]
    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    /// Values scaled back to the 0-255 byte range (exact for freshly stacked
    /// diffs).
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round() as u8).collect()
    }
}

/// Sequence converted to model input, with its labels in frame-2 pixel
/// coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub diff: DiffImage,
    pub annotations: Vec<Annotation>,
}

pub fn stack_diffs(seq: &FrameSequence) -> Result<DiffImage, PreprocessError> {
    if seq.frames.len() != 4 {
        return Err(PreprocessError::FrameCount(seq.frames.len()));
    }
    let (w, h) = seq.frames[0].dimensions();
    for (index, f) in seq.frames.iter().enumerate() {
        if f.dimensions() != (w, h) {
            return Err(PreprocessError::FrameSize {
                index,
                got_w: f.width(),
                got_h: f.height(),
                want_w: w,
                want_h: h,
            });
        }
    }
    let gray: Vec<GrayImage> = seq.frames.iter().map(to_grayscale).collect();
    let n = (w * h) as usize;
    let mut data = vec![0.0; 3 * n];
    for k in 0..3 {
        let (a, b) = (gray[k].as_raw(), gray[k + 1].as_raw());
        for i in 0..n {
            data[k * n + i] = (b[i] as i16 - a[i] as i16).unsigned_abs() as f64 / 255.0;
        }
    }
    Ok(DiffImage {
        width: w as usize,
        height: h as usize,
        data,
        source_sequence_id: seq.sequence_id.clone(),
        title_id: seq.title_id.clone(),
    })
}

pub fn prepare(seq: &FrameSequence) -> Result<Sample, PreprocessError> {
    Ok(Sample {
        diff: stack_diffs(seq)?,
        annotations: seq.annotations.clone(),
    })
}

/// Row-major grid of `P x P x 3` patches. Each row of `patches` holds one
/// patch flattened as `(y, x, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patches: Tensor,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

pub fn patchify(image: &DiffImage, patch: usize) -> Result<PatchGrid, PreprocessError> {
    let (w, h) = (image.width, image.height);
    if patch == 0 || w % patch != 0 || h % patch != 0 {
        return Err(PreprocessError::NotDivisible {
            width: w,
            height: h,
            patch,
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = patch * patch * 3;
    let mut out = Tensor::zeros(gh * gw, dim);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(gy * gw + gx);
            let mut k = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for c in 0..3 {
                        row[k] = image.get(c, gy * patch + py, gx * patch + px);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        patch_size: patch,
        grid_h: gh,
        grid_w: gw,
        patches: out,
    })
}

/// Inverse of [`patchify`]; sequence metadata is left empty.
pub fn unpatchify(grid: &PatchGrid) -> DiffImage {
    let p = grid.patch_size;
    let (w, h) = (grid.grid_w * p, grid.grid_h * p);
    let mut data = vec![0.0; 3 * w * h];
    for gy in 0..grid.grid_h {
        for gx in 0..grid.grid_w {
            let row = grid.patches.row(gy * grid.grid_w + gx);
            let mut k = 0;
            for py in 0..p {
                for px in 0..p {
                    for c in 0..3 {
                        data[(c * h + gy * p + py) * w + gx * p + px] = row[k];
                        k += 1;
                    }
                }
            }
        }
    }
    DiffImage {
        width: w,
        height: h,
        data,
        source_sequence_id: String::new(),
        title_id: String::new(),
    }
}

/// Sorted set of masked patch indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub masked_indices: Vec<usize>,
    pub num_patches: usize,
}

impl MaskSpec {
    pub fn empty(num_patches: usize) -> Self {
        Self {
            masked_indices: Vec::new(),
            num_patches,
        }
    }

    pub fn from_indices(mut indices: Vec<usize>, num_patches: usize) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self {
            masked_indices: indices,
            num_patches,
        }
    }

    pub fn len(&self) -> usize {
        self.masked_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked_indices.is_empty()
    }

    pub fn ratio(&self) -> f64 {
        if self.num_patches == 0 {
            0.0
        } else {
            self.len() as f64 / self.num_patches as f64
        }
    }
}

/// Number of masked patches for a ratio: `round(ratio * n)`, half away from
/// zero.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

/// Uniform random subset of `round(ratio * n)` patch indices.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskSpec, PreprocessError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(PreprocessError::BadRatio(ratio));
    }
    let k = masked_count(n, ratio);
    let picked = rand::seq::index::sample(rng, n, k).into_vec();
    Ok(MaskSpec::from_indices(picked, n))
}

const CACHE_DIR: &str = "diff";

/// Stores diff images as 16-bit fixed-point PNGs under `<root>/diff/`.
pub fn write_diff_cache(root: &Path, diffs: &[DiffImage]) -> Result<(), PreprocessError> {
    let dir = root.join(CACHE_DIR);
    fs::create_dir_all(&dir)?;
    for d in diffs {
        let mut buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::new(d.width as u32, d.height as u32);
        for (x, y, p) in buf.enumerate_pixels_mut() {
            let (x, y) = (x as usize, y as usize);
            *p = Rgb([0, 1, 2].map(|c| (d.get(c, y, x).clamp(0.0, 1.0) * 65535.0).round() as u16));
        }
        let mut bytes = Cursor::new(Vec::new());
        buf.write_to(&mut bytes, ImageFormat::Png)?;
        let name = format!("{}__{}.png", d.title_id, d.source_sequence_id);
        fsutil::write_atomic(&dir.join(name), bytes.into_inner())?;
    }
    Ok(())
}

pub fn read_diff_cache(root: &Path, title_id: &str, sequence_id: &str) -> Result<DiffImage, PreprocessError> {
    let path = root.join(CACHE_DIR).join(format!("{title_id}__{sequence_id}.png"));
    let bytes = fs::read(&path)?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)?;
    let img = match img {
        image::DynamicImage::ImageRgb16(i) => i,
        _ => return Err(PreprocessError::Cache(format!("{} is not 16-bit RGB", path.display()))),
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 65535.0;
        }
    }
    Ok(DiffImage {
        width: w,
        height: h,
        data,
        source_sequence_id: sequence_id.to_string(),
        title_id: title_id.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Split;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq_from(frames: Vec<RgbImage>) -> FrameSequence {
        FrameSequence {
            sequence_id: "s".into(),
            title_id: "t".into(),
            frames,
            annotations: vec![],
            split: Split::Train,
        }
    }

    fn solid(v: u8) -> RgbImage {
        RgbImage::from_pixel(8, 8, Rgb([v, v, v]))
    }

    #[test]
    fn luma_examples() {
        assert_eq!(gray_value(255, 255, 255), 255);
        assert_eq!(gray_value(0, 0, 0), 0);
        assert_eq!(gray_value(255, 0, 0), 76);
        assert_eq!(gray_value(0, 255, 0), 150);
        assert_eq!(gray_value(0, 0, 255), 29);
    }

    #[test]
    fn luma_matches_float_reference() {
        // exhaustive over a coarse cube against f64 arithmetic
        for r in (0..=255u16).step_by(5) {
            for g in (0..=255u16).step_by(7) {
                for b in (0..=255u16).step_by(3) {
                    let f = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
                    let want = (f + 1e-9).round() as u8;
                    assert_eq!(gray_value(r as u8, g as u8, b as u8), want, "{r} {g} {b}");
                }
            }
        }
    }

    #[test]
    fn identical_frames_give_zero_diff() {
        let d = stack_diffs(&seq_from(vec![solid(40); 4])).unwrap();
        assert!(d.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_step_in_last_frame() {
        let d = stack_diffs(&seq_from(vec![solid(0), solid(0), solid(0), solid(10)])).unwrap();
        assert!(d.channel(0).iter().all(|&v| v == 0.0));
        assert!(d.channel(1).iter().all(|&v| v == 0.0));
        assert!(d.channel(2).iter().all(|&v| v == 10.0 / 255.0));
    }

    #[test]
    fn swapping_first_frames_keeps_channel_zero() {
        let frames = vec![solid(3), solid(50), solid(20), solid(20)];
        let a = stack_diffs(&seq_from(frames.clone())).unwrap();
        let mut swapped = frames;
        swapped.swap(0, 1);
        let b = stack_diffs(&seq_from(swapped)).unwrap();
        assert_eq!(a.channel(0), b.channel(0));
        assert_ne!(a.channel(1), b.channel(1));
        assert_eq!(a.channel(2), b.channel(2));
    }

    #[test]
    fn rejects_bad_sequences() {
        assert!(matches!(
            stack_diffs(&seq_from(vec![solid(0); 3])),
            Err(PreprocessError::FrameCount(3))
        ));
        let mut frames = vec![solid(0); 4];
        frames[2] = RgbImage::new(4, 8);
        assert!(matches!(
            stack_diffs(&seq_from(frames)),
            Err(PreprocessError::FrameSize { index: 2, .. })
        ));
    }

    fn diff(w: usize, h: usize, seed: u64) -> DiffImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DiffImage {
            width: w,
            height: h,
            data: (0..3 * w * h).map(|_| rng.gen_range(0..=255u8) as f64 / 255.0).collect(),
            source_sequence_id: String::new(),
            title_id: String::new(),
        }
    }

    #[test]
    fn patch_counts() {
        assert_eq!(patchify(&diff(64, 64, 0), 8).unwrap().num_patches(), 64);
        assert_eq!(patchify(&diff(224, 224, 0), 16).unwrap().num_patches(), 196);
        assert!(matches!(
            patchify(&diff(60, 64, 0), 8),
            Err(PreprocessError::NotDivisible { .. })
        ));
    }

    #[test]
    fn patch_order_is_row_major() {
        let mut d = diff(16, 8, 0);
        d.data.iter_mut().for_each(|v| *v = 0.0);
        // mark pixel (y=0, x=8) in channel 1: second patch of the first row
        d.data[8 * 16 + 8] = 1.0;
        let g = patchify(&d, 8).unwrap();
        assert_eq!(g.patches.row(1)[1], 1.0);
        assert!(g.patches.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sample_mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_mask(196, 0.75, &mut rng).unwrap().len(), 147);
        assert_eq!(sample_mask(64, 0.75, &mut rng).unwrap().len(), 48);
        assert!(sample_mask(10, 0.0, &mut rng).unwrap().is_empty());
        assert_eq!(sample_mask(10, 1.0, &mut rng).unwrap().masked_indices, (0..10).collect::<Vec<_>>());
        assert!(matches!(sample_mask(10, 1.5, &mut rng), Err(PreprocessError::BadRatio(_))));
        assert!(sample_mask(10, -0.1, &mut rng).is_err());
    }

    #[test]
    fn mask_frequencies_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 64;
        let mut hits = vec![0usize; n];
        let trials = 10_000;
        for _ in 0..trials {
            for i in sample_mask(n, 0.75, &mut rng).unwrap().masked_indices {
                hits[i] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / trials as f64;
            assert!((f - 0.75).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn mask_equality_is_set_equality() {
        assert_eq!(MaskSpec::from_indices(vec![3, 1, 2], 5), MaskSpec::from_indices(vec![2, 3, 1], 5));
    }

    #[test]
    fn diff_cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = diff(16, 8, 5);
        d.title_id = "t".into();
        d.source_sequence_id = "t-train-00000".into();
        write_diff_cache(dir.path(), std::slice::from_ref(&d)).unwrap();
        let back = read_diff_cache(dir.path(), "t", "t-train-00000").unwrap();
        for (a, b) in d.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 1.0 / 65535.0);
        }
    }

    proptest! {
        #[test]
        fn patchify_round_trips(seed in 0u64..1000, gw in 1usize..5, gh in 1usize..5, p in 1usize..5) {
            let d = diff(gw * p, gh * p, seed);
            let back = unpatchify(&patchify(&d, p).unwrap());
            prop_assert_eq!(back.data, d.data);
        }

        #[test]
        fn luminance_offset_cancels(base in proptest::collection::vec(0u8..200, 4 * 16), offset in 0u8..55) {
            let mk = |off: u8| {
                let frames = (0..4)
                    .map(|f| {
                        RgbImage::from_fn(4, 4, |x, y| {
                            let v = base[f * 16 + (y * 4 + x) as usize] + off;
                            Rgb([v, v, v])
                        })
                    })
                    .collect();
                stack_diffs(&seq_from(frames)).unwrap()
            };
            prop_assert_eq!(mk(0).data, mk(offset).data);
        }

        #[test]
        fn diffs_bounded_and_zero_iff_equal(a in proptest::collection::vec(0u8..=255, 4 * 12)) {
            let frames: Vec<RgbImage> = (0..4)
                .map(|f| RgbImage::from_fn(2, 2, |x, y| {
                    let i = f * 12 + ((y * 2 + x) * 3) as usize;
                    Rgb([a[i], a[i + 1], a[i + 2]])
                }))
                .collect();
            let d = stack_diffs(&seq_from(frames.clone())).unwrap();
            prop_assert!(d.data.iter().all(|v| (0.0..=1.0).contains(v)));
            for k in 0..3 {
                let same = to_grayscale(&frames[k]) == to_grayscale(&frames[k + 1]);
                prop_assert_eq!(same, d.channel(k).iter().all(|&v| v == 0.0));
            }
        }
    }
}
