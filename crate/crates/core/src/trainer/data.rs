//! Preprocessed training streams and their samplers.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{TrainConfig, TrainError};
use crate::autograd::Tensor;
use crate::datagen::{Annotation, FrameSequence, Split, TitleDataset};
use crate::model::{ModelConfig, ModelError};
use crate::preprocess::{stack_diffs, DiffImage, Sample};
use crate::rng::stream_rng;

/// Difference image stored as bytes plus its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub sequence_id: String,
    pub title_id: String,
    pub width: usize,
    pub height: usize,
    pixels: Vec<u8>,
    pub annotations: Vec<Annotation>,
}

impl PreparedSample {
    pub fn from_sequence(seq: &FrameSequence) -> Result<Self, TrainError> {
        let diff = stack_diffs(seq)?;
        Ok(Self {
            sequence_id: seq.sequence_id.clone(),
            title_id: seq.title_id.clone(),
            width: diff.width,
            height: diff.height,
            pixels: diff.to_bytes(),
            annotations: seq.annotations.clone(),
        })
    }

    pub fn diff(&self) -> DiffImage {
        DiffImage {
            width: self.width,
            height: self.height,
            data: self.pixels.iter().map(|&b| b as f64 / 255.0).collect(),
            source_sequence_id: self.sequence_id.clone(),
            title_id: self.title_id.clone(),
        }
    }

    pub fn sample(&self) -> Sample {
        Sample {
            diff: self.diff(),
            annotations: self.annotations.clone(),
        }
    }

    pub fn patches(&self, cfg: &ModelConfig) -> Result<Tensor, ModelError> {
        cfg.input_patches(&self.diff())
    }
}

pub fn prepare_all(seqs: &[FrameSequence]) -> Result<Vec<PreparedSample>, TrainError> {
    seqs.par_iter().map(PreparedSample::from_sequence).collect()
}

/// Sorted uniform subset of `round(fraction * n)` indices of `0..n`.
pub fn subsample_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>, TrainError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TrainError::Config(format!("labeled fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok((0..n).collect());
    }
    let keep = (fraction * n as f64).round() as usize;
    let mut rng = stream_rng(seed, "subsample/labeled");
    let mut idx = sample(&mut rng, n, keep).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Uniform subset of `round(fraction * n)` training sequences, kept in
/// their original order. Other splits are untouched.
pub fn subsample_labeled(dataset: &TitleDataset, fraction: f64, seed: u64) -> Result<TitleDataset, TrainError> {
    let train = dataset.split(Split::Train);
    let idx = subsample_indices(train.len(), fraction, seed)?;
    let mut out = dataset.clone();
    *out.split_mut(Split::Train) = idx.into_iter().map(|i| train[i].clone()).collect();
    Ok(out)
}

/// Every split of one title, preprocessed.
#[derive(Clone, Debug)]
pub struct PreparedTitle {
    pub title_id: String,
    pub train: Vec<PreparedSample>,
    pub validation: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
    pub unlabeled: Vec<PreparedSample>,
}

impl PreparedTitle {
    pub fn new(dataset: &TitleDataset) -> Result<Self, TrainError> {
        Ok(Self {
            title_id: dataset.title_id().to_string(),
            train: prepare_all(dataset.split(Split::Train))?,
            validation: prepare_all(dataset.split(Split::Validation))?,
            test: prepare_all(dataset.split(Split::Test))?,
            unlabeled: prepare_all(dataset.split(Split::Unlabeled))?,
        })
    }

    pub fn split(&self, split: Split) -> &[PreparedSample] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
            Split::Unlabeled => &self.unlabeled,
        }
    }
}

/// All inputs of one training run, preprocessed.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub downstream_title: String,
    pub downstream: Vec<PreparedSample>,
    pub validation: Vec<PreparedSample>,
    pub cotitle: Vec<PreparedSample>,
    pub unlabeled: Vec<PreparedSample>,
}

impl TrainData {
    /// Applies the labeled fraction to the downstream training split, pools
    /// co-title training splits, and pools the unlabeled splits of every
    /// title (plus unlabeled copies of training images when configured).
    /// Disabled streams are left empty.
    pub fn build(downstream: &TitleDataset, co_titles: &[TitleDataset], cfg: &TrainConfig) -> Result<Self, TrainError> {
        let co: Vec<PreparedTitle> = co_titles.iter().map(PreparedTitle::new).collect::<Result<_, _>>()?;
        Self::from_prepared(&PreparedTitle::new(downstream)?, &co, cfg)
    }

    pub fn from_prepared(downstream: &PreparedTitle, co_titles: &[PreparedTitle], cfg: &TrainConfig) -> Result<Self, TrainError> {
        let keep = subsample_indices(downstream.train.len(), cfg.labeled_fraction, cfg.seed)?;
        let train: Vec<PreparedSample> = keep.into_iter().map(|i| downstream.train[i].clone()).collect();
        let mut cotitle = Vec::new();
        if cfg.csl_enabled {
            for t in co_titles {
                cotitle.extend(t.train.iter().cloned());
            }
        }
        let mut unlabeled = Vec::new();
        if cfg.ssl_enabled {
            for t in std::iter::once(downstream).chain(co_titles) {
                unlabeled.extend(t.unlabeled.iter().cloned());
            }
            if cfg.include_labeled_in_pool {
                let labeled = train.iter().chain(co_titles.iter().flat_map(|t| &t.train));
                unlabeled.extend(labeled.map(|s| PreparedSample {
                    annotations: Vec::new(),
                    ..s.clone()
                }));
            }
        }
        Ok(Self {
            downstream_title: downstream.title_id.clone(),
            downstream: train,
            validation: downstream.validation.clone(),
            cotitle,
            unlabeled,
        })
    }
}

/// Cycles through `0..len` in freshly shuffled passes; every index appears
/// exactly once per pass.
#[derive(Clone, Debug)]
pub struct StreamSampler {
    len: usize,
    order: Vec<usize>,
    pos: usize,
    passes: usize,
    rng: ChaCha8Rng,
}

impl StreamSampler {
    pub fn new(len: usize, rng: ChaCha8Rng) -> Self {
        Self {
            len,
            order: Vec::new(),
            pos: 0,
            passes: 0,
            rng,
        }
    }

    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        if self.len == 0 {
            return out;
        }
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order = (0..self.len).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
                self.passes += 1;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Indices of one micro-batch in each stream.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TriBatch {
    pub downstream: Vec<usize>,
    pub cotitle: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Draws downstream micro-batches epoch by epoch and pairs each with a
/// co-title and an unlabeled batch from independently cycling streams.
#[derive(Clone, Debug)]
pub struct TriBatchSampler {
    batch: usize,
    n_down: usize,
    down_rng: ChaCha8Rng,
    co: Option<StreamSampler>,
    unl: Option<StreamSampler>,
}

impl TriBatchSampler {
    pub fn new(data: &TrainData, cfg: &TrainConfig) -> Result<Self, TrainError> {
        if data.downstream.is_empty() {
            return Err(TrainError::EmptyStream("downstream training"));
        }
        if cfg.csl_enabled && data.cotitle.is_empty() {
            return Err(TrainError::EmptyStream("co-title"));
        }
        if cfg.ssl_enabled && data.unlabeled.is_empty() {
            return Err(TrainError::EmptyStream("unlabeled"));
        }
        Ok(Self {
            batch: cfg.per_step_batch,
            n_down: data.downstream.len(),
            down_rng: stream_rng(cfg.seed, "batch/downstream"),
            co: cfg
                .csl_enabled
                .then(|| StreamSampler::new(data.cotitle.len(), stream_rng(cfg.seed, "batch/cotitle"))),
            unl: cfg
                .ssl_enabled
                .then(|| StreamSampler::new(data.unlabeled.len(), stream_rng(cfg.seed, "batch/unlabeled"))),
        })
    }

    pub fn micro_batches_per_epoch(&self) -> usize {
        self.n_down.div_ceil(self.batch)
    }

    /// Micro-batches of the next downstream epoch.
    pub fn epoch(&mut self) -> Vec<TriBatch> {
        let mut order: Vec<usize> = (0..self.n_down).collect();
        order.shuffle(&mut self.down_rng);
        order
            .chunks(self.batch)
            .map(|chunk| self.sample_tri_batch(chunk.to_vec()))
            .collect()
    }

    /// Pairs a downstream batch with the next co-title and unlabeled
    /// batches; disabled streams stay empty.
    pub fn sample_tri_batch(&mut self, downstream: Vec<usize>) -> TriBatch {
        let n = self.batch;
        TriBatch {
            downstream,
            cotitle: self.co.as_mut().map(|s| s.next_batch(n)).unwrap_or_default(),
            unlabeled: self.unl.as_mut().map(|s| s.next_batch(n)).unwrap_or_default(),
        }
    }
}
