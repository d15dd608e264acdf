//! Masked pixel-reconstruction pretraining of the target encoder.

use serde::{Deserialize, Serialize};

use super::{lr_at, AdamW, AdamWConfig, PreparedSample, StreamSampler, TrainError};
use crate::autograd::{Graph, Tensor};
use crate::model::init::{trunc_normal, zeros};
use crate::model::{TargetEncoder, VitConfig};
use crate::preprocess::sample_mask;
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub mask_ratio: f64,
    pub weight_decay: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch: 16,
            base_lr: 1e-3,
            warmup_epochs: 1,
            mask_ratio: 0.75,
            weight_decay: 0.05,
            init_std: 0.02,
            seed: 0,
        }
    }
}

/// Mean masked-pixel MSE per update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub losses: Vec<f64>,
}

/// Trains the encoder plus a linear pixel head to reconstruct masked
/// patches, then drops the head and returns the encoder.
pub fn pretrain_target(
    cfg: &VitConfig,
    pcfg: &PretrainConfig,
    images: &[PreparedSample],
) -> Result<(TargetEncoder, PretrainLog), TrainError> {
    if images.is_empty() {
        return Err(TrainError::EmptyStream("pretraining"));
    }
    if pcfg.batch == 0 || pcfg.epochs == 0 || pcfg.warmup_epochs > pcfg.epochs {
        return Err(TrainError::Config("pretraining needs batch > 0 and 0 <= warmup <= epochs > 0".into()));
    }
    if !(pcfg.mask_ratio > 0.0 && pcfg.mask_ratio <= 1.0) {
        return Err(TrainError::Config(format!("mask_ratio {} outside (0, 1]", pcfg.mask_ratio)));
    }
    let mut enc = TargetEncoder::random(cfg, pcfg.init_std, pcfg.seed)?;
    let mut store = enc.params.clone();
    let mut rng = stream_rng(pcfg.seed, "init/pretrain-head");
    let head_w = store.insert("pretrain.head.w", trunc_normal(cfg.embed_dim, cfg.patch_dim(), pcfg.init_std, &mut rng));
    let head_b = store.insert("pretrain.head.b", zeros(1, cfg.patch_dim()));

    let mut opt = AdamW::new(
        &store,
        AdamWConfig {
            weight_decay: pcfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let per_epoch = images.len().div_ceil(pcfg.batch);
    let (total, warmup) = (per_epoch * pcfg.epochs, per_epoch * pcfg.warmup_epochs);
    let mut sampler = StreamSampler::new(images.len(), stream_rng(pcfg.seed, "pretrain/batch"));
    let mut mask_rng = stream_rng(pcfg.seed, "pretrain/mask");
    let n = cfg.num_patches();
    let mut log = PretrainLog::default();

    for step in 0..total {
        let idx = sampler.next_batch(pcfg.batch);
        let mut g = Graph::new();
        let b = g.bind(&store, true);
        let mut sum = None;
        let mut count = 0usize;
        for &i in &idx {
            let diff = images[i].diff();
            let patches = crate::preprocess::patchify(&diff, cfg.patch_size)?.patches;
            let mask = sample_mask(n, pcfg.mask_ratio, &mut mask_rng)?;
            let mut target = Tensor::zeros(mask.len(), cfg.patch_dim());
            for (r, &p) in mask.masked_indices.iter().enumerate() {
                target.row_mut(r).copy_from_slice(patches.row(p));
            }
            let x = g.input(patches);
            let tokens = enc.encoder.forward(&mut g, &b, x, Some(&mask.masked_indices))?;
            let picked = g.gather_rows(tokens, &mask.masked_indices);
            let pred = g.linear(picked, b.get(head_w), b.get(head_b));
            let se = g.squared_error(pred, target);
            count += mask.len() * cfg.patch_dim();
            sum = Some(match sum {
                None => se,
                Some(s) => g.add(s, se),
            });
        }
        let loss = g.scale(sum.expect("nonempty batch"), 1.0 / count as f64);
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(TrainError::Divergence {
                step,
                what: "non-finite pretraining loss".into(),
            });
        }
        let grads = g.backward(loss, &store);
        opt.step(&mut store, &grads, lr_at(step, total, warmup, pcfg.base_lr)?);
        log.losses.push(value);
    }

    let ids: Vec<_> = enc.params.ids().collect();
    for id in ids {
        let name = enc.params.name(id).to_string();
        let trained = store.id(&name).expect("encoder tensors live in the pretraining store");
        enc.params.set(id, store.get(trained).clone());
    }
    Ok((enc, log))
}
