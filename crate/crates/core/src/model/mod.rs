//! Student encoder, frozen target encoder, mask decoder and the two-stage
//! detector.

pub mod boxes;
pub mod checkpoint;
pub mod decoder;
pub mod detector;
pub mod init;
pub mod vit;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{sigmoid, Bound, Graph, NodeId, ParamStore, Tensor};
use crate::bbox::BoundingBox;
use crate::datagen::BugClass;
use crate::preprocess::{patchify, DiffImage, MaskSpec};
use crate::rng::stream_rng;

pub use boxes::{anchor_grid, decode_box_deltas, encode_box_deltas, nms, BoxDeltas};
pub use checkpoint::{params_checksum, Checkpoint, CheckpointKind, CheckpointManifest};
pub use decoder::MaskDecoder;
pub use detector::{anchors, roi_pool, select_proposals, Proposal, RoiHead, RoiOutput, RpnHead, RpnOutput};
pub use vit::{VitConfig, VitEncoder};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: String, got: String },
    #[error("mask index out of range")]
    MaskIndex,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("degenerate anchor (zero area)")]
    DegenerateAnchor,
    #[error("degenerate box")]
    DegenerateBox,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub student: VitConfig,
    pub target: VitConfig,
    pub num_classes: usize,
    /// Side of the square anchor; other ratios keep its area.
    pub anchor_size: f64,
    /// Height/width ratios.
    pub anchor_ratios: Vec<f64>,
    pub rpn_pre_nms_top_n: usize,
    pub rpn_nms_iou: f64,
    /// Proposals passed to the box head during training.
    pub train_proposals: usize,
    /// Proposals passed to the box head at inference.
    pub test_proposals: usize,
    pub min_box_size: f64,
    /// Side of the bilinear sample grid per proposal.
    pub roi_samples: usize,
    pub head_hidden: usize,
    pub decoder_heads: usize,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            student: VitConfig::default(),
            target: VitConfig::default(),
            num_classes: BugClass::ALL.len(),
            anchor_size: 12.0,
            anchor_ratios: vec![1.0, 0.5, 2.0],
            rpn_pre_nms_top_n: 120,
            rpn_nms_iou: 0.7,
            train_proposals: 32,
            test_proposals: 32,
            min_box_size: 1.0,
            roi_samples: 3,
            head_hidden: 64,
            decoder_heads: 4,
            nms_iou: 0.5,
            score_threshold: 0.05,
            max_detections: 20,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// 16x16 inputs, P=4, D=16, two blocks, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            student: VitConfig::tiny(),
            target: VitConfig::tiny(),
            anchor_size: 8.0,
            rpn_pre_nms_top_n: 40,
            train_proposals: 6,
            test_proposals: 6,
            head_hidden: 16,
            decoder_heads: 2,
            ..Self::default()
        }
    }

    /// Same layout with `width` and `depth` applied to both encoders.
    pub fn with_width(mut self, width: usize, depth: usize, heads: usize) -> Self {
        for v in [&mut self.student, &mut self.target] {
            v.embed_dim = width;
            v.depth = depth;
            v.num_heads = heads;
        }
        self.decoder_heads = heads;
        self.head_hidden = width;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.student.validate()?;
        self.target.validate()?;
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if (self.student.input_height, self.student.input_width, self.student.patch_size)
            != (self.target.input_height, self.target.input_width, self.target.patch_size)
        {
            return bad("student and target must share input size and patch size");
        }
        if self.num_classes == 0 || self.anchor_ratios.is_empty() || self.roi_samples == 0 {
            return bad("num_classes, anchor_ratios and roi_samples must be nonempty");
        }
        if !(self.anchor_size > 0.0) || self.anchor_ratios.iter().any(|r| !(*r > 0.0)) {
            return bad("anchor sizes must be positive");
        }
        if self.train_proposals == 0 || self.test_proposals == 0 || self.max_detections == 0 {
            return bad("proposal and detection caps must be positive");
        }
        if self.target.embed_dim % self.decoder_heads != 0 {
            return bad("target width not divisible by decoder_heads");
        }
        for t in [self.rpn_nms_iou, self.nms_iou] {
            if !(0.0..=1.0).contains(&t) {
                return bad("IoU thresholds must lie in [0, 1]");
            }
        }
        Ok(())
    }

    /// Network input for `diff`: `N x patch_dim` patches.
    pub fn input_patches(&self, diff: &DiffImage) -> Result<Tensor, ModelError> {
        input_patches(&self.student, diff)
    }
}

pub(crate) fn input_patches(cfg: &VitConfig, diff: &DiffImage) -> Result<Tensor, ModelError> {
    if (diff.height, diff.width) != (cfg.input_height, cfg.input_width) {
        return Err(ModelError::Dimension {
            expected: format!("{}x{}", cfg.input_width, cfg.input_height),
            got: format!("{}x{}", diff.width, diff.height),
        });
    }
    let grid = patchify(diff, cfg.patch_size).map_err(|e| ModelError::Config(e.to_string()))?;
    Ok(grid.patches)
}

/// One embedding per patch in patch order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub tokens: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class: BugClass,
    pub confidence: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectorOutput {
    pub proposals: Vec<Proposal>,
    /// Sorted by descending confidence.
    pub detections: Vec<Detection>,
}

/// Trainable parameters: student encoder, RPN, box head and mask decoder
/// share one store.
#[derive(Clone, Debug)]
pub struct CftModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub student: VitEncoder,
    pub rpn: RpnHead,
    pub roi: RoiHead,
    pub decoder: MaskDecoder,
    pub seed: u64,
}

impl CftModel {
    /// Detector parameters are drawn from the `detector` stream and the
    /// decoder from its own stream, so both are independent of each other.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = stream_rng(seed, "init/detector");
        let student = VitEncoder::register(&mut params, "student", &cfg.student, cfg.init_std, &mut rng);
        let rpn = RpnHead::register(&mut params, &cfg, &mut rng);
        let roi = RoiHead::register(&mut params, &cfg, &mut rng);
        let mut rng = stream_rng(seed, "init/decoder");
        let decoder = MaskDecoder::register(&mut params, &cfg, &mut rng);
        Ok(Self {
            cfg,
            params,
            student,
            rpn,
            roi,
            decoder,
            seed,
        })
    }

    /// Student tokens for `patches`; `mask` rows use the mask token.
    pub fn student_tokens(&self, g: &mut Graph, b: &Bound, patches: Tensor, mask: Option<&[usize]>) -> Result<NodeId, ModelError> {
        let x = g.input(patches);
        self.student.forward(g, b, x, mask)
    }

    pub fn encode_student(&self, diff: &DiffImage, mask: Option<&MaskSpec>) -> Result<LatentGrid, ModelError> {
        let patches = self.cfg.input_patches(diff)?;
        let mut g = Graph::new();
        let b = g.bind(&self.params, false);
        let t = self.student_tokens(&mut g, &b, patches, mask.map(|m| m.masked_indices.as_slice()))?;
        Ok(LatentGrid { tokens: g.value(t).clone() })
    }

    /// Predicted target latents, one row per masked index in mask order.
    pub fn decode_masked(&self, latents: &LatentGrid, mask: &MaskSpec) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let b = g.bind(&self.params, false);
        let t = g.input(latents.tokens.clone());
        let out = self.decoder.forward(&mut g, &b, t, &mask.masked_indices)?;
        Ok(g.value(out).clone())
    }

    pub fn detect(&self, diff: &DiffImage) -> Result<DetectorOutput, ModelError> {
        let patches = self.cfg.input_patches(diff)?;
        let mut g = Graph::new();
        let b = g.bind(&self.params, false);
        let tokens = self.student_tokens(&mut g, &b, patches, None)?;
        let rpn = self.rpn.forward(&mut g, &b, tokens);
        let anchors = anchors(&self.cfg);
        let proposals = select_proposals(
            &self.cfg,
            &anchors,
            g.value(rpn.logits),
            g.value(rpn.deltas),
            self.cfg.test_proposals,
        );
        if proposals.is_empty() {
            return Ok(DetectorOutput::default());
        }
        let rois: Vec<BoundingBox> = proposals.iter().map(|p| p.bbox).collect();
        let pooled = roi_pool(&mut g, tokens, &rois, &self.cfg);
        let head = self.roi.forward(&mut g, &b, pooled);
        let probs = g.softmax_rows(head.logits);
        let detections = postprocess(&self.cfg, &rois, g.value(probs), g.value(head.deltas));
        Ok(DetectorOutput { proposals, detections })
    }

    pub fn save(&self, dir: &Path, step: u64) -> Result<(), ModelError> {
        let manifest = CheckpointManifest::new(
            CheckpointKind::Cft,
            serde_json::to_value(&self.cfg).expect("config serializes"),
            self.seed,
            step,
        );
        checkpoint::write_checkpoint(dir, manifest, &self.params)
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointManifest), ModelError> {
        let ck = checkpoint::read_checkpoint(dir)?;
        if ck.manifest.kind != CheckpointKind::Cft {
            return Err(ModelError::Checkpoint("not a detector checkpoint".into()));
        }
        let cfg: ModelConfig =
            serde_json::from_value(ck.manifest.config.clone()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut model = Self::new(cfg, ck.manifest.seed)?;
        checkpoint::assign(&mut model.params, ck.params)?;
        Ok((model, ck.manifest))
    }
}

/// Per-class thresholding and NMS over head outputs, capped and sorted.
fn postprocess(cfg: &ModelConfig, rois: &[BoundingBox], probs: &Tensor, deltas: &Tensor) -> Vec<Detection> {
    let (w, h) = (cfg.student.input_width as f64, cfg.student.input_height as f64);
    let boxes: Vec<BoundingBox> = rois
        .iter()
        .enumerate()
        .map(|(i, r)| boxes::decode_clamped(deltas.row(i), r).clip(w, h))
        .collect();
    let mut out = Vec::new();
    for c in 0..cfg.num_classes {
        let class = BugClass::from_index(c).expect("class index in range");
        let mut cand: Vec<(BoundingBox, f64)> = (0..rois.len())
            .map(|i| (boxes[i], probs.at(i, c + 1)))
            .filter(|(b, s)| *s >= cfg.score_threshold && b.width() > 0.0 && b.height() > 0.0)
            .collect();
        cand.sort_by(|a, b| b.1.total_cmp(&a.1));
        let sorted: Vec<BoundingBox> = cand.iter().map(|c| c.0).collect();
        for k in nms(&sorted, cfg.nms_iou) {
            out.push(Detection {
                bbox: cand[k].0,
                class,
                confidence: cand[k].1.clamp(0.0, 1.0),
            });
        }
    }
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    out.truncate(cfg.max_detections);
    out
}

/// Frozen encoder producing reconstruction targets.
#[derive(Clone, Debug)]
pub struct TargetEncoder {
    pub cfg: VitConfig,
    pub params: ParamStore,
    pub encoder: VitEncoder,
    pub seed: u64,
}

impl TargetEncoder {
    /// Randomly initialised encoder; also the starting point of pretraining.
    pub fn random(cfg: &VitConfig, std: f64, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = stream_rng(seed, "init/target");
        let encoder = VitEncoder::register(&mut params, "target", cfg, std, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            params,
            encoder,
            seed,
        })
    }

    pub fn encode_patches(&self, patches: Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let b = g.bind(&self.params, false);
        let x = g.input(patches);
        let t = self.encoder.forward(&mut g, &b, x, None)?;
        Ok(g.value(t).clone())
    }

    /// Always sees the unmasked input.
    pub fn encode_target(&self, diff: &DiffImage) -> Result<LatentGrid, ModelError> {
        let patches = input_patches(&self.cfg, diff)?;
        Ok(LatentGrid {
            tokens: self.encode_patches(patches)?,
        })
    }

    pub fn checksum(&self) -> String {
        params_checksum(&self.params)
    }

    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        let manifest = CheckpointManifest::new(
            CheckpointKind::Target,
            serde_json::to_value(&self.cfg).expect("config serializes"),
            self.seed,
            0,
        );
        checkpoint::write_checkpoint(dir, manifest, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let ck = checkpoint::read_checkpoint(dir)?;
        if ck.manifest.kind != CheckpointKind::Target {
            return Err(ModelError::Checkpoint("not a target-encoder checkpoint".into()));
        }
        let cfg: VitConfig =
            serde_json::from_value(ck.manifest.config.clone()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut enc = Self::random(&cfg, 0.02, ck.manifest.seed)?;
        checkpoint::assign(&mut enc.params, ck.params)?;
        Ok(enc)
    }
}

/// Objectness probability of raw RPN logits.
pub fn objectness(logit: f64) -> f64 {
    sigmoid(logit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::sample_mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_diff(w: usize, h: usize, seed: u64) -> DiffImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DiffImage {
            width: w,
            height: h,
            data: (0..3 * w * h).map(|_| rng.gen_range(0..=255u8) as f64 / 255.0).collect(),
            source_sequence_id: "s".into(),
            title_id: "t".into(),
        }
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig::default().with_width(32, 2, 4)
    }

    #[test]
    fn student_latent_shape() {
        let m = CftModel::new(small_cfg(), 1).unwrap();
        let z = m.encode_student(&random_diff(64, 64, 0), None).unwrap();
        assert_eq!(z.tokens.shape(), (64, 32));
        assert!(z.tokens.is_finite());
    }

    #[test]
    fn empty_mask_is_identity() {
        let m = CftModel::new(ModelConfig::tiny(), 2).unwrap();
        let d = random_diff(16, 16, 1);
        let a = m.encode_student(&d, None).unwrap();
        let b = m.encode_student(&d, Some(&MaskSpec::empty(16))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unmasked_patch_change_propagates_everywhere() {
        let m = CftModel::new(ModelConfig::tiny(), 3).unwrap();
        let d = random_diff(16, 16, 2);
        let mut e = d.clone();
        // patch 0 covers pixels (0..4, 0..4)
        e.data[0] = 1.0 - e.data[0];
        let a = m.encode_student(&d, None).unwrap().tokens;
        let b = m.encode_student(&e, None).unwrap().tokens;
        for r in 0..16 {
            assert_ne!(a.row(r), b.row(r), "token {r} unaffected");
        }
    }

    #[test]
    fn masked_pixels_do_not_matter() {
        let m = CftModel::new(ModelConfig::tiny(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mask = sample_mask(16, 0.75, &mut rng).unwrap();
        let d = random_diff(16, 16, 3);
        let mut e = d.clone();
        for &p in &mask.masked_indices {
            let (py, px) = (p / 4 * 4, p % 4 * 4);
            for c in 0..3 {
                for y in py..py + 4 {
                    for x in px..px + 4 {
                        e.data[c * 256 + y * 16 + x] = rng.gen::<f64>();
                    }
                }
            }
        }
        let a = m.encode_student(&d, Some(&mask)).unwrap();
        let b = m.encode_student(&e, Some(&mask)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let m = CftModel::new(ModelConfig::tiny(), 1).unwrap();
        assert!(matches!(m.encode_student(&random_diff(32, 16, 0), None), Err(ModelError::Dimension { .. })));
        assert!(matches!(m.detect(&random_diff(8, 8, 0)), Err(ModelError::Dimension { .. })));
    }

    #[test]
    fn decoder_shape_and_permutation() {
        let cfg = ModelConfig::default().with_width(32, 1, 4);
        let mut cfg196 = cfg.clone();
        for v in [&mut cfg196.student, &mut cfg196.target] {
            v.input_height = 112;
            v.input_width = 112;
        }
        let m = CftModel::new(cfg196, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = sample_mask(196, 0.75, &mut rng).unwrap();
        let z = m.encode_student(&random_diff(112, 112, 0), Some(&mask)).unwrap();
        let out = m.decode_masked(&z, &mask).unwrap();
        assert_eq!(out.shape(), (147, 32));

        let m = CftModel::new(cfg, 2).unwrap();
        let z = m.encode_student(&random_diff(64, 64, 1), None).unwrap();
        let idx = vec![3, 10, 40, 7];
        let fwd = m.decode_masked(&z, &MaskSpec { masked_indices: idx.clone(), num_patches: 64 }).unwrap();
        let rev: Vec<usize> = idx.iter().rev().copied().collect();
        let bwd = m.decode_masked(&z, &MaskSpec { masked_indices: rev, num_patches: 64 }).unwrap();
        for i in 0..4 {
            assert_eq!(fwd.row(i), bwd.row(3 - i));
        }
        let bad = MaskSpec { masked_indices: vec![64], num_patches: 64 };
        assert!(matches!(m.decode_masked(&z, &bad), Err(ModelError::MaskIndex)));
    }

    #[test]
    fn zero_decoder_outputs_its_bias() {
        let mut m = CftModel::new(ModelConfig::tiny(), 5).unwrap();
        let ids: Vec<_> = m.params.iter().filter(|(_, n, _)| n.starts_with("decoder.")).map(|(id, _, _)| id).collect();
        for id in ids {
            let t = m.params.get(id);
            m.params.set(id, Tensor::zeros(t.rows, t.cols));
        }
        let bias: Vec<f64> = (0..16).map(|i| i as f64 * 0.1 - 0.3).collect();
        m.params.set(m.decoder.out_bias(), Tensor::from_vec(1, 16, bias.clone()));
        let z = m.encode_student(&random_diff(16, 16, 9), None).unwrap();
        let out = m.decode_masked(&z, &MaskSpec::from_indices(vec![0, 5, 9], 16)).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), bias.as_slice());
        }
    }

    #[test]
    fn target_is_deterministic_and_checkpoint_dependent() {
        let cfg = VitConfig::tiny();
        let a = TargetEncoder::random(&cfg, 0.02, 1).unwrap();
        let b = TargetEncoder::random(&cfg, 0.02, 2).unwrap();
        let d = random_diff(16, 16, 4);
        assert_eq!(a.encode_target(&d).unwrap(), a.encode_target(&d).unwrap());
        let dir = tempfile::tempdir().unwrap();
        a.save(&dir.path().join("a")).unwrap();
        b.save(&dir.path().join("b")).unwrap();
        let la = TargetEncoder::load(&dir.path().join("a")).unwrap();
        let lb = TargetEncoder::load(&dir.path().join("b")).unwrap();
        assert_eq!(la.checksum(), a.checksum());
        assert_eq!(la.encode_target(&d).unwrap(), a.encode_target(&d).unwrap());
        assert_ne!(la.encode_target(&d).unwrap(), lb.encode_target(&d).unwrap());
    }

    #[test]
    fn untrained_detector_output_is_well_formed() {
        let cfg = small_cfg();
        for seed in 0..4 {
            let m = CftModel::new(cfg.clone(), seed).unwrap();
            let out = m.detect(&random_diff(64, 64, seed)).unwrap();
            check_output(&cfg, &out);
        }
    }

    #[test]
    fn perturbed_detector_output_is_well_formed() {
        // large random weights push scores to the extremes
        let cfg = small_cfg();
        let mut m = CftModel::new(cfg.clone(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ids: Vec<_> = m.params.ids().collect();
        for id in ids {
            let t = m.params.get_mut(id);
            for v in &mut t.data {
                *v += rng.gen_range(-1.0..1.0);
            }
        }
        for s in 0..3 {
            check_output(&cfg, &m.detect(&random_diff(64, 64, 50 + s)).unwrap());
        }
    }

    fn check_output(cfg: &ModelConfig, out: &DetectorOutput) {
        assert!(out.detections.len() <= cfg.max_detections);
        for p in &out.proposals {
            assert!((0.0..=1.0).contains(&p.objectness));
            assert!(p.bbox.inside(64.0, 64.0));
        }
        for d in &out.detections {
            assert!((0.0..=1.0).contains(&d.confidence));
            assert!(d.bbox.inside(64.0, 64.0));
        }
        for w in out.detections.windows(2) {
            assert!(w[0].confidence >= w[1].confidence);
        }
        for (i, a) in out.detections.iter().enumerate() {
            for b in &out.detections[i + 1..] {
                if a.class == b.class {
                    assert!(crate::bbox::iou(&a.bbox, &b.bbox) <= cfg.nms_iou);
                }
            }
        }
    }

    #[test]
    fn model_checkpoint_round_trip() {
        let m = CftModel::new(ModelConfig::tiny(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), 12).unwrap();
        let (l, manifest) = CftModel::load(dir.path()).unwrap();
        assert_eq!(manifest.step, 12);
        assert_eq!(params_checksum(&l.params), params_checksum(&m.params));
        assert!(TargetEncoder::load(dir.path()).is_err());
    }
}
