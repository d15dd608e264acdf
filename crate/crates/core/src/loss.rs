//! Detection loss with anchor assignment, co-supervised and total loss
//! fusion, and the masked latent reconstruction error.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Bound, Graph, NodeId, Tensor};
use crate::bbox::{iou, BoundingBox};
use crate::datagen::Annotation;
use crate::model::{anchors, encode_box_deltas, roi_pool, select_proposals, BoxDeltas, CftModel, ModelError};
use crate::preprocess::MaskSpec;

pub use crate::autograd::smooth_l1;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("empty anchor list")]
    EmptyAnchors,
    #[error("pos_iou {pos} must exceed neg_iou {neg}")]
    Thresholds { pos: f64, neg: f64 },
    #[error("misaligned inputs: {what} has {got} rows, expected {expected}")]
    Misaligned { what: &'static str, expected: usize, got: usize },
    #[error("no sampled anchors (N_cls = 0)")]
    NoSampledAnchors,
    #[error("{name} must be non-negative, got {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("SSL step needs a nonempty mask")]
    EmptyMask,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub const POSITIVE: i8 = 1;
pub const NEGATIVE: i8 = 0;
pub const IGNORE: i8 = -1;

/// Anchors with labels `p*`, regression targets `t*` and the normalizers.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorBatch {
    pub anchors: Vec<BoundingBox>,
    pub labels: Vec<i8>,
    /// Best-IoU ground truth per anchor (set for positives).
    pub matched_gt: Vec<Option<usize>>,
    pub targets: Vec<Option<BoxDeltas>>,
    pub n_cls: usize,
    pub n_loc: usize,
}

impl AnchorBatch {
    fn recount(&mut self) {
        self.n_cls = self.labels.iter().filter(|&&l| l != IGNORE).count();
        self.n_loc = self.labels.iter().filter(|&&l| l == POSITIVE).count();
    }

    fn drop_anchor(&mut self, i: usize) {
        self.labels[i] = IGNORE;
        self.targets[i] = None;
        self.matched_gt[i] = None;
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.labels.len()).filter(|&i| self.labels[i] == POSITIVE)
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.labels.len()).filter(|&i| self.labels[i] == NEGATIVE)
    }

    /// Keeps only anchors at `keep` (in that order).
    pub fn select(&self, keep: &[usize]) -> Self {
        let mut out = Self {
            anchors: keep.iter().map(|&i| self.anchors[i]).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            matched_gt: keep.iter().map(|&i| self.matched_gt[i]).collect(),
            targets: keep.iter().map(|&i| self.targets[i]).collect(),
            n_cls: 0,
            n_loc: 0,
        };
        out.recount();
        out
    }
}

/// Labels anchors against ground truth. Positive: IoU >= `pos_iou` with some
/// gt, or the highest-IoU anchor of some gt. Negative: max IoU < `neg_iou`.
/// Everything else is ignored.
pub fn assign_anchors(anchors: &[BoundingBox], gt: &[BoundingBox], pos_iou: f64, neg_iou: f64) -> Result<AnchorBatch, LossError> {
    if anchors.is_empty() {
        return Err(LossError::EmptyAnchors);
    }
    if !(pos_iou > neg_iou) {
        return Err(LossError::Thresholds { pos: pos_iou, neg: neg_iou });
    }
    let n = anchors.len();
    let mut best = vec![(0.0f64, None::<usize>); n];
    let mut gt_best = vec![0.0f64; gt.len()];
    let overlaps: Vec<Vec<f64>> = anchors.iter().map(|a| gt.iter().map(|g| iou(a, g)).collect()).collect();
    for (i, row) in overlaps.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if best[i].1.is_none() || v > best[i].0 {
                best[i] = (v, Some(j));
            }
            gt_best[j] = gt_best[j].max(v);
        }
    }
    let mut labels = vec![IGNORE; n];
    for i in 0..n {
        let (v, _) = best[i];
        if gt.is_empty() || v < neg_iou {
            labels[i] = NEGATIVE;
        }
        if !gt.is_empty() && v >= pos_iou {
            labels[i] = POSITIVE;
        }
    }
    for (j, &gb) in gt_best.iter().enumerate() {
        if gb <= 0.0 {
            continue;
        }
        for i in 0..n {
            if overlaps[i][j] == gb {
                labels[i] = POSITIVE;
            }
        }
    }
    let mut matched_gt = vec![None; n];
    let mut targets = vec![None; n];
    for i in 0..n {
        if labels[i] == POSITIVE {
            let j = best[i].1.expect("positive anchors overlap a gt");
            matched_gt[i] = Some(j);
            targets[i] = Some(encode_box_deltas(&anchors[i], &gt[j])?);
        }
    }
    let mut batch = AnchorBatch {
        anchors: anchors.to_vec(),
        labels,
        matched_gt,
        targets,
        n_cls: 0,
        n_loc: 0,
    };
    batch.recount();
    Ok(batch)
}

/// Samples up to `size` anchors, at most `size * positive_fraction` of them
/// positive, padding with negatives. Unsampled anchors become ignored.
pub fn subsample<R: Rng + ?Sized>(batch: &mut AnchorBatch, size: usize, positive_fraction: f64, rng: &mut R) {
    let pos: Vec<usize> = batch.positives().collect();
    let neg: Vec<usize> = batch.negatives().collect();
    let max_pos = ((size as f64) * positive_fraction).round() as usize;
    let keep_pos = pos.len().min(max_pos);
    let keep_neg = neg.len().min(size - keep_pos);
    for (group, keep) in [(pos, keep_pos), (neg, keep_neg)] {
        if keep == group.len() {
            continue;
        }
        let chosen = sample(rng, group.len(), keep);
        let mut kept = vec![false; group.len()];
        for c in chosen.iter() {
            kept[c] = true;
        }
        for (k, &i) in group.iter().enumerate() {
            if !kept[k] {
                batch.drop_anchor(i);
            }
        }
    }
    batch.recount();
}

/// Terms of one detection stage.
#[derive(Clone, Copy, Debug)]
pub struct StageLoss {
    pub cls: NodeId,
    pub loc: NodeId,
    pub total: NodeId,
}

/// `(1/N_cls) sum CE(p_i, p_i*) + lambda (1/N_loc) sum p_i* smoothL1(t_i - t_i*)`.
///
/// With `classes = None` the logits are a single objectness column scored
/// with binary cross-entropy; otherwise `classes[i]` is the softmax target of
/// anchor `i` (0 for background).
pub fn detection_loss(
    g: &mut Graph,
    logits: NodeId,
    deltas: NodeId,
    batch: &AnchorBatch,
    classes: Option<&[usize]>,
    lambda: f64,
) -> Result<StageLoss, LossError> {
    let n = batch.anchors.len();
    for (what, got) in [("logits", g.value(logits).rows), ("deltas", g.value(deltas).rows)] {
        if got != n {
            return Err(LossError::Misaligned { what, expected: n, got });
        }
    }
    if g.value(deltas).cols != 4 {
        return Err(LossError::Misaligned {
            what: "delta columns",
            expected: 4,
            got: g.value(deltas).cols,
        });
    }
    if batch.n_cls == 0 {
        return Err(LossError::NoSampledAnchors);
    }
    if lambda < 0.0 {
        return Err(LossError::NegativeWeight { name: "lambda", value: lambda });
    }
    let w_cls = 1.0 / batch.n_cls as f64;
    let weights: Vec<f64> = batch.labels.iter().map(|&l| if l == IGNORE { 0.0 } else { w_cls }).collect();
    let cls = match classes {
        None => {
            let targets = batch.labels.iter().map(|&l| if l == POSITIVE { 1.0 } else { 0.0 }).collect();
            g.bce_logits(logits, targets, weights)
        }
        Some(c) => {
            if c.len() != n {
                return Err(LossError::Misaligned {
                    what: "classes",
                    expected: n,
                    got: c.len(),
                });
            }
            g.softmax_ce(logits, c.to_vec(), weights)
        }
    };
    let mut target = Tensor::zeros(n, 4);
    let mut row_w = vec![0.0; n];
    let w_loc = if batch.n_loc > 0 { 1.0 / batch.n_loc as f64 } else { 0.0 };
    for i in 0..n {
        if let (POSITIVE, Some(t)) = (batch.labels[i], batch.targets[i]) {
            target.row_mut(i).copy_from_slice(&t.to_array());
            row_w[i] = w_loc;
        }
    }
    let loc = g.smooth_l1(deltas, target, row_w);
    let weighted = g.scale(loc, lambda);
    let total = g.add(cls, weighted);
    Ok(StageLoss { cls, loc, total })
}

fn check_weight(name: &'static str, value: f64) -> Result<(), LossError> {
    if value < 0.0 || value.is_nan() {
        return Err(LossError::NegativeWeight { name, value });
    }
    Ok(())
}

/// `l_down + alpha * l_co`.
pub fn co_supervised_loss(l_down: f64, l_co: f64, alpha: f64) -> Result<f64, LossError> {
    check_weight("alpha", alpha)?;
    Ok(l_down + alpha * l_co)
}

/// `l_co_sup + beta * mse`.
pub fn total_loss(l_co_sup: f64, mse: f64, beta: f64) -> Result<f64, LossError> {
    check_weight("beta", beta)?;
    Ok(l_co_sup + beta * mse)
}

/// Graph form of [`co_supervised_loss`]; the value is computed identically.
pub fn co_supervised_node(g: &mut Graph, l_down: NodeId, l_co: NodeId, alpha: f64) -> Result<NodeId, LossError> {
    check_weight("alpha", alpha)?;
    let s = g.scale(l_co, alpha);
    Ok(g.add(l_down, s))
}

/// Graph form of [`total_loss`].
pub fn total_node(g: &mut Graph, l_co_sup: NodeId, mse: NodeId, beta: f64) -> Result<NodeId, LossError> {
    check_weight("beta", beta)?;
    let s = g.scale(mse, beta);
    Ok(g.add(l_co_sup, s))
}

/// Mean squared error between predicted rows and the target rows selected by
/// `mask`, in mask order. Unmasked target rows are never read.
pub fn ssl_loss(g: &mut Graph, predicted: NodeId, target_latents: &Tensor, mask: &MaskSpec) -> Result<NodeId, LossError> {
    let m = mask.masked_indices.len();
    if m == 0 {
        return Err(LossError::EmptyMask);
    }
    let p = g.value(predicted);
    if p.rows != m {
        return Err(LossError::Misaligned {
            what: "predicted latents",
            expected: m,
            got: p.rows,
        });
    }
    if p.cols != target_latents.cols {
        return Err(LossError::Misaligned {
            what: "latent width",
            expected: target_latents.cols,
            got: p.cols,
        });
    }
    if mask.masked_indices.iter().any(|&i| i >= target_latents.rows) {
        return Err(ModelError::MaskIndex.into());
    }
    let d = target_latents.cols;
    let mut picked = Tensor::zeros(m, d);
    for (r, &i) in mask.masked_indices.iter().enumerate() {
        picked.row_mut(r).copy_from_slice(target_latents.row(i));
    }
    let se = g.squared_error(predicted, picked);
    Ok(g.scale(se, 1.0 / (m * d) as f64))
}

/// Assignment and sampling policy for both detector stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch: usize,
    pub head_pos_iou: f64,
    pub head_neg_iou: f64,
    pub head_batch: usize,
    pub positive_fraction: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 64,
            head_pos_iou: 0.5,
            head_neg_iou: 0.3,
            head_batch: 32,
            positive_fraction: 0.5,
        }
    }
}

/// Sampled anchors and proposals of one image, fixed for one step so the
/// loss is a smooth function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlan {
    pub rpn: AnchorBatch,
    pub head: Option<(AnchorBatch, Vec<usize>)>,
}

/// Per-image detection loss nodes.
#[derive(Clone, Copy, Debug)]
pub struct ImageLoss {
    pub rpn: StageLoss,
    pub head: Option<StageLoss>,
    pub total: NodeId,
}

/// Eq. 1 summed over the RPN and the box head for one image. Without a
/// `plan`, anchors and proposals are assigned and sampled with `rng`; the
/// plan used is returned so the same function can be re-evaluated.
#[allow(clippy::too_many_arguments)]
pub fn image_detection_loss<R: Rng + ?Sized>(
    model: &CftModel,
    g: &mut Graph,
    b: &Bound,
    patches: Tensor,
    gts: &[Annotation],
    lambda: f64,
    lcfg: &LossConfig,
    plan: Option<&ImagePlan>,
    rng: &mut R,
) -> Result<(ImageLoss, ImagePlan), LossError> {
    let cfg = &model.cfg;
    let tokens = model.student_tokens(g, b, patches, None)?;
    let rpn = model.rpn.forward(g, b, tokens);
    let gt_boxes: Vec<BoundingBox> = gts.iter().map(|a| a.bbox).collect();
    let plan = match plan {
        Some(p) => p.clone(),
        None => {
            let all = anchors(cfg);
            let mut rpn_batch = assign_anchors(&all, &gt_boxes, lcfg.rpn_pos_iou, lcfg.rpn_neg_iou)?;
            subsample(&mut rpn_batch, lcfg.rpn_batch, lcfg.positive_fraction, rng);
            let mut rois: Vec<BoundingBox> =
                select_proposals(cfg, &all, g.value(rpn.logits), g.value(rpn.deltas), cfg.train_proposals)
                    .into_iter()
                    .map(|p| p.bbox)
                    .collect();
            rois.extend(gt_boxes.iter().copied());
            let head = if rois.is_empty() {
                None
            } else {
                let mut hb = assign_anchors(&rois, &gt_boxes, lcfg.head_pos_iou, lcfg.head_neg_iou)?;
                subsample(&mut hb, lcfg.head_batch, lcfg.positive_fraction, rng);
                let keep: Vec<usize> = (0..hb.labels.len()).filter(|&i| hb.labels[i] != IGNORE).collect();
                let hb = hb.select(&keep);
                let classes = (0..hb.labels.len())
                    .map(|i| match hb.matched_gt[i] {
                        Some(j) if hb.labels[i] == POSITIVE => 1 + gts[j].bug_class.index(),
                        _ => 0,
                    })
                    .collect();
                (hb.n_cls > 0).then_some((hb, classes))
            };
            ImagePlan { rpn: rpn_batch, head }
        }
    };
    let rpn_loss = detection_loss(g, rpn.logits, rpn.deltas, &plan.rpn, None, lambda)?;
    let mut total = rpn_loss.total;
    let mut head_loss = None;
    if let Some((hb, classes)) = &plan.head {
        let pooled = roi_pool(g, tokens, &hb.anchors, cfg);
        let out = model.roi.forward(g, b, pooled);
        let s = detection_loss(g, out.logits, out.deltas, hb, Some(classes), lambda)?;
        total = g.add(total, s.total);
        head_loss = Some(s);
    }
    Ok((
        ImageLoss {
            rpn: rpn_loss,
            head: head_loss,
            total,
        },
        plan,
    ))
}

/// All scalar loss terms of one optimizer step. Stage terms and
/// `l_od_downstream` are means over the downstream images of the step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls_rpn: f64,
    pub l_loc_rpn: f64,
    pub l_cls_head: f64,
    pub l_loc_head: f64,
    pub l_od_downstream: f64,
    pub l_od_cotitle: f64,
    pub l_co_sup: f64,
    pub mse_ssl: f64,
    pub l_cft: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.l_cls_rpn,
            self.l_loc_rpn,
            self.l_cls_head,
            self.l_loc_head,
            self.l_od_downstream,
            self.l_od_cotitle,
            self.l_co_sup,
            self.mse_ssl,
            self.l_cft,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::raw(a, b, c, d)
    }

    #[test]
    fn identical_anchor_is_positive_with_zero_deltas() {
        let g = bx(2.0, 2.0, 10.0, 12.0);
        let batch = assign_anchors(&[g, bx(30.0, 30.0, 40.0, 40.0)], &[g], 0.7, 0.3).unwrap();
        assert_eq!(batch.labels, vec![POSITIVE, NEGATIVE]);
        assert_eq!(batch.targets[0], Some(BoxDeltas::default()));
        assert_eq!(batch.targets[1], None);
        assert_eq!((batch.n_cls, batch.n_loc), (2, 1));
    }

    #[test]
    fn low_overlap_is_negative_and_middle_is_ignored() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        // IoU 1/2: (0,0,10,5) covers half the gt; a better anchor exists
        let anchors = [g, bx(0.0, 0.0, 10.0, 5.0), bx(9.0, 0.0, 19.0, 10.0)];
        let batch = assign_anchors(&anchors, &[g], 0.7, 0.3).unwrap();
        assert!((iou(&anchors[2], &g) - 10.0 / 190.0).abs() < 1e-12);
        assert_eq!(batch.labels, vec![POSITIVE, IGNORE, NEGATIVE]);
    }

    #[test]
    fn argmax_rule_rescues_poorly_covered_gt() {
        let g = bx(0.0, 0.0, 4.0, 4.0);
        let anchors = [bx(0.0, 0.0, 8.0, 8.0), bx(20.0, 20.0, 28.0, 28.0)];
        let batch = assign_anchors(&anchors, &[g], 0.7, 0.3).unwrap();
        assert_eq!(batch.labels[0], POSITIVE);
        assert_eq!(batch.matched_gt[0], Some(0));
    }

    #[test]
    fn assignment_errors() {
        assert!(matches!(assign_anchors(&[], &[], 0.7, 0.3), Err(LossError::EmptyAnchors)));
        let a = [bx(0.0, 0.0, 1.0, 1.0)];
        assert!(matches!(assign_anchors(&a, &[], 0.3, 0.3), Err(LossError::Thresholds { .. })));
        let b = assign_anchors(&a, &[], 0.7, 0.3).unwrap();
        assert_eq!(b.labels, vec![NEGATIVE]);
    }

    #[test]
    fn subsample_balances_and_pads() {
        let g = bx(0.0, 0.0, 8.0, 8.0);
        let mut anchors = vec![g; 3];
        anchors.extend((0..100).map(|i| bx(20.0 + i as f64, 20.0, 28.0 + i as f64, 28.0)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = assign_anchors(&anchors, &[g], 0.7, 0.3).unwrap();
        subsample(&mut b, 64, 0.5, &mut rng);
        assert_eq!((b.n_cls, b.n_loc), (64, 3));
        let mut many = assign_anchors(&vec![g; 80], &[g], 0.7, 0.3).unwrap();
        subsample(&mut many, 64, 0.5, &mut rng);
        assert_eq!((many.n_cls, many.n_loc), (32, 32));
        assert!(many.labels.iter().zip(&many.targets).all(|(l, t)| (*l == POSITIVE) == t.is_some()));
    }

    fn eval_loss(logits: Tensor, deltas: Tensor, batch: &AnchorBatch, classes: Option<&[usize]>, lambda: f64) -> (f64, f64, f64) {
        let mut g = Graph::new();
        let l = g.input(logits);
        let d = g.input(deltas);
        let s = detection_loss(&mut g, l, d, batch, classes, lambda).unwrap();
        (g.scalar(s.cls), g.scalar(s.loc), g.scalar(s.total))
    }

    fn toy_batch() -> AnchorBatch {
        let g = bx(0.0, 0.0, 8.0, 8.0);
        let anchors = [bx(0.0, 0.0, 8.0, 9.0), bx(1.0, 0.0, 9.0, 8.0), bx(30.0, 30.0, 38.0, 38.0), bx(0.0, 0.0, 8.0, 14.0)];
        assign_anchors(&anchors, &[g], 0.7, 0.3).unwrap()
    }

    #[test]
    fn perfect_predictions_vanish() {
        let batch = toy_batch();
        let z = 9.0 * std::f64::consts::LN_10; // p = 1 - 1e-9
        let logits: Vec<f64> = batch.labels.iter().map(|&l| if l == POSITIVE { z } else { -z }).collect();
        let mut deltas = Tensor::zeros(4, 4);
        for i in batch.positives() {
            deltas.row_mut(i).copy_from_slice(&batch.targets[i].unwrap().to_array());
        }
        let (_, _, total) = eval_loss(Tensor::from_vec(4, 1, logits), deltas, &batch, None, 1.0);
        assert!(total <= 1e-6, "{total}");
    }

    #[test]
    fn lambda_zero_and_negative_gating() {
        let batch = toy_batch();
        let logits = Tensor::from_vec(4, 1, vec![0.3, -1.0, 2.0, 0.1]);
        let deltas = Tensor::from_vec(4, 4, (0..16).map(|i| i as f64 * 0.37 - 2.0).collect());
        let (cls, loc, total) = eval_loss(logits.clone(), deltas.clone(), &batch, None, 0.0);
        assert!(loc > 0.0);
        assert_eq!(total, cls);
        // independent value of the normalized classification term
        let mut expect = 0.0;
        for (i, &l) in batch.labels.iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            let p = 1.0 / (1.0 + (-logits.data[i]).exp());
            expect -= if l == POSITIVE { p.ln() } else { (1.0 - p).ln() };
        }
        assert!((cls - expect / batch.n_cls as f64).abs() < 1e-12);

        // without gt every anchor is negative
        let only_neg = assign_anchors(&[bx(40.0, 40.0, 48.0, 48.0); 3], &[], 0.7, 0.3).unwrap();
        let d = Tensor::from_vec(3, 4, vec![5.0; 12]);
        let (_, loc, _) = eval_loss(Tensor::zeros(3, 1), d, &only_neg, None, 1.0);
        assert_eq!(loc, 0.0);
    }

    #[test]
    fn negative_anchors_get_no_box_gradient() {
        let batch = toy_batch();
        let mut g = Graph::new();
        let mut store = crate::autograd::ParamStore::new();
        let did = store.insert("d", Tensor::from_vec(4, 4, (0..16).map(|i| i as f64 * 0.3 - 1.0).collect()));
        let b = g.bind(&store, true);
        let l = g.input(Tensor::zeros(4, 1));
        let s = detection_loss(&mut g, l, b.get(did), &batch, None, 1.0).unwrap();
        let grads = g.backward(s.total, &store);
        for i in 0..4 {
            let row = grads.get(did).row(i);
            if batch.labels[i] != POSITIVE {
                assert!(row.iter().all(|&v| v == 0.0));
            } else {
                assert!(row.iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let batch = toy_batch();
        let logits = Tensor::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.7).sin()).collect());
        let deltas = Tensor::from_vec(4, 4, (0..16).map(|i| (i as f64 * 1.3).cos()).collect());
        let classes = [1, 2, 0, 0];
        let (.., base) = eval_loss(logits.clone(), deltas.clone(), &batch, Some(&classes), 1.0);
        let perm = [2, 0, 3, 1];
        let pb = batch.select(&perm);
        let pl = Tensor::from_vec(4, 3, perm.iter().flat_map(|&i| logits.row(i).to_vec()).collect());
        let pd = Tensor::from_vec(4, 4, perm.iter().flat_map(|&i| deltas.row(i).to_vec()).collect());
        let pc: Vec<usize> = perm.iter().map(|&i| classes[i]).collect();
        let (.., permuted) = eval_loss(pl, pd, &pb, Some(&pc), 1.0);
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn detection_loss_errors() {
        let batch = toy_batch();
        let mut g = Graph::new();
        let l = g.input(Tensor::zeros(3, 1));
        let d = g.input(Tensor::zeros(4, 4));
        assert!(matches!(detection_loss(&mut g, l, d, &batch, None, 1.0), Err(LossError::Misaligned { .. })));
        let empty = batch.select(&[]);
        let l = g.input(Tensor::zeros(0, 1));
        let d = g.input(Tensor::zeros(0, 4));
        assert!(matches!(detection_loss(&mut g, l, d, &empty, None, 1.0), Err(LossError::NoSampledAnchors)));
    }

    #[test]
    fn fusion_arithmetic() {
        assert_eq!(co_supervised_loss(0.7, 0.9, 0.0).unwrap(), 0.7);
        assert_eq!(co_supervised_loss(0.5, 0.25, 1.0).unwrap(), 0.75);
        assert!((co_supervised_loss(1.0, 1.0, 0.4).unwrap() - 1.4).abs() < 1e-15);
        assert_eq!(total_loss(1.3, 0.8, 0.0).unwrap(), 1.3);
        assert!((total_loss(1.0, 0.5, 0.2).unwrap() - 1.1).abs() < 1e-15);
        assert_eq!(total_loss(0.9, 0.0, 0.6).unwrap(), 0.9);
        assert!(co_supervised_loss(1.0, 1.0, -0.1).is_err());
        assert!(total_loss(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn alpha_zero_gives_no_co_gradient() {
        let mut store = crate::autograd::ParamStore::new();
        let a = store.insert("down", Tensor::scalar(0.8));
        let c = store.insert("co", Tensor::scalar(1.7));
        let mut g = Graph::new();
        let b = g.bind(&store, true);
        let down = g.sum(b.get(a));
        let co = g.gelu(b.get(c));
        let co = g.sum(co);
        let fused = co_supervised_node(&mut g, down, co, 0.0).unwrap();
        assert_eq!(g.scalar(fused), g.scalar(down));
        let grads = g.backward(fused, &store);
        assert_eq!(grads.get(c).data[0], 0.0);
        assert_eq!(grads.get(a).data[0], 1.0);
    }

    #[test]
    fn affine_in_alpha_and_beta() {
        let (down, co, mse, alpha) = (0.8, 1.3, 0.45, 0.3);
        let at = |a: f64, b: f64| total_loss(co_supervised_loss(down, co, a).unwrap(), mse, b).unwrap();
        for w in [0.0, 0.25, 0.5] {
            assert!((at(w + 0.1, 0.2) - at(w, 0.2) - 0.1 * co).abs() < 1e-12);
            assert!((at(alpha, w + 0.1) - at(alpha, w) - 0.1 * mse).abs() < 1e-12);
        }
    }

    fn mse(pred: &Tensor, target: &Tensor, mask: &MaskSpec) -> f64 {
        let mut g = Graph::new();
        let p = g.input(pred.clone());
        let l = ssl_loss(&mut g, p, target, mask).unwrap();
        g.scalar(l)
    }

    #[test]
    fn ssl_loss_reads_masked_rows_only() {
        let target = Tensor::from_vec(6, 3, (0..18).map(|i| i as f64 * 0.1).collect());
        let mask = MaskSpec::from_indices(vec![1, 4], 6);
        let pred = Tensor::from_vec(2, 3, [target.row(1), target.row(4)].concat());
        assert_eq!(mse(&pred, &target, &mask), 0.0);
        let shifted = Tensor::from_vec(2, 3, pred.data.iter().map(|v| v + 0.1).collect());
        let base = mse(&shifted, &target, &mask);
        let mut other = target.clone();
        for r in [0, 2, 3, 5] {
            other.row_mut(r).iter_mut().for_each(|v| *v = 1e6);
        }
        assert_eq!(mse(&shifted, &other, &mask), base);

        let one = MaskSpec::from_indices(vec![2], 6);
        let c = 0.75;
        let pred = Tensor::from_vec(1, 3, target.row(2).iter().map(|v| v + c).collect());
        assert!((mse(&pred, &target, &one) - c * c).abs() < 1e-12);

        let mut g = Graph::new();
        let p = g.input(Tensor::zeros(0, 3));
        assert!(matches!(ssl_loss(&mut g, p, &target, &MaskSpec::empty(6)), Err(LossError::EmptyMask)));
    }

    #[test]
    fn breakdown_serializes() {
        let b = LossBreakdown {
            l_cft: 1.5,
            alpha: 0.4,
            ..Default::default()
        };
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(serde_json::from_str::<LossBreakdown>(&s).unwrap(), b);
        assert!(b.is_finite());
    }
}
